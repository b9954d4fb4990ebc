use crate::geometry::HeightMap;
use crate::kinematics::{validate, ExcavatorModel, TaskTrajectory, ValidityReport};

use super::ClutterScene;

/// Captured volume must exceed this for a trial to count as a success
/// (30 % of the 450 cm³ bucket).
pub const SUCCESS_THRESHOLD_CM3: f64 = 134.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    /// Penetration resistance per unit frontal area, N/m².
    pub k_pen: f64,
    pub k_drag: f64,
    pub g_eff: f64,
    /// N
    pub force_limit: f64,
    /// Attack point must lie this far inside the tray footprint, meters.
    pub attack_margin: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            k_pen: 4000.0,
            k_drag: 2.0,
            g_eff: 9.81,
            force_limit: 150.0,
            attack_margin: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeReason {
    Ok,
    IkOrRange,
    ForceLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExcavationOutcome {
    pub captured_ids: Vec<u32>,
    /// cm³
    pub captured_volume: f64,
    pub captured_count: usize,
    /// N
    pub peak_force: f64,
    pub valid: bool,
    pub reason: OutcomeReason,
    pub validity: ValidityReport,
}

impl ExcavationOutcome {
    fn invalid(reason: OutcomeReason, peak_force: f64, validity: ValidityReport) -> Self {
        ExcavationOutcome {
            captured_ids: vec![],
            captured_volume: 0.0,
            captured_count: 0,
            peak_force,
            valid: false,
            reason,
            validity,
        }
    }
}

/// Indices of objects whose centroid lies in the swept prism: within half a
/// bucket width of the drag line, between the attack point and one mouth
/// length past the drag end, and no lower than the penetration depth.
/// Sorted by distance to the drag end, ties by id.
pub fn capture_candidates(scene: &ClutterScene, t: &TaskTrajectory, m: &ExcavatorModel, z0: f64) -> Vec<usize> {
    let to_base = (m.base_position.x - t.x, m.base_position.y - t.y);
    let dist = to_base.0.hypot(to_base.1);
    let (ux, uy) = (to_base.0 / dist, to_base.1 / dist);
    let (ex, ey) = (t.x + t.l * ux, t.y + t.l * uy);
    let reach = t.l + m.bucket_mouth_length;
    let floor = z0 - t.d;
    let mut found: Vec<(f64, u32, usize)> = scene
        .objects
        .iter()
        .enumerate()
        .filter_map(|(k, o)| {
            let c = o.world_centroid();
            let (rx, ry) = (c.x - t.x, c.y - t.y);
            let along = rx * ux + ry * uy;
            let across = (rx * uy - ry * ux).abs();
            let inside = along >= 0.0 && along <= reach && across <= m.bucket_width / 2.0 && c.z >= floor;
            inside.then(|| ((c.x - ex).hypot(c.y - ey), o.id, k))
        })
        .collect();
    found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    found.into_iter().map(|(_, _, k)| k).collect()
}

/// Executes `t` against the scene. Captured objects move from the tray into
/// the bucket; invalid trials leave the scene untouched.
pub fn execute_excavation(
    scene: &mut ClutterScene,
    t: &TaskTrajectory,
    m: &ExcavatorModel,
    hm: &HeightMap,
    params: &SimParams,
) -> ExcavationOutcome {
    let validity = validate(t, hm, m, &scene.tray, params.attack_margin);
    if !validity.is_valid() {
        return ExcavationOutcome::invalid(OutcomeReason::IkOrRange, 0.0, validity);
    }
    let z0 = hm
        .surface_height(t.x, t.y)
        .expect("validated attack point lies on the height map");
    let candidates = capture_candidates(scene, t, m, z0);
    let candidate_mass: f64 = candidates.iter().map(|&k| scene.objects[k].mass()).sum();
    let peak_force = params.k_pen * t.d * m.bucket_width + params.k_drag * candidate_mass * params.g_eff;
    if peak_force > params.force_limit {
        return ExcavationOutcome::invalid(OutcomeReason::ForceLimit, peak_force, validity);
    }

    let mut taken = Vec::new();
    let mut volume = 0.0;
    for &k in &candidates {
        let v = scene.objects[k].volume;
        if volume + v > m.bucket_volume {
            break;
        }
        volume += v;
        taken.push(k);
    }
    let captured_ids: Vec<u32> = taken.iter().map(|&k| scene.objects[k].id).collect();
    taken.sort_unstable();
    for &k in taken.iter().rev() {
        let obj = scene.objects.remove(k);
        scene.bucket.push(obj);
    }
    scene.pending_volume += volume;
    ExcavationOutcome {
        captured_count: captured_ids.len(),
        captured_ids,
        captured_volume: volume,
        peak_force,
        valid: true,
        reason: OutcomeReason::Ok,
        validity,
    }
}

pub fn label_outcome(o: &ExcavationOutcome) -> bool {
    o.valid && o.captured_volume > SUCCESS_THRESHOLD_CM3
}

/// Empties the bucket into the dumping tray and lets the remaining pile
/// settle.
pub fn dump_and_settle(scene: &mut ClutterScene, o: &ExcavationOutcome) {
    if o.captured_count == 0 {
        return;
    }
    scene.dumped_volume += o.captured_volume;
    scene.pending_volume -= o.captured_volume;
    scene.bucket.clear();
    scene.resettle();
}
