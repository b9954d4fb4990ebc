//! Heuristic planners and the cross-entropy-method planner over a learned
//! success predictor.

use std::f64::consts::PI;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{CuboidRegion, HeightMap, VoxelGrid};
use crate::kinematics::{validate, ExcavatorModel, TaskTrajectory, TrajectoryRanges, ValidityReport};
use crate::learning::{Model, SceneEncoding, Variant};

/// Sampling ranges of the geometric trajectory parameters, radians and
/// meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicRanges {
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
    pub d: (f64, f64),
    pub l: (f64, f64),
}

impl Default for HeuristicRanges {
    fn default() -> Self {
        HeuristicRanges {
            alpha: (-120f64.to_radians(), -60f64.to_radians()),
            beta: (-PI, -120f64.to_radians()),
            d: (0.05, 0.2),
            l: (0.05, 0.4),
        }
    }
}

impl HeuristicRanges {
    pub fn check(&self) -> Result<()> {
        if [self.alpha, self.beta, self.d, self.l].iter().all(|(lo, hi)| lo < hi) {
            Ok(())
        } else {
            Err(Error::Config("heuristic ranges must satisfy lo < hi".into()))
        }
    }

    /// Full six-parameter ranges, with the PoA spanning the tray footprint.
    pub fn trajectory_ranges(&self, tray: &CuboidRegion) -> TrajectoryRanges {
        let (min, max) = (tray.min_corner(), tray.max_corner());
        TrajectoryRanges {
            lo: [min.x, min.y, self.alpha.0, self.d.0, self.l.0, self.beta.0],
            hi: [max.x, max.y, self.alpha.1, self.d.1, self.l.1, self.beta.1],
        }
    }

    /// `(alpha, d, l, beta)` drawn uniformly.
    pub fn sample_gtp(&self, rng: &mut impl Rng) -> [f64; 4] {
        [
            rng.random_range(self.alpha.0..self.alpha.1),
            rng.random_range(self.d.0..self.d.1),
            rng.random_range(self.l.0..self.l.1),
            rng.random_range(self.beta.0..self.beta.1),
        ]
    }
}

fn footprint_cells(hm: &HeightMap, tray: &CuboidRegion) -> Vec<usize> {
    let [nx, _] = hm.dims();
    let inside: Vec<usize> = (0..hm.cell_count())
        .filter(|&c| {
            let (x, y) = hm.cell_center(c % nx, c / nx);
            tray.footprint_contains(x, y, 0.0)
        })
        .collect();
    if inside.is_empty() {
        (0..hm.cell_count()).collect()
    } else {
        inside
    }
}

fn with_gtp(x: f64, y: f64, g: [f64; 4]) -> TaskTrajectory {
    TaskTrajectory::new(x, y, g[0], g[1], g[2], g[3])
}

/// Random cell center inside the tray footprint, random GTP.
pub fn plan_random_heu(
    hm: &HeightMap,
    ranges: &HeuristicRanges,
    tray: &CuboidRegion,
    rng: &mut impl Rng,
) -> TaskTrajectory {
    let (x, y) = random_poa(hm, tray, rng);
    with_gtp(x, y, ranges.sample_gtp(rng))
}

pub fn random_poa(hm: &HeightMap, tray: &CuboidRegion, rng: &mut impl Rng) -> (f64, f64) {
    let cells = footprint_cells(hm, tray);
    let c = cells[rng.random_range(0..cells.len())];
    hm.cell_center(c % hm.dims()[0], c / hm.dims()[0])
}

/// Center of the highest cell (lowest row-major index on ties), random GTP.
pub fn plan_highest_heu(
    hm: &HeightMap,
    ranges: &HeuristicRanges,
    tray: &CuboidRegion,
    rng: &mut impl Rng,
) -> TaskTrajectory {
    let mut best = None;
    for c in footprint_cells(hm, tray) {
        if best.is_none_or(|b: usize| hm.heights[c] > hm.heights[b]) {
            best = Some(c);
        }
    }
    let c = best.unwrap();
    let (x, y) = hm.cell_center(c % hm.dims()[0], c / hm.dims()[0]);
    with_gtp(x, y, ranges.sample_gtp(rng))
}

/// Anything that maps trajectories to scores, higher is better.
pub trait Scorer {
    fn score(&self, trajs: &[TaskTrajectory]) -> Vec<f64>;
}

impl Scorer for SceneEncoding<'_, f32> {
    fn score(&self, trajs: &[TaskTrajectory]) -> Vec<f64> {
        self.predict(trajs)
    }
}

/// Scorer from a plain function of one trajectory.
pub struct FnScorer<F>(pub F);

impl<F: Fn(&TaskTrajectory) -> f64> Scorer for FnScorer<F> {
    fn score(&self, trajs: &[TaskTrajectory]) -> Vec<f64> {
        trajs.iter().map(&self.0).collect()
    }
}

/// Success probabilities of `trajs` in the scene `voxels`, in input order.
pub fn score_batch(model: &Model, voxels: &VoxelGrid, trajs: &[TaskTrajectory]) -> Result<Vec<f64>> {
    if trajs.is_empty() {
        return Ok(Vec::new());
    }
    Ok(SceneEncoding::new(model, Some(voxels))?.predict(trajs))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CemConfig {
    pub n_init: usize,
    pub n_iters: usize,
    pub n_samples: usize,
    pub n_elite: usize,
    pub n_final: usize,
    /// Normalized units.
    pub variance_floor: f64,
    /// Samples are clamped to this many range widths around the range
    /// center; 0 disables clamping.
    pub clamp_widths: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            n_init: 256,
            n_iters: 5,
            n_samples: 256,
            n_elite: 64,
            n_final: 64,
            variance_floor: 1e-6,
            clamp_widths: 3.0,
        }
    }
}

impl CemConfig {
    pub fn check(&self) -> Result<()> {
        let counts = [self.n_init, self.n_samples, self.n_elite, self.n_final];
        if counts.contains(&0)
            || self.n_elite > self.n_samples
            || !(self.variance_floor > 0.0)
            || self.clamp_widths < 0.0
        {
            return Err(Error::Config(
                "CEM counts must be positive with n_elite <= n_samples and a positive variance floor".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CemMode {
    Full,
    /// The chosen trajectory's PoA is replaced by a random-heu PoA.
    RandomPoa,
    /// The chosen trajectory's GTP is replaced by uniform draws.
    RandomGtp,
}

impl CemMode {
    pub const ALL: [CemMode; 3] = [CemMode::Full, CemMode::RandomPoa, CemMode::RandomGtp];

    pub fn name(&self) -> &'static str {
        match self {
            CemMode::Full => "full",
            CemMode::RandomPoa => "random-poa",
            CemMode::RandomGtp => "random-gtp",
        }
    }
}

impl FromStr for CemMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CemMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown CEM mode '{s}'")))
    }
}

/// Diagonal Gaussian over normalized trajectory parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajDistribution {
    pub mean: [f64; 6],
    pub variance: [f64; 6],
}

impl TrajDistribution {
    /// Sample mean and population variance, variance clamped to `floor`.
    pub fn fit(points: &[[f64; 6]], floor: f64) -> Self {
        let n = points.len() as f64;
        let mean: [f64; 6] = std::array::from_fn(|i| points.iter().map(|p| p[i]).sum::<f64>() / n);
        let variance = std::array::from_fn(|i| {
            let v = points.iter().map(|p| (p[i] - mean[i]).powi(2)).sum::<f64>() / n;
            v.max(floor)
        });
        TrajDistribution { mean, variance }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> [f64; 6] {
        std::array::from_fn(|i| {
            let z: f64 = StandardNormal.sample(rng);
            self.mean[i] + z * self.variance[i].sqrt()
        })
    }
}

/// What the planner needs to check a trajectory against the current scene.
#[derive(Debug, Clone, Copy)]
pub struct PlanContext<'a> {
    pub hm: &'a HeightMap,
    pub excavator: &'a ExcavatorModel,
    pub tray: &'a CuboidRegion,
    pub attack_margin: f64,
    pub heuristic: &'a HeuristicRanges,
}

impl PlanContext<'_> {
    pub fn validate(&self, t: &TaskTrajectory) -> ValidityReport {
        validate(t, self.hm, self.excavator, self.tray, self.attack_margin)
    }

    pub fn ranges(&self) -> TrajectoryRanges {
        self.heuristic.trajectory_ranges(self.tray)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStats {
    pub elite_mean_score: f64,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub traj: TaskTrajectory,
    /// Candidate chosen by the planner before any ablation replacement.
    pub proposed: TaskTrajectory,
    /// Predicted score of the chosen candidate; 0 for heuristic planners.
    pub score: f64,
    pub per_iteration: Vec<IterationStats>,
    pub validity: ValidityReport,
    /// Final CEM distribution, if any.
    pub distribution: Option<TrajDistribution>,
}

impl PlanResult {
    pub const CSV_HEADER: [&'static str; 11] = [
        "planner",
        "x",
        "y",
        "alpha",
        "d",
        "l",
        "beta",
        "score",
        "valid",
        "ik_valid",
        "attack_in_range",
    ];

    pub fn csv_row(&self, planner: &str) -> Vec<String> {
        let mut row = vec![planner.to_string()];
        row.extend(self.traj.to_array().iter().map(|v| v.to_string()));
        row.push(self.score.to_string());
        row.push((self.validity.is_valid() as u8).to_string());
        row.push((self.validity.ik_valid as u8).to_string());
        row.push((self.validity.attack_in_range as u8).to_string());
        row
    }
}

pub fn write_plan_csv(w: impl Write, rows: &[(String, PlanResult)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(PlanResult::CSV_HEADER)?;
    for (name, r) in rows {
        out.write_record(r.csv_row(name))?;
    }
    out.flush().map_err(|e| Error::io("plan csv", e))?;
    Ok(())
}

/// Optimized distribution plus the per-iteration trace, before the final
/// pick.
#[derive(Debug, Clone, PartialEq)]
pub struct CemState {
    pub distribution: TrajDistribution,
    pub per_iteration: Vec<IterationStats>,
}

fn clamp_normalized(mut p: [f64; 6], widths: f64) -> [f64; 6] {
    if widths > 0.0 {
        // one range width is 2 normalized units
        let lim = 2.0 * widths;
        p.iter_mut().for_each(|v| *v = v.clamp(-lim, lim));
    }
    p
}

fn to_traj(ranges: &TrajectoryRanges, p: &[f64; 6]) -> TaskTrajectory {
    let mut t = ranges.denormalize(p);
    t.d = t.d.max(0.0);
    t.l = t.l.max(0.0);
    t
}

/// Elite indices: the `k` highest scores, earlier samples first on ties.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// CEM iterations: initialize from random-heu samples, then repeatedly
/// sample, score and refit to the elite.
pub fn cem_optimize(scorer: &dyn Scorer, ctx: &PlanContext, cfg: &CemConfig, rng: &mut impl Rng) -> Result<CemState> {
    cfg.check()?;
    let ranges = ctx.ranges();
    let init: Vec<[f64; 6]> = (0..cfg.n_init)
        .map(|_| ranges.normalize(&plan_random_heu(ctx.hm, ctx.heuristic, ctx.tray, rng)))
        .collect();
    let mut dist = TrajDistribution::fit(&init, cfg.variance_floor);
    let mut per_iteration = Vec::with_capacity(cfg.n_iters);
    let mut best = f64::NEG_INFINITY;
    for _ in 0..cfg.n_iters {
        let pts: Vec<[f64; 6]> = (0..cfg.n_samples)
            .map(|_| clamp_normalized(dist.sample(rng), cfg.clamp_widths))
            .collect();
        let trajs: Vec<TaskTrajectory> = pts.iter().map(|p| to_traj(&ranges, p)).collect();
        let scores = scorer.score(&trajs);
        let elite = top_k(&scores, cfg.n_elite);
        let elite_pts: Vec<[f64; 6]> = elite.iter().map(|&i| pts[i]).collect();
        dist = TrajDistribution::fit(&elite_pts, cfg.variance_floor);
        let elite_mean = elite.iter().map(|&i| scores[i]).sum::<f64>() / elite.len() as f64;
        best = best.max(scores[elite[0]]);
        per_iteration.push(IterationStats {
            elite_mean_score: elite_mean,
            best_so_far: best,
        });
    }
    Ok(CemState {
        distribution: dist,
        per_iteration,
    })
}

/// Final pick: draw `n_final` candidates, sort by score and return the
/// first that validates after the mode's parameter replacement. One redraw
/// is allowed before giving up.
pub fn cem_finalize(
    state: &CemState,
    scorer: &dyn Scorer,
    ctx: &PlanContext,
    cfg: &CemConfig,
    mode: CemMode,
    rng: &mut impl Rng,
) -> Result<PlanResult> {
    let ranges = ctx.ranges();
    let mut best_invalid: Option<(TaskTrajectory, f64)> = None;
    for _attempt in 0..2 {
        let trajs: Vec<TaskTrajectory> = (0..cfg.n_final)
            .map(|_| {
                to_traj(
                    &ranges,
                    &clamp_normalized(state.distribution.sample(rng), cfg.clamp_widths),
                )
            })
            .collect();
        let scores = scorer.score(&trajs);
        for i in top_k(&scores, trajs.len()) {
            let mut t = trajs[i];
            match mode {
                CemMode::Full => {}
                CemMode::RandomPoa => {
                    let (x, y) = random_poa(ctx.hm, ctx.tray, rng);
                    t.x = x;
                    t.y = y;
                }
                CemMode::RandomGtp => {
                    t = with_gtp(t.x, t.y, ctx.heuristic.sample_gtp(rng));
                }
            }
            let validity = ctx.validate(&t);
            if validity.is_valid() {
                return Ok(PlanResult {
                    traj: t,
                    proposed: trajs[i],
                    score: scores[i],
                    per_iteration: state.per_iteration.clone(),
                    validity,
                    distribution: Some(state.distribution),
                });
            }
            if best_invalid.is_none_or(|(_, s)| scores[i] > s) {
                best_invalid = Some((t, scores[i]));
            }
        }
    }
    let (best, best_score) = best_invalid.expect("n_final is positive");
    Err(Error::PlannerFailure { best, best_score })
}

pub fn cem_plan(
    scorer: &dyn Scorer,
    ctx: &PlanContext,
    cfg: &CemConfig,
    mode: CemMode,
    rng: &mut impl Rng,
) -> Result<PlanResult> {
    let state = cem_optimize(scorer, ctx, cfg, rng)?;
    cem_finalize(&state, scorer, ctx, cfg, mode, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PlannerKind {
    RandomHeu,
    HighestHeu,
    CemVoxel,
    CemTraj,
}

impl PlannerKind {
    pub const ALL: [PlannerKind; 4] = [
        PlannerKind::CemVoxel,
        PlannerKind::CemTraj,
        PlannerKind::RandomHeu,
        PlannerKind::HighestHeu,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PlannerKind::RandomHeu => "random-heu",
            PlannerKind::HighestHeu => "highest-heu",
            PlannerKind::CemVoxel => "cem-voxel",
            PlannerKind::CemTraj => "cem-traj",
        }
    }

    pub fn needs_model(&self) -> Option<Variant> {
        match self {
            PlannerKind::CemVoxel => Some(Variant::VoxelNet),
            PlannerKind::CemTraj => Some(Variant::TrajNet),
            _ => None,
        }
    }
}

impl FromStr for PlannerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PlannerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown planner '{s}'")))
    }
}

/// Trained predictors available to the learned planners.
#[derive(Debug, Clone, Copy, Default)]
pub struct Predictors<'a> {
    pub voxel: Option<&'a Model>,
    pub traj: Option<&'a Model>,
}

/// Uniform entry point over all planners. Heuristic plans carry score 0.
pub fn plan(
    kind: PlannerKind,
    voxels: &VoxelGrid,
    ctx: &PlanContext,
    predictors: &Predictors,
    cfg: &CemConfig,
    mode: CemMode,
    rng: &mut impl Rng,
) -> Result<PlanResult> {
    let heuristic = |t: TaskTrajectory| PlanResult {
        validity: ctx.validate(&t),
        traj: t,
        proposed: t,
        score: 0.0,
        per_iteration: vec![],
        distribution: None,
    };
    match kind {
        PlannerKind::RandomHeu => Ok(heuristic(plan_random_heu(ctx.hm, ctx.heuristic, ctx.tray, rng))),
        PlannerKind::HighestHeu => Ok(heuristic(plan_highest_heu(ctx.hm, ctx.heuristic, ctx.tray, rng))),
        PlannerKind::CemVoxel | PlannerKind::CemTraj => {
            let (model, grid) = if kind == PlannerKind::CemVoxel {
                (predictors.voxel, Some(voxels))
            } else {
                (predictors.traj, None)
            };
            let model = model.ok_or_else(|| Error::Config(format!("{} needs a trained model", kind.name())))?;
            if Some(model.spec().variant) != kind.needs_model() {
                return Err(Error::Config(format!(
                    "{} got a model of the wrong variant",
                    kind.name()
                )));
            }
            let enc = SceneEncoding::new(model, grid)?;
            cem_plan(&enc, ctx, cfg, mode, rng)
        }
    }
}
