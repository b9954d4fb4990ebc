//! WebAssembly bindings for the browser demo in `www/`.
//!
//! A [`Demo`] holds one clutter scene. The page can regenerate it, excavate
//! with a heuristic planner, or excavate a hand-picked trajectory and inspect
//! the bucket's key poses.

use excavation::commands::observe;
use excavation::config::RunConfig;
use excavation::geometry::HeightMap;
use excavation::kinematics::{expand_phases, TaskTrajectory};
use excavation::planner::{plan_highest_heu, plan_random_heu};
use excavation::rng::{stream, stream2, Purpose};
use excavation::simulator::{dump_and_settle, execute_excavation, gen_scene, label_outcome, ClutterScene};
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct Demo {
    cfg: RunConfig,
    scene: ClutterScene,
    hm: HeightMap,
    initial_volume: f64,
    trials: u64,
}

#[wasm_bindgen]
impl Demo {
    /// Fresh scene with `n_objects` objects drawn from `seed`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, n_objects: usize) -> Result<Demo, String> {
        let cfg = RunConfig {
            seed,
            collect_objects: (n_objects, n_objects),
            ..RunConfig::default()
        };
        let scene = gen_scene(&cfg.scene_config(false), &mut stream(seed, Purpose::Misc, 0));
        let (hm, _) = observe(&scene, &cfg).map_err(|e| e.to_string())?;
        Ok(Demo {
            initial_volume: scene.in_tray_volume(),
            cfg,
            scene,
            hm,
            trials: 0,
        })
    }

    pub fn nx(&self) -> usize {
        self.hm.dims()[0]
    }

    pub fn ny(&self) -> usize {
        self.hm.dims()[1]
    }

    /// Height map, row-major with x fastest, tray frame meters.
    pub fn heights(&self) -> Vec<f64> {
        self.hm.heights.clone()
    }

    /// `[x_min, y_min, cell, floor_z]`
    pub fn layout(&self) -> Vec<f64> {
        let s = &self.hm.spec;
        vec![s.origin[0], s.origin[1], s.cell_size, s.floor_z]
    }

    pub fn object_count(&self) -> usize {
        self.scene.objects.len()
    }

    /// `[initial, in tray, dumped]`, cm³.
    pub fn volumes(&self) -> Vec<f64> {
        vec![
            self.initial_volume,
            self.scene.in_tray_volume(),
            self.scene.dumped_volume,
        ]
    }

    /// Plans with `random-heu` or `highest-heu` and executes. Returns the
    /// trajectory followed by volume, object count, valid and success flags.
    pub fn excavate_heuristic(&mut self, planner: &str) -> Result<Vec<f64>, String> {
        let mut rng = stream2(self.cfg.seed, Purpose::Plan, 0, self.trials);
        let t = match planner {
            "random-heu" => plan_random_heu(&self.hm, &self.cfg.heuristic, &self.cfg.tray, &mut rng),
            "highest-heu" => plan_highest_heu(&self.hm, &self.cfg.heuristic, &self.cfg.tray, &mut rng),
            other => return Err(format!("unknown planner {other}")),
        };
        self.run(t)
    }

    /// Executes a hand-picked trajectory; same result layout as
    /// `excavate_heuristic`.
    pub fn excavate(&mut self, x: f64, y: f64, alpha: f64, d: f64, l: f64, beta: f64) -> Result<Vec<f64>, String> {
        self.run(TaskTrajectory::new(x, y, alpha, d, l, beta))
    }

    /// Bucket key poses P0..P5 as `(x, y, z, alpha)` quadruples, or the
    /// reason the trajectory cannot be expanded.
    pub fn key_poses(&self, x: f64, y: f64, alpha: f64, d: f64, l: f64, beta: f64) -> Result<Vec<f64>, String> {
        let t = TaskTrajectory::new(x, y, alpha, d, l, beta);
        let poses = expand_phases(&t, &self.hm, &self.cfg.excavator).map_err(|e| e.to_string())?;
        Ok(poses.iter().flat_map(|p| [p.x, p.y, p.z, p.alpha]).collect())
    }

    /// Horizontal position of the excavator's swing axis, `[x, y]`.
    pub fn base_xy(&self) -> Vec<f64> {
        let b = self.cfg.excavator.base_position;
        vec![b.x, b.y]
    }
}

impl Demo {
    fn run(&mut self, t: TaskTrajectory) -> Result<Vec<f64>, String> {
        self.trials += 1;
        let o = execute_excavation(&mut self.scene, &t, &self.cfg.excavator, &self.hm, &self.cfg.sim);
        dump_and_settle(&mut self.scene, &o);
        self.hm = observe(&self.scene, &self.cfg).map_err(|e| e.to_string())?.0;
        let mut out = t.to_array().to_vec();
        out.extend([
            o.captured_volume,
            o.captured_count as f64,
            o.valid as u8 as f64,
            label_outcome(&o) as u8 as f64,
        ]);
        Ok(out)
    }
}
