//! Run configuration: a plain-text `key = value` file.
//!
//! Every key has a default; unknown keys are rejected. Blank lines and lines
//! starting with `#` are ignored. Lists are comma separated. Angles are in
//! radians, lengths in meters, volumes in cm³.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{CuboidRegion, GridSpec, HeightMapSpec};
use crate::kinematics::ExcavatorModel;
use crate::learning::{ConvBlock, Head, NetworkSpec, TrainConfig, Variant};
use crate::planner::{CemConfig, HeuristicRanges, PlanContext};
use crate::simulator::{SceneGenConfig, SimParams};

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub pool: usize,
    pub conv_channels: Vec<usize>,
    pub conv_stride: usize,
    pub fc_widths: Vec<usize>,
    pub volume_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            pool: 2,
            conv_channels: vec![16, 32, 64, 128],
            conv_stride: 2,
            fc_widths: vec![512, 256, 128],
            volume_scale: 450.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub tray: CuboidRegion,
    pub excavator: ExcavatorModel,
    pub sim: SimParams,
    /// Render raster spacing, meters.
    pub raster_spacing: f64,
    pub height_map_cell: f64,
    pub voxel_resolution: f64,
    pub density: f64,
    pub vertex_count: (usize, usize),
    pub coord_max: (f64, f64),
    pub collect_objects: (usize, usize),
    pub bench_objects: (usize, usize),
    pub heuristic: HeuristicRanges,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub cem: CemConfig,
    pub collect_episodes: usize,
    pub collect_trials: usize,
    pub bench_episodes: usize,
    pub bench_trials: usize,
    pub ablate_trials: usize,
    pub val_fraction: f64,
    /// Success threshold used by `eval` on classifier scores.
    pub eval_threshold: f64,
    pub hist_bin_width: f64,
    pub out_dir: PathBuf,
    /// 0 uses every available core.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            tray: CuboidRegion::default(),
            excavator: ExcavatorModel::default(),
            sim: SimParams::default(),
            raster_spacing: 0.005,
            height_map_cell: 0.01,
            voxel_resolution: 0.01,
            density: 6.0,
            vertex_count: (10, 50),
            coord_max: (0.01, 0.05),
            collect_objects: (50, 400),
            bench_objects: (200, 400),
            heuristic: HeuristicRanges::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            cem: CemConfig::default(),
            collect_episodes: 250,
            collect_trials: 20,
            bench_episodes: 20,
            bench_trials: 10,
            ablate_trials: 200,
            val_fraction: 0.1,
            eval_threshold: 0.5,
            hist_bin_width: 25.0,
            out_dir: PathBuf::from("out"),
            workers: 0,
        }
    }
}

enum Field<'a> {
    F64(&'a mut f64),
    Usize(&'a mut usize),
    U64(&'a mut u64),
    Bool(&'a mut bool),
    List(&'a mut Vec<usize>),
    Path(&'a mut PathBuf),
}

impl Field<'_> {
    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let bad = || Error::Config(format!("cannot parse value {raw:?} for key {key}"));
        match self {
            Field::F64(v) => **v = raw.parse().map_err(|_| bad())?,
            Field::Usize(v) => **v = raw.parse().map_err(|_| bad())?,
            Field::U64(v) => **v = raw.parse().map_err(|_| bad())?,
            Field::Bool(v) => **v = raw.parse().map_err(|_| bad())?,
            Field::List(v) => {
                **v = if raw.is_empty() {
                    vec![]
                } else {
                    raw.split(',')
                        .map(|s| s.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad())?
                }
            }
            Field::Path(v) => **v = PathBuf::from(raw),
        }
        Ok(())
    }

    fn show(&self) -> String {
        match self {
            Field::F64(v) => format!("{v:?}"),
            Field::Usize(v) => v.to_string(),
            Field::U64(v) => v.to_string(),
            Field::Bool(v) => v.to_string(),
            Field::List(v) => v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
            Field::Path(v) => v.display().to_string(),
        }
    }
}

impl RunConfig {
    fn fields(&mut self) -> Vec<(&'static str, &'static str, Field<'_>)> {
        use Field::*;
        let m = &mut self.excavator;
        let [q1, q2, q3, q4] = &mut m.joint_limits;
        let [cx, cy, cz] = self.tray.center.coords.as_mut_slice() else {
            unreachable!()
        };
        let [hx, hy, hz] = self.tray.half_extents.as_mut_slice() else {
            unreachable!()
        };
        let [bx, by, bz] = m.base_position.coords.as_mut_slice() else {
            unreachable!()
        };
        vec![
            ("seed", "master seed", U64(&mut self.seed)),
            ("tray.center_x", "tray center, tray frame", F64(cx)),
            ("tray.center_y", "", F64(cy)),
            ("tray.center_z", "", F64(cz)),
            ("tray.half_x", "tray half extents", F64(hx)),
            ("tray.half_y", "", F64(hy)),
            ("tray.half_z", "floor is center_z - half_z", F64(hz)),
            ("excavator.base_x", "swing axis position", F64(bx)),
            ("excavator.base_y", "", F64(by)),
            ("excavator.base_z", "mount height", F64(bz)),
            (
                "excavator.base_height",
                "boom pivot above the mount",
                F64(&mut m.base_height),
            ),
            ("excavator.boom", "link lengths", F64(&mut m.boom_length)),
            ("excavator.stick", "", F64(&mut m.stick_length)),
            ("excavator.bucket", "", F64(&mut m.bucket_length)),
            ("excavator.q1_min", "joint limits, radians", F64(&mut q1.0)),
            ("excavator.q1_max", "", F64(&mut q1.1)),
            ("excavator.q2_min", "", F64(&mut q2.0)),
            ("excavator.q2_max", "", F64(&mut q2.1)),
            ("excavator.q3_min", "", F64(&mut q3.0)),
            ("excavator.q3_max", "", F64(&mut q3.1)),
            ("excavator.q4_min", "", F64(&mut q4.0)),
            ("excavator.q4_max", "", F64(&mut q4.1)),
            (
                "excavator.lift_height",
                "bucket z after the lift phase",
                F64(&mut m.lift_height),
            ),
            ("excavator.bucket_volume", "cm³", F64(&mut m.bucket_volume)),
            ("excavator.bucket_width", "", F64(&mut m.bucket_width)),
            ("excavator.bucket_mouth", "", F64(&mut m.bucket_mouth_length)),
            ("excavator.bucket_depth", "", F64(&mut m.bucket_depth)),
            ("excavator.home_x", "start pose P0", F64(&mut m.home.x)),
            ("excavator.home_y", "", F64(&mut m.home.y)),
            ("excavator.home_z", "", F64(&mut m.home.z)),
            ("excavator.home_alpha", "", F64(&mut m.home.alpha)),
            (
                "excavator.interp_step",
                "interpolation step along each phase",
                F64(&mut m.interp_step),
            ),
            (
                "excavator.max_joint_step",
                "largest joint change between waypoints",
                F64(&mut m.max_joint_step),
            ),
            ("sim.k_pen", "penetration resistance, N/m²", F64(&mut self.sim.k_pen)),
            ("sim.k_drag", "drag coefficient", F64(&mut self.sim.k_drag)),
            ("sim.g_eff", "m/s²", F64(&mut self.sim.g_eff)),
            ("sim.force_limit", "N", F64(&mut self.sim.force_limit)),
            (
                "sim.attack_margin",
                "attack point inset from the tray walls",
                F64(&mut self.sim.attack_margin),
            ),
            (
                "sim.raster_spacing",
                "render ray spacing",
                F64(&mut self.raster_spacing),
            ),
            ("sim.height_map_cell", "", F64(&mut self.height_map_cell)),
            (
                "sim.voxel_resolution",
                "grid is always 64 x 64 x 32",
                F64(&mut self.voxel_resolution),
            ),
            ("scene.density", "g/cm³", F64(&mut self.density)),
            (
                "scene.vertices_min",
                "raw vertices per object",
                Usize(&mut self.vertex_count.0),
            ),
            ("scene.vertices_max", "", Usize(&mut self.vertex_count.1)),
            (
                "scene.coord_max_min",
                "per-axis object size range",
                F64(&mut self.coord_max.0),
            ),
            ("scene.coord_max_max", "", F64(&mut self.coord_max.1)),
            (
                "scene.collect_objects_min",
                "objects per collection scene",
                Usize(&mut self.collect_objects.0),
            ),
            ("scene.collect_objects_max", "", Usize(&mut self.collect_objects.1)),
            (
                "scene.bench_objects_min",
                "objects per benchmark scene",
                Usize(&mut self.bench_objects.0),
            ),
            ("scene.bench_objects_max", "", Usize(&mut self.bench_objects.1)),
            (
                "heuristic.alpha_min",
                "excavation angle range",
                F64(&mut self.heuristic.alpha.0),
            ),
            ("heuristic.alpha_max", "", F64(&mut self.heuristic.alpha.1)),
            (
                "heuristic.d_min",
                "penetration depth range",
                F64(&mut self.heuristic.d.0),
            ),
            ("heuristic.d_max", "", F64(&mut self.heuristic.d.1)),
            ("heuristic.l_min", "drag length range", F64(&mut self.heuristic.l.0)),
            ("heuristic.l_max", "", F64(&mut self.heuristic.l.1)),
            (
                "heuristic.beta_min",
                "closing angle range",
                F64(&mut self.heuristic.beta.0),
            ),
            ("heuristic.beta_max", "", F64(&mut self.heuristic.beta.1)),
            (
                "net.pool",
                "average-pool factor before the conv stack",
                Usize(&mut self.net.pool),
            ),
            (
                "net.conv_channels",
                "one conv block per entry",
                List(&mut self.net.conv_channels),
            ),
            ("net.conv_stride", "", Usize(&mut self.net.conv_stride)),
            ("net.fc_widths", "", List(&mut self.net.fc_widths)),
            (
                "net.volume_scale",
                "regression target divisor",
                F64(&mut self.net.volume_scale),
            ),
            ("train.batch_size", "", Usize(&mut self.train.batch_size)),
            ("train.epochs", "", Usize(&mut self.train.epochs)),
            ("train.lr", "Adam learning rate", F64(&mut self.train.lr)),
            (
                "train.lr_decay_every",
                "epochs between decays, 0 = constant",
                Usize(&mut self.train.lr_decay_every),
            ),
            ("train.lr_decay_factor", "", F64(&mut self.train.lr_decay_factor)),
            (
                "train.oversample",
                "balance positives each epoch",
                Bool(&mut self.train.oversample_positives),
            ),
            (
                "train.val_fraction",
                "held-out share of the dataset",
                F64(&mut self.val_fraction),
            ),
            (
                "cem.n_init",
                "random-heu samples for the initial fit",
                Usize(&mut self.cem.n_init),
            ),
            ("cem.n_iters", "", Usize(&mut self.cem.n_iters)),
            ("cem.n_samples", "samples per iteration", Usize(&mut self.cem.n_samples)),
            ("cem.n_elite", "", Usize(&mut self.cem.n_elite)),
            ("cem.n_final", "", Usize(&mut self.cem.n_final)),
            ("cem.variance_floor", "", F64(&mut self.cem.variance_floor)),
            (
                "cem.clamp_widths",
                "sample clamp in range widths, 0 = off",
                F64(&mut self.cem.clamp_widths),
            ),
            ("collect.episodes", "", Usize(&mut self.collect_episodes)),
            ("collect.trials", "trials per episode", Usize(&mut self.collect_trials)),
            ("bench.episodes", "", Usize(&mut self.bench_episodes)),
            ("bench.trials", "trials per episode", Usize(&mut self.bench_trials)),
            (
                "ablate.trials",
                "paired trials per mode",
                Usize(&mut self.ablate_trials),
            ),
            (
                "eval.threshold",
                "classifier decision threshold",
                F64(&mut self.eval_threshold),
            ),
            (
                "stats.bin_width",
                "histogram bin width, cm³",
                F64(&mut self.hist_bin_width),
            ),
            ("out_dir", "", Path(&mut self.out_dir)),
            ("workers", "threads, 0 = all cores", Usize(&mut self.workers)),
        ]
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut fields = self.fields();
        let f = fields
            .iter_mut()
            .find(|(k, _, _)| *k == key)
            .ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
        f.2.set(key, value)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical form: every key in a fixed order with its current value.
    pub fn to_text(&self) -> String {
        let mut copy = self.clone();
        let mut out = String::new();
        for (k, _, f) in copy.fields() {
            let _ = writeln!(out, "{k} = {}", f.show());
        }
        out
    }

    /// Every key with its default value and a short note.
    pub fn documented_defaults() -> Vec<(&'static str, String, &'static str)> {
        let mut d = RunConfig::default();
        d.fields().into_iter().map(|(k, doc, f)| (k, f.show(), doc)).collect()
    }

    /// SHA-256 of the canonical form, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn check(&self) -> Result<()> {
        CuboidRegion::new(self.tray.center, self.tray.half_extents).map_err(|e| Error::Config(e.to_string()))?;
        self.excavator.check()?;
        self.scene_config(false).check()?;
        self.scene_config(true).check()?;
        self.heuristic.check()?;
        self.cem.check()?;
        self.train.check()?;
        for (name, v) in [
            ("sim.raster_spacing", self.raster_spacing),
            ("sim.height_map_cell", self.height_map_cell),
            ("sim.voxel_resolution", self.voxel_resolution),
            ("stats.bin_width", self.hist_bin_width),
            ("sim.force_limit", self.sim.force_limit),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("train.val_fraction must lie in (0, 1)".into()));
        }
        if GridSpec::default().dims.iter().any(|d| d % self.net.pool != 0) {
            return Err(Error::Config("net.pool must divide the 64 x 64 x 32 grid".into()));
        }
        self.network_spec(Variant::VoxelNet, Head::Classifier).check()
    }

    pub fn floor_z(&self) -> f64 {
        self.tray.center.z - self.tray.half_extents.z
    }

    pub fn scene_config(&self, bench: bool) -> SceneGenConfig {
        SceneGenConfig {
            n_objects: if bench {
                self.bench_objects
            } else {
                self.collect_objects
            },
            vertex_count: self.vertex_count,
            coord_max: self.coord_max,
            tray: self.tray,
            floor_z: self.floor_z(),
            density: self.density,
        }
    }

    /// 64 × 64 × 32 grid centred on the tray.
    pub fn grid_spec(&self) -> GridSpec {
        let mut g = GridSpec::centered([64, 64, 32], self.voxel_resolution);
        g.origin += self.tray.center.coords;
        g
    }

    pub fn height_map_spec(&self) -> HeightMapSpec {
        HeightMapSpec::covering(&self.tray, self.height_map_cell, self.floor_z())
    }

    pub fn network_spec(&self, variant: Variant, head: Head) -> NetworkSpec {
        let ranges = self.heuristic.trajectory_ranges(&self.tray);
        let grid = GridSpec::default().dims;
        let base = NetworkSpec {
            input_dims: grid.map(|d| d / self.net.pool.max(1)),
            pool: self.net.pool,
            conv_blocks: self
                .net
                .conv_channels
                .iter()
                .map(|&c| ConvBlock {
                    out_channels: c,
                    stride: self.net.conv_stride,
                })
                .collect(),
            fc_widths: self.net.fc_widths.clone(),
            volume_scale: self.net.volume_scale,
            ..NetworkSpec::voxel_net(head, ranges)
        };
        match variant {
            Variant::VoxelNet => base,
            Variant::TrajNet => NetworkSpec {
                variant,
                conv_blocks: vec![],
                ..base
            },
        }
    }

    pub fn plan_context<'a>(&'a self, hm: &'a crate::geometry::HeightMap) -> PlanContext<'a> {
        PlanContext {
            hm,
            excavator: &self.excavator,
            tray: &self.tray,
            attack_margin: self.sim.attack_margin,
            heuristic: &self.heuristic,
        }
    }

    /// Worker pool size honouring `workers = 0`.
    pub fn worker_count(&self) -> usize {
        if self.workers == 0 {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        } else {
            self.workers
        }
    }
}
