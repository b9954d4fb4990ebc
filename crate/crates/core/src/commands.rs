//! Command implementations behind the CLI.
//!
//! Every command is a pure function of the run configuration (seed
//! included). Episodes are spread over a worker pool; each draws from its own
//! stream, so outputs do not depend on the worker count. Files written here
//! get a `.meta` sidecar holding the configuration hash.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::config::RunConfig;
use crate::dataset::{load_dataset, save_dataset, verify_samples, DatasetSummary};
use crate::error::{Error, Result};
use crate::geometry::{build_height_map, voxelize, HeightMap, VoxelGrid};
use crate::kinematics::TaskTrajectory;
use crate::learning::{
    evaluate_classifier, evaluate_regressor, gradient_check, load_model, save_model, tiny_specs, train,
    write_curve_csv, EpochRecord, Example, ExcavationSample, Head, Metrics, Model, SceneEncoding, TrainOutcome,
    Variant,
};
use crate::planner::{
    cem_finalize, cem_optimize, plan, plan_highest_heu, plan_random_heu, CemMode, PlanResult, PlannerKind, Predictors,
};
use crate::rng::{stream, stream2, Purpose};
use crate::simulator::{
    dump_and_settle, execute_excavation, gen_scene, label_outcome, render_cloud, ClutterScene, ExcavationOutcome,
};

fn par_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        pool.install(|| (0..n).into_par_iter().map(&f).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        (0..n).map(f).collect()
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

/// `<path>.meta` next to an output file.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn write_meta(path: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    let meta = meta_path(path);
    let mut w = create(&meta)?;
    writeln!(w, "command = {command}").map_err(|e| Error::io(&meta, e))?;
    writeln!(w, "config_hash = {}", cfg.hash()).map_err(|e| Error::io(&meta, e))?;
    writeln!(w, "seed = {}", cfg.seed).map_err(|e| Error::io(&meta, e))?;
    writeln!(w, "version = {}", env!("CARGO_PKG_VERSION")).map_err(|e| Error::io(&meta, e))?;
    w.flush().map_err(|e| Error::io(&meta, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Renders the scene and derives the planner's height map and voxel grid.
pub fn observe(scene: &ClutterScene, cfg: &RunConfig) -> Result<(HeightMap, VoxelGrid)> {
    let cloud = render_cloud(scene, cfg.raster_spacing)?;
    let hm = build_height_map(&cloud, &cfg.height_map_spec())?;
    let grid = voxelize(&cloud, &cfg.grid_spec())?;
    Ok((hm, grid))
}

fn execute_and_dump(
    scene: &mut ClutterScene,
    t: &TaskTrajectory,
    hm: &HeightMap,
    cfg: &RunConfig,
) -> ExcavationOutcome {
    let o = execute_excavation(scene, t, &cfg.excavator, hm, &cfg.sim);
    dump_and_settle(scene, &o);
    o
}

// ---------------------------------------------------------------- collect

/// Runs the heuristic collection protocol: one scene per episode, trials
/// executed sequentially, each with a coin flip between the two heuristics.
pub fn collect(cfg: &RunConfig, episodes: usize, trials: usize) -> Result<Vec<ExcavationSample>> {
    cfg.check()?;
    if trials > u16::MAX as usize + 1 || episodes > u32::MAX as usize {
        return Err(Error::Config(
            "episode or trial count exceeds the dataset format".into(),
        ));
    }
    let scene_cfg = cfg.scene_config(false);
    let per_episode = par_map(episodes, cfg.worker_count(), |e| {
        let mut rng = stream(cfg.seed, Purpose::Collect, e as u64);
        let mut scene = gen_scene(&scene_cfg, &mut rng);
        let mut out = Vec::with_capacity(trials);
        for trial in 0..trials {
            let (hm, voxels) = observe(&scene, cfg)?;
            let t = if rng.random_bool(0.5) {
                plan_random_heu(&hm, &cfg.heuristic, &cfg.tray, &mut rng)
            } else {
                plan_highest_heu(&hm, &cfg.heuristic, &cfg.tray, &mut rng)
            };
            let o = execute_and_dump(&mut scene, &t, &hm, cfg);
            out.push(ExcavationSample {
                episode_id: e as u32,
                trial_index: trial as u16,
                voxels,
                traj: t,
                volume: o.captured_volume,
                valid: o.valid,
                label: label_outcome(&o),
            });
        }
        Ok(out)
    })?;
    Ok(per_episode.into_iter().flatten().collect())
}

pub fn cmd_collect(cfg: &RunConfig, episodes: usize, trials: usize, out: &Path) -> Result<DatasetSummary> {
    let samples = collect(cfg, episodes, trials)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_dataset(out, &samples)?;
    write_meta(out, cfg, "collect")?;
    Ok(verify_samples(&samples))
}

pub fn cmd_verify_dataset(cfg: &RunConfig, path: &Path) -> Result<DatasetSummary> {
    let samples = load_dataset(path, &cfg.grid_spec(), false)?;
    let s = verify_samples(&samples);
    if let Some(&i) = s.inconsistent.first() {
        return Err(Error::Data(format!(
            "{} of {} labels disagree with the labelling rule, first at record {i}",
            s.inconsistent.len(),
            s.records
        )));
    }
    Ok(s)
}

// ------------------------------------------------------------------ train

/// Seeded 90/10 style split: `(train, validation)` index lists.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Purpose::Split, 0));
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n);
    let train = idx.split_off(n_val);
    (train, idx)
}

fn examples(cfg: &RunConfig, samples: &[ExcavationSample], variant: Variant, head: Head) -> Result<Vec<Example>> {
    let spec = cfg.network_spec(variant, head);
    samples.iter().map(|s| Example::from_sample(&spec, s)).collect()
}

/// Loads the dataset, splits it and trains. `traj` models never read the
/// voxel payload.
pub fn train_from_dataset(
    cfg: &RunConfig,
    dataset: &Path,
    variant: Variant,
    head: Head,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.check()?;
    let samples = load_dataset(dataset, &cfg.grid_spec(), variant == Variant::VoxelNet)?;
    let all = examples(cfg, &samples, variant, head)?;
    drop(samples);
    let (tr, va) = split_indices(all.len(), cfg.val_fraction, cfg.seed);
    let mut slots: Vec<Option<Example>> = all.into_iter().map(Some).collect();
    let train_set: Vec<Example> = tr.iter().map(|&i| slots[i].take().unwrap()).collect();
    let val_set: Vec<Example> = va.iter().map(|&i| slots[i].take().unwrap()).collect();
    let train_cfg = crate::learning::TrainConfig {
        seed: cfg.seed,
        ..cfg.train
    };
    train(
        &train_set,
        &val_set,
        &cfg.network_spec(variant, head),
        &train_cfg,
        on_epoch,
    )
}

/// Curve CSV path for a model file: `model.bin` → `model.curve.csv`.
pub fn curve_path(model: &Path) -> PathBuf {
    model.with_extension("curve.csv")
}

pub fn cmd_train(
    cfg: &RunConfig,
    dataset: &Path,
    variant: Variant,
    head: Head,
    out: &Path,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let outcome = train_from_dataset(cfg, dataset, variant, head, on_epoch)?;
    create(out)?;
    save_model(out, &outcome.model)?;
    write_meta(out, cfg, "train")?;
    let curve = curve_path(out);
    write_curve_csv(create(&curve)?, &outcome.curve)?;
    write_meta(&curve, cfg, "train")?;
    Ok(outcome)
}

// ------------------------------------------------------------------- eval

pub const METRICS_HEADER: [&str; 6] = ["accuracy", "precision", "recall", "f1", "l1_mean", "l1_std"];

pub fn write_metrics_csv(w: impl Write, m: &Metrics) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    out.write_record([
        m.accuracy.to_string(),
        m.precision.to_string(),
        m.recall.to_string(),
        m.f1.to_string(),
        opt(m.l1_mean),
        opt(m.l1_std),
    ])?;
    out.flush().map_err(|e| Error::io("<metrics>", e))
}

pub fn read_metrics_csv(r: impl std::io::Read) -> Result<Metrics> {
    let mut rd = csv::Reader::from_reader(r);
    let rec = rd
        .records()
        .next()
        .ok_or_else(|| Error::Data("metrics CSV has no data row".into()))??;
    let num = |i: usize| -> Result<f64> {
        rec.get(i)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("bad metrics column {}", METRICS_HEADER[i])))
    };
    let opt = |i: usize| -> Result<Option<f64>> {
        match rec.get(i) {
            Some("") | None => Ok(None),
            Some(_) => num(i).map(Some),
        }
    };
    Ok(Metrics {
        accuracy: num(0)?,
        precision: num(1)?,
        recall: num(2)?,
        f1: num(3)?,
        l1_mean: opt(4)?,
        l1_std: opt(5)?,
    })
}

pub fn evaluate_on_dataset(cfg: &RunConfig, model: &Model, dataset: &Path) -> Result<Metrics> {
    let spec = model.spec().clone();
    let samples = load_dataset(dataset, &cfg.grid_spec(), spec.variant == Variant::VoxelNet)?;
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let data = examples(cfg, &samples, spec.variant, spec.head)?;
    match spec.head {
        Head::Classifier => evaluate_classifier(model, &data, cfg.eval_threshold),
        Head::Regressor => evaluate_regressor(model, &data, crate::simulator::SUCCESS_THRESHOLD_CM3),
    }
}

pub fn cmd_eval(cfg: &RunConfig, model: &Path, dataset: &Path, out: &Path) -> Result<Metrics> {
    let m = evaluate_on_dataset(cfg, &load_model(model)?, dataset)?;
    write_metrics_csv(create(out)?, &m)?;
    write_meta(out, cfg, "eval")?;
    Ok(m)
}

// ------------------------------------------------------------------ bench

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub planner: String,
    pub episode: u32,
    pub trial: u32,
    pub x: f64,
    pub y: f64,
    pub alpha: f64,
    pub d: f64,
    pub l: f64,
    pub beta: f64,
    pub score: f64,
    /// cm³
    pub volume: f64,
    pub count: usize,
    pub valid: bool,
    pub success: bool,
}

pub const TRIAL_HEADER: [&str; 14] = [
    "planner", "episode", "trial", "x", "y", "alpha", "d", "l", "beta", "score", "volume", "count", "valid", "success",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub planner: String,
    pub episode: u32,
    pub trial: u32,
    pub plan_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerSummary {
    pub planner: String,
    pub trials: usize,
    pub volume_mean: f64,
    pub volume_std: f64,
    pub count_mean: f64,
    pub count_std: f64,
    pub success_rate: f64,
    pub valid_rate: f64,
    pub time_mean: f64,
    pub time_std: f64,
}

pub const SUMMARY_HEADER: [&str; 10] = [
    "planner",
    "trials",
    "volume_mean",
    "volume_std",
    "count_mean",
    "count_std",
    "success_rate",
    "valid_rate",
    "time_mean",
    "time_std",
];

/// Mean and population standard deviation; zeros for an empty slice.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn rate(flags: impl Iterator<Item = bool>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for f in flags {
        hit += f as usize;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Per-planner summary in first-appearance order. Timings are matched by
/// planner name; planners without timings report zero time.
pub fn summarize(rows: &[TrialRow], timings: &[TimingRow]) -> Vec<PlannerSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.planner.as_str()) {
            names.push(&r.planner);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let mine: Vec<&TrialRow> = rows.iter().filter(|r| r.planner == name).collect();
            let vols: Vec<f64> = mine.iter().map(|r| r.volume).collect();
            let counts: Vec<f64> = mine.iter().map(|r| r.count as f64).collect();
            let times: Vec<f64> = timings
                .iter()
                .filter(|t| t.planner == name)
                .map(|t| t.plan_seconds)
                .collect();
            let (volume_mean, volume_std) = mean_std(&vols);
            let (count_mean, count_std) = mean_std(&counts);
            let (time_mean, time_std) = mean_std(&times);
            PlannerSummary {
                planner: name.to_string(),
                trials: mine.len(),
                volume_mean,
                volume_std,
                count_mean,
                count_std,
                success_rate: rate(mine.iter().map(|r| r.success)),
                valid_rate: rate(mine.iter().map(|r| r.valid)),
                time_mean,
                time_std,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    /// Planner-major, then episode, then trial.
    pub rows: Vec<TrialRow>,
    pub timings: Vec<TimingRow>,
    pub summary: Vec<PlannerSummary>,
}

/// Plans, falling back to the best-scoring candidate when the planner
/// exhausts its valid draws; execution then records an invalid trial.
fn plan_or_best(
    kind: PlannerKind,
    voxels: &VoxelGrid,
    hm: &HeightMap,
    cfg: &RunConfig,
    predictors: &Predictors,
    mode: CemMode,
    rng: &mut impl Rng,
) -> Result<(TaskTrajectory, f64)> {
    match plan(kind, voxels, &cfg.plan_context(hm), predictors, &cfg.cem, mode, rng) {
        Ok(PlanResult { traj, score, .. }) => Ok((traj, score)),
        Err(Error::PlannerFailure { best, best_score }) => Ok((best, best_score)),
        Err(e) => Err(e),
    }
}

/// Every planner runs on identical scene streams: episode `e` uses the
/// same generated scene and the same planning stream per trial. `mode`
/// applies to the CEM planners only.
pub fn bench(
    cfg: &RunConfig,
    planners: &[PlannerKind],
    episodes: usize,
    trials: usize,
    predictors: &Predictors,
    mode: CemMode,
) -> Result<BenchReport> {
    cfg.check()?;
    for k in planners {
        let m = match k.needs_model() {
            Some(Variant::VoxelNet) => predictors.voxel,
            Some(Variant::TrajNet) => predictors.traj,
            None => continue,
        };
        if m.is_none() {
            return Err(Error::Config(format!("{} needs a trained model", k.name())));
        }
    }
    let scene_cfg = cfg.scene_config(true);
    let per_episode = par_map(episodes, cfg.worker_count(), |e| {
        let initial = gen_scene(&scene_cfg, &mut stream(cfg.seed, Purpose::Bench, e as u64));
        let mut out = Vec::new();
        for &kind in planners {
            let mut scene = initial.clone();
            for trial in 0..trials {
                let (hm, voxels) = observe(&scene, cfg)?;
                let mut rng = stream2(cfg.seed, Purpose::Bench, e as u64, trial as u64);
                let start = Instant::now();
                let (t, score) = plan_or_best(kind, &voxels, &hm, cfg, predictors, mode, &mut rng)?;
                let secs = start.elapsed().as_secs_f64();
                let o = execute_and_dump(&mut scene, &t, &hm, cfg);
                let row = trial_row(kind.name(), e, trial, &t, score, &o);
                let timing = TimingRow {
                    planner: kind.name().to_string(),
                    episode: e as u32,
                    trial: trial as u32,
                    plan_seconds: secs,
                };
                out.push((row, timing));
            }
        }
        Ok(out)
    })?;
    let mut pairs: Vec<(TrialRow, TimingRow)> = per_episode.into_iter().flatten().collect();
    let order = |name: &str| planners.iter().position(|k| k.name() == name).unwrap_or(usize::MAX);
    pairs.sort_by_key(|(r, _)| (order(&r.planner), r.episode, r.trial));
    let (rows, timings): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let summary = summarize(&rows, &timings);
    Ok(BenchReport { rows, timings, summary })
}

fn trial_row(
    planner: &str,
    episode: usize,
    trial: usize,
    t: &TaskTrajectory,
    score: f64,
    o: &ExcavationOutcome,
) -> TrialRow {
    TrialRow {
        planner: planner.to_string(),
        episode: episode as u32,
        trial: trial as u32,
        x: t.x,
        y: t.y,
        alpha: t.alpha,
        d: t.d,
        l: t.l,
        beta: t.beta,
        score,
        volume: o.captured_volume,
        count: o.captured_count,
        valid: o.valid,
        success: label_outcome(o),
    }
}

/// Output files of `bench` inside `dir`.
pub struct BenchFiles {
    pub trials: PathBuf,
    pub timings: PathBuf,
    pub summary: PathBuf,
}

impl BenchFiles {
    pub fn in_dir(dir: &Path) -> Self {
        BenchFiles {
            trials: dir.join("bench_trials.csv"),
            timings: dir.join("bench_timings.csv"),
            summary: dir.join("bench_summary.csv"),
        }
    }
}

pub fn write_bench(cfg: &RunConfig, report: &BenchReport, dir: &Path) -> Result<BenchFiles> {
    let files = BenchFiles::in_dir(dir);
    write_csv(&files.trials, &report.rows, &TRIAL_HEADER)?;
    write_csv(
        &files.timings,
        &report.timings,
        &["planner", "episode", "trial", "plan_seconds"],
    )?;
    write_csv(&files.summary, &report.summary, &SUMMARY_HEADER)?;
    for p in [&files.trials, &files.timings, &files.summary] {
        write_meta(p, cfg, "bench")?;
    }
    Ok(files)
}

pub fn read_trial_rows(path: &Path) -> Result<Vec<TrialRow>> {
    read_csv(path)
}

pub fn read_timing_rows(path: &Path) -> Result<Vec<TimingRow>> {
    read_csv(path)
}

/// Loads the models a planner list needs.
pub fn load_predictors(
    planners: &[PlannerKind],
    voxel_model: Option<&Path>,
    traj_model: Option<&Path>,
) -> Result<(Option<Model>, Option<Model>)> {
    let need = |v: Variant| planners.iter().any(|k| k.needs_model() == Some(v));
    let load = |p: Option<&Path>, v: Variant, flag: &str| -> Result<Option<Model>> {
        if !need(v) {
            return Ok(None);
        }
        let p = p.ok_or_else(|| Error::Config(format!("{flag} is required for the selected planners")))?;
        let m = load_model(p)?;
        if m.spec().variant != v {
            return Err(Error::Config(format!(
                "{} holds a {:?} model",
                p.display(),
                m.spec().variant
            )));
        }
        Ok(Some(m))
    };
    Ok((
        load(voxel_model, Variant::VoxelNet, "--model")?,
        load(traj_model, Variant::TrajNet, "--traj-model")?,
    ))
}

// ----------------------------------------------------------------- ablate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub trial: u32,
    pub x: f64,
    pub y: f64,
    pub alpha: f64,
    pub d: f64,
    pub l: f64,
    pub beta: f64,
    pub score: f64,
    pub volume: f64,
    pub count: usize,
    pub valid: bool,
    pub success: bool,
}

pub const ABLATION_HEADER: [&str; 13] = [
    "mode", "trial", "x", "y", "alpha", "d", "l", "beta", "score", "volume", "count", "valid", "success",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignTest {
    /// Pairs where the first arm captured more.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided P(X ≥ wins) for X ~ Binomial(wins + losses, 1/2).
    pub p_value: f64,
}

/// Paired sign test of `a > b`, ties dropped.
pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    let mut s = SignTest {
        wins: 0,
        losses: 0,
        ties: 0,
        p_value: 1.0,
    };
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => s.wins += 1,
            Some(std::cmp::Ordering::Less) => s.losses += 1,
            _ => s.ties += 1,
        }
    }
    let n = (s.wins + s.losses) as u64;
    if n > 0 {
        let b = Binomial::new(0.5, n).expect("valid binomial");
        s.p_value = if s.wins == 0 { 1.0 } else { b.sf(s.wins as u64 - 1) };
    }
    s
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    /// Trial-major, then modes in `CemMode::ALL` order.
    pub rows: Vec<AblationRow>,
    /// Keyed by mode name, same layout as the benchmark summary.
    pub summary: Vec<PlannerSummary>,
    /// full vs random-poa.
    pub full_vs_random_poa: SignTest,
}

/// Each trial draws a fresh benchmark scene, runs the CEM iterations once
/// and finalizes the shared distribution in every mode with the same stream,
/// so the three arms differ only in the parameters they replace.
pub fn ablate(cfg: &RunConfig, model: &Model, n_trials: usize) -> Result<AblationReport> {
    cfg.check()?;
    if model.spec().variant != Variant::VoxelNet {
        return Err(Error::Config("ablation needs a voxel model".into()));
    }
    let scene_cfg = cfg.scene_config(true);
    let per_trial = par_map(n_trials, cfg.worker_count(), |k| {
        let scene = gen_scene(&scene_cfg, &mut stream(cfg.seed, Purpose::Ablate, k as u64));
        let (hm, voxels) = observe(&scene, cfg)?;
        let ctx = cfg.plan_context(&hm);
        let enc = SceneEncoding::new(model, Some(&voxels))?;
        let state = cem_optimize(
            &enc,
            &ctx,
            &cfg.cem,
            &mut stream2(cfg.seed, Purpose::Ablate, k as u64, 0),
        )?;
        let mut rows = Vec::new();
        for mode in CemMode::ALL {
            let mut rng = stream2(cfg.seed, Purpose::Ablate, k as u64, 1);
            let (t, score) = match cem_finalize(&state, &enc, &ctx, &cfg.cem, mode, &mut rng) {
                Ok(r) => (r.traj, r.score),
                Err(Error::PlannerFailure { best, best_score }) => (best, best_score),
                Err(e) => return Err(e),
            };
            let mut s = scene.clone();
            let o = execute_and_dump(&mut s, &t, &hm, cfg);
            let r = trial_row(mode.name(), 0, k, &t, score, &o);
            rows.push(AblationRow {
                mode: r.planner,
                trial: r.trial,
                x: r.x,
                y: r.y,
                alpha: r.alpha,
                d: r.d,
                l: r.l,
                beta: r.beta,
                score: r.score,
                volume: r.volume,
                count: r.count,
                valid: r.valid,
                success: r.success,
            });
        }
        Ok(rows)
    })?;
    let rows: Vec<AblationRow> = per_trial.into_iter().flatten().collect();
    let as_trials: Vec<TrialRow> = rows
        .iter()
        .map(|r| TrialRow {
            planner: r.mode.clone(),
            episode: 0,
            trial: r.trial,
            x: r.x,
            y: r.y,
            alpha: r.alpha,
            d: r.d,
            l: r.l,
            beta: r.beta,
            score: r.score,
            volume: r.volume,
            count: r.count,
            valid: r.valid,
            success: r.success,
        })
        .collect();
    let vols = |m: CemMode| -> Vec<f64> { rows.iter().filter(|r| r.mode == m.name()).map(|r| r.volume).collect() };
    Ok(AblationReport {
        summary: summarize(&as_trials, &[]),
        full_vs_random_poa: sign_test(&vols(CemMode::Full), &vols(CemMode::RandomPoa)),
        rows,
    })
}

pub fn write_ablation(cfg: &RunConfig, report: &AblationReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let rows = dir.join("ablation_trials.csv");
    let summary = dir.join("ablation_summary.csv");
    write_csv(&rows, &report.rows, &ABLATION_HEADER)?;
    write_csv(&summary, &report.summary, &SUMMARY_HEADER)?;
    write_meta(&rows, cfg, "ablate")?;
    write_meta(&summary, cfg, "ablate")?;
    Ok((rows, summary))
}

// ------------------------------------------------------------------ stats

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub planner: String,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStatRow {
    pub planner: String,
    pub param: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoaRow {
    pub planner: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StatsReport {
    pub histogram: Vec<HistogramRow>,
    pub params: Vec<ParamStatRow>,
    pub poa: Vec<PoaRow>,
}

/// Volume histogram (bins `[k w, (k + 1) w)`, empty bins omitted), per
/// parameter mean and population std, and the PoA list, per planner.
pub fn stats(rows: &[TrialRow], bin_width: f64) -> Result<StatsReport> {
    if !(bin_width > 0.0) {
        return Err(Error::Config("histogram bin width must be positive".into()));
    }
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.planner.as_str()) {
            names.push(&r.planner);
        }
    }
    let mut report = StatsReport::default();
    for name in names {
        let mine: Vec<&TrialRow> = rows.iter().filter(|r| r.planner == name).collect();
        let mut bins: BTreeMap<i64, usize> = BTreeMap::new();
        for r in &mine {
            *bins.entry((r.volume / bin_width).floor() as i64).or_default() += 1;
        }
        for (k, count) in bins {
            report.histogram.push(HistogramRow {
                planner: name.to_string(),
                bin_lo: k as f64 * bin_width,
                bin_hi: (k + 1) as f64 * bin_width,
                count,
            });
        }
        for (i, p) in TaskTrajectory::NAMES.iter().enumerate() {
            let vals: Vec<f64> = mine.iter().map(|r| [r.x, r.y, r.alpha, r.d, r.l, r.beta][i]).collect();
            let (mean, std) = mean_std(&vals);
            report.params.push(ParamStatRow {
                planner: name.to_string(),
                param: p.to_string(),
                mean,
                std,
            });
        }
        report.poa.extend(mine.iter().map(|r| PoaRow {
            planner: name.to_string(),
            x: r.x,
            y: r.y,
        }));
    }
    Ok(report)
}

pub struct StatsFiles {
    pub histogram: PathBuf,
    pub params: PathBuf,
    pub poa: PathBuf,
}

pub fn cmd_stats(cfg: &RunConfig, trials_csv: &Path, dir: &Path) -> Result<StatsFiles> {
    let report = stats(&read_trial_rows(trials_csv)?, cfg.hist_bin_width)?;
    let files = StatsFiles {
        histogram: dir.join("volume_histogram.csv"),
        params: dir.join("trajectory_stats.csv"),
        poa: dir.join("poa.csv"),
    };
    write_csv(
        &files.histogram,
        &report.histogram,
        &["planner", "bin_lo", "bin_hi", "count"],
    )?;
    write_csv(&files.params, &report.params, &["planner", "param", "mean", "std"])?;
    write_csv(&files.poa, &report.poa, &["planner", "x", "y"])?;
    for p in [&files.histogram, &files.params, &files.poa] {
        write_meta(p, cfg, "stats")?;
    }
    Ok(files)
}

// -------------------------------------------------------------- gradcheck

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Gradient check over `n_specs` random tiny networks. Fails with a numeric
/// error above the tolerance.
pub fn cmd_gradcheck(seed: u64, n_specs: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for (i, spec) in tiny_specs(seed, n_specs).iter().enumerate() {
        worst = worst.max(gradient_check(spec, 1, seed.wrapping_add(i as u64))?);
    }
    if worst < GRADCHECK_TOLERANCE {
        Ok(worst)
    } else {
        Err(Error::Numeric(format!(
            "gradient check relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
        )))
    }
}
