//! End-to-end acceptance checks. Runs as a plain binary (`harness = false`)
//! so the criteria execute one after another with honest timings and every
//! verdict is printed, whatever the outcome.

use std::path::Path;
use std::time::{Duration, Instant};

use excavation::commands::{
    ablate, bench, cmd_collect, cmd_gradcheck, cmd_train, observe, write_bench, PlannerSummary, GRADCHECK_TOLERANCE,
};
use excavation::config::RunConfig;
use excavation::geometry::{transform_cloud, voxelize, CuboidRegion, Frame, GridSpec, HeightMap, HeightMapSpec};
use excavation::geometry::{PointCloud, RigidTransform};
use excavation::kinematics::{fk, ik, ExcavatorModel, JointConfig, TaskTrajectory};
use excavation::learning::{classifier_metrics, load_model, tiny_specs, Head, Mode, Model, Variant};
use excavation::planner::{
    cem_optimize, plan, plan_random_heu, CemConfig, CemMode, FnScorer, HeuristicRanges, PlanContext, PlannerKind,
    Predictors,
};
use excavation::rng::{stream, stream2, Purpose};
use excavation::simulator::{dump_and_settle, execute_excavation, gen_scene};
use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

struct Report {
    failures: usize,
}

impl Report {
    fn run(&mut self, id: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Verdict) {
        let t0 = Instant::now();
        let mut verdict = f();
        let took = t0.elapsed();
        if let (Ok(msg), Some(limit)) = (&verdict, limit) {
            if took > limit {
                verdict = Err(format!("{msg}; took {took:.1?}, limit {limit:?}"));
            }
        }
        match verdict {
            Ok(msg) => println!("PASS  {id:>2} {name}: {msg} [{took:.1?}]"),
            Err(msg) => {
                self.failures += 1;
                println!("FAIL  {id:>2} {name}: {msg} [{took:.1?}]");
            }
        }
    }
}

fn check(ok: bool, msg: String) -> Verdict {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn mins(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

// ---------------------------------------------------------------- 1 to 6

fn gradients() -> Verdict {
    let specs = tiny_specs(0, 10);
    let variants: Vec<Variant> = specs.iter().map(|s| s.variant).collect();
    if !variants.contains(&Variant::VoxelNet) || !variants.contains(&Variant::TrajNet) {
        return Err("tiny specs do not cover both variants".into());
    }
    for s in &specs {
        let n = Model::<f64>::init(s, 0).map_err(|e| e.to_string())?.param_count();
        if n > 5000 {
            return Err(format!("tiny spec with {n} parameters"));
        }
    }
    match cmd_gradcheck(0, 10) {
        Ok(worst) => check(
            worst < GRADCHECK_TOLERANCE,
            format!("max relative error {worst:.2e} over 10 specs"),
        ),
        Err(e) => Err(e.to_string()),
    }
}

fn elbow_up_config(m: &ExcavatorModel, rng: &mut ChaCha8Rng) -> JointConfig {
    loop {
        let mut q = [0.0; 4];
        for (v, (lo, hi)) in q.iter_mut().zip(&m.joint_limits) {
            *v = rng.random_range(*lo..*hi);
        }
        q[0] = rng.random_range(-3.1..3.1);
        let q = JointConfig {
            q1: q[0],
            q2: q[1],
            q3: q[2],
            q4: q[3],
        };
        let wrist = m.boom_length * q.q2.cos() + m.stick_length * (q.q2 + q.q3).cos();
        let reach = wrist + m.bucket_length * (q.q2 + q.q3 + q.q4).cos();
        if wrist > 0.05 && reach > 0.05 && q.q3 < -1e-3 {
            return q;
        }
    }
}

fn kinematics_round_trip() -> Verdict {
    let m = ExcavatorModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut worst_pos, mut worst_angle) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let q = elbow_up_config(&m, &mut rng);
        let p = fk(&m, &q);
        let back = ik(&m, &p).map_err(|e| format!("ik failed for {q:?}: {e}"))?;
        let p2 = fk(&m, &back);
        worst_pos = worst_pos.max(((p.x - p2.x).powi(2) + (p.y - p2.y).powi(2) + (p.z - p2.z).powi(2)).sqrt());
        worst_angle = worst_angle.max((p.alpha - (q.q2 + q.q3 + q.q4)).abs());
        worst_angle = worst_angle.max((p2.alpha - (back.q2 + back.q3 + back.q4)).abs());
    }
    check(
        worst_pos < 1e-9 && worst_angle < 1e-9,
        format!("1000 configs, max position error {worst_pos:.1e} m, max angle error {worst_angle:.1e} rad"),
    )
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.random_range(-3.0..3.0)).into_inner()
}

fn extrinsics_invariance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = GridSpec::default();
    let cam = PointCloud::new(
        (0..5000)
            .map(|_| {
                Point3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.15..0.15),
                )
            })
            .collect(),
        Frame::Camera,
    );
    let tray_from_cam = RigidTransform::new(random_rotation(&mut rng), Vector3::new(0.02, -0.03, 0.01)).unwrap();
    let direct = voxelize(&transform_cloud(&cam, &tray_from_cam, Frame::Tray).unwrap(), &spec).unwrap();
    if direct.occupied_count() < 1000 {
        return Err(format!(
            "only {} occupied cells in the reference grid",
            direct.occupied_count()
        ));
    }
    for k in 0..100 {
        let shift = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let e = RigidTransform::new(random_rotation(&mut rng), shift).unwrap();
        let moved = transform_cloud(&cam, &e.inverse(), Frame::Camera).unwrap();
        let via = voxelize(
            &transform_cloud(&moved, &tray_from_cam.compose(&e), Frame::Tray).unwrap(),
            &spec,
        )
        .unwrap();
        if via != direct {
            return Err(format!("transform {k} changed the grid"));
        }
    }
    Ok(format!(
        "100 transforms, {} occupied cells each",
        direct.occupied_count()
    ))
}

fn conservation() -> Verdict {
    let cfg = RunConfig::default();
    let mut scene = gen_scene(&cfg.scene_config(true), &mut stream(0, Purpose::Misc, 4));
    let initial = scene.in_tray_volume();
    let mut captured = 0;
    for trial in 0..50 {
        let (hm, _) = observe(&scene, &cfg).map_err(|e| e.to_string())?;
        let t = plan_random_heu(&hm, &cfg.heuristic, &cfg.tray, &mut stream2(0, Purpose::Misc, 4, trial));
        let o = execute_excavation(&mut scene, &t, &cfg.excavator, &hm, &cfg.sim);
        captured += o.captured_count;
        dump_and_settle(&mut scene, &o);
        let total = scene.in_tray_volume() + scene.dumped_volume;
        if total != initial || scene.pending_volume != 0.0 {
            return Err(format!(
                "trial {trial}: {total} cm³ accounted for, {initial} cm³ initially"
            ));
        }
    }
    check(
        captured > 0,
        format!("{initial:.2} cm³ conserved over 50 trials, {captured} objects dumped"),
    )
}

fn table_three_metrics() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut labels = vec![false; 10_000];
    labels[..967].fill(true);
    labels.shuffle(&mut rng);
    let predict = |p: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..labels.len())
            .map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 })
            .collect()
    };
    let half = classifier_metrics(&predict(0.5, &mut rng), &labels, 0.5);
    let tenth = classifier_metrics(&predict(0.1, &mut rng), &labels, 0.5);
    let within = |v: f64, target: f64, tol: f64| (v - target).abs() <= tol;
    check(
        within(half.accuracy, 0.50, 0.02)
            && within(half.precision, 0.097, 0.02)
            && within(half.recall, 0.50, 0.03)
            && within(half.f1, 0.162, 0.03)
            && within(tenth.accuracy, 0.82, 0.02),
        format!(
            "random-0.5 acc {:.3} prec {:.3} rec {:.3} f1 {:.3}; random-0.1 acc {:.3}",
            half.accuracy, half.precision, half.recall, half.f1, tenth.accuracy
        ),
    )
}

fn cem_bump() -> Verdict {
    let tray = CuboidRegion::default();
    let hm = HeightMap::flat(HeightMapSpec::covering(&tray, 0.01, -0.15), 0.0);
    let km = ExcavatorModel::default();
    let h = HeuristicRanges::default();
    let ctx = PlanContext {
        hm: &hm,
        excavator: &km,
        tray: &tray,
        attack_margin: 0.02,
        heuristic: &h,
    };
    let ranges = ctx.ranges();
    let mut worst = 0.0f64;
    let mut hits = 0;
    let mut monotone = true;
    for seed in 0..20 {
        let mut rng = stream(seed, Purpose::Misc, 0);
        let target: [f64; 6] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
        let scorer = FnScorer(move |t: &TaskTrajectory| {
            let n = ranges.normalize(t);
            (-(0..6).map(|i| (n[i] - target[i]).powi(2)).sum::<f64>() / 0.5).exp()
        });
        let state = cem_optimize(&scorer, &ctx, &CemConfig::default(), &mut rng).map_err(|e| e.to_string())?;
        let err = (0..6)
            .map(|i| (state.distribution.mean[i] - target[i]).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
        hits += (err < 0.05) as usize;
        monotone &= state
            .per_iteration
            .windows(2)
            .all(|w| w[1].best_so_far >= w[0].best_so_far);
    }
    check(
        hits == 20 && monotone,
        format!("{hits}/20 seeds within 0.05 (worst {worst:.4}), best-so-far monotone: {monotone}"),
    )
}

// ---------------------------------------------------------------- 7 to 11

fn acceptance_config() -> RunConfig {
    let mut cfg = RunConfig {
        seed: 0,
        ..RunConfig::default()
    };
    cfg.train.lr = 1e-3;
    cfg.train.lr_decay_every = 0;
    cfg.train.epochs = 10;
    cfg
}

const BENCH_PLANNERS: [PlannerKind; 3] = [PlannerKind::CemVoxel, PlannerKind::RandomHeu, PlannerKind::HighestHeu];

struct PipelineRun {
    collect: Duration,
    train: Duration,
    bench: Duration,
    positive_fractions: Vec<f64>,
    summary: Vec<PlannerSummary>,
    dataset: Vec<u8>,
    model: Vec<u8>,
    trials_csv: Vec<u8>,
}

fn pipeline(cfg: &RunConfig, dir: &Path) -> Result<PipelineRun, String> {
    let e = |e: excavation::Error| e.to_string();
    let data = dir.join("dataset.bin");
    let model_path = dir.join("voxel_classifier.model");

    let t0 = Instant::now();
    let s = cmd_collect(cfg, cfg.collect_episodes, cfg.collect_trials, &data).map_err(e)?;
    if s.records != 5000 {
        return Err(format!("collected {} samples", s.records));
    }
    let collect = t0.elapsed();

    let t0 = Instant::now();
    let outcome = cmd_train(cfg, &data, Variant::VoxelNet, Head::Classifier, &model_path, |_| {}).map_err(e)?;
    let train = t0.elapsed();
    let positive_fractions = outcome.curve.iter().map(|r| r.positive_fraction).collect();

    let t0 = Instant::now();
    let model = load_model(&model_path).map_err(e)?;
    let predictors = Predictors {
        voxel: Some(&model),
        traj: None,
    };
    let report = bench(
        cfg,
        &BENCH_PLANNERS,
        cfg.bench_episodes,
        cfg.bench_trials,
        &predictors,
        CemMode::Full,
    )
    .map_err(e)?;
    let files = write_bench(cfg, &report, dir).map_err(e)?;
    let bench = t0.elapsed();

    let read = |p: &Path| std::fs::read(p).map_err(|err| format!("{}: {err}", p.display()));
    Ok(PipelineRun {
        collect,
        train,
        bench,
        positive_fractions,
        summary: report.summary,
        dataset: read(&data)?,
        model: read(&model_path)?,
        trials_csv: read(&files.trials)?,
    })
}

fn summary_of<'a>(rows: &'a [PlannerSummary], name: &str) -> Result<&'a PlannerSummary, String> {
    rows.iter()
        .find(|s| s.planner == name)
        .ok_or_else(|| format!("no summary for {name}"))
}

fn ordering(run: &PipelineRun) -> Verdict {
    let cem = summary_of(&run.summary, "cem-voxel")?;
    let rnd = summary_of(&run.summary, "random-heu")?;
    let high = summary_of(&run.summary, "highest-heu")?;
    let ratio = cem.volume_mean / rnd.volume_mean;
    let total = run.collect + run.train + run.bench;
    let mut msg = format!(
        "volume cem-voxel {:.1}, random-heu {:.1}, highest-heu {:.1} cm³ (ratio {ratio:.3}); \
         success {:.3} vs {:.3}; collect {:.0?}, train {:.0?}, bench {:.0?}",
        cem.volume_mean,
        rnd.volume_mean,
        high.volume_mean,
        cem.success_rate,
        rnd.success_rate,
        run.collect,
        run.train,
        run.bench
    );
    let mut ok = cem.volume_mean > rnd.volume_mean
        && cem.volume_mean > high.volume_mean
        && ratio >= 1.2
        && cem.success_rate > rnd.success_rate;
    if run.train > Duration::from_secs(30 * 60) {
        ok = false;
        msg.push_str("; training over 30 min");
    }
    if total > Duration::from_secs(60 * 60) {
        ok = false;
        msg.push_str("; pipeline over 1 h");
    }
    check(ok, msg)
}

fn oversampling(run: &PipelineRun) -> Verdict {
    let (lo, hi) = run
        .positive_fractions
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &f| {
            (lo.min(f), hi.max(f))
        });
    check(
        !run.positive_fractions.is_empty() && lo >= 0.45 && hi <= 0.55,
        format!(
            "{} epochs, positive fraction in [{lo:.4}, {hi:.4}]",
            run.positive_fractions.len()
        ),
    )
}

fn ablation(cfg: &RunConfig, dir: &Path) -> Verdict {
    let model = load_model(&dir.join("voxel_classifier.model")).map_err(|e| e.to_string())?;
    let r = ablate(cfg, &model, 200).map_err(|e| e.to_string())?;
    let full = summary_of(&r.summary, "full")?.volume_mean;
    let gtp = summary_of(&r.summary, "random-gtp")?.volume_mean;
    let poa = summary_of(&r.summary, "random-poa")?.volume_mean;
    let t = r.full_vs_random_poa;
    check(
        full >= gtp && gtp >= poa && t.p_value < 0.05,
        format!(
            "full {full:.1}, random-gtp {gtp:.1}, random-poa {poa:.1} cm³; sign test {} wins, {} losses, {} ties, p = {:.4}",
            t.wins, t.losses, t.ties, t.p_value
        ),
    )
}

fn latency() -> Verdict {
    let cfg = RunConfig::default();
    let mut model =
        Model::init(&cfg.network_spec(Variant::VoxelNet, Head::Classifier), 0).map_err(|e| e.to_string())?;
    model.set_mode(Mode::Eval);
    let scene = gen_scene(&cfg.scene_config(true), &mut stream(0, Purpose::Misc, 10));
    let (hm, grid) = observe(&scene, &cfg).map_err(|e| e.to_string())?;
    let ctx = cfg.plan_context(&hm);
    let predictors = Predictors {
        voxel: Some(&model),
        traj: None,
    };
    let c = &cfg.cem;
    let t0 = Instant::now();
    let r = plan(
        PlannerKind::CemVoxel,
        &grid,
        &ctx,
        &predictors,
        c,
        CemMode::Full,
        &mut stream(0, Purpose::Plan, 10),
    );
    let took = t0.elapsed();
    let r = r.map_err(|e| e.to_string())?;
    check(
        took < Duration::from_secs(5) && r.per_iteration.len() == c.n_iters,
        format!(
            "{} init + {} × {} samples + {} final scored in {took:.2?}",
            c.n_init, c.n_iters, c.n_samples, c.n_final
        ),
    )
}

fn determinism(first: &PipelineRun, cfg: &RunConfig) -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let again = pipeline(cfg, dir.path())?;
    let mut diffs = vec![];
    if again.dataset != first.dataset {
        diffs.push("dataset");
    }
    if again.model != first.model {
        diffs.push("model");
    }
    if again.trials_csv != first.trials_csv {
        diffs.push("benchmark CSV");
    }
    check(
        diffs.is_empty(),
        if diffs.is_empty() {
            format!(
                "dataset ({} B), model ({} B) and benchmark CSV ({} B) identical",
                first.dataset.len(),
                first.model.len(),
                first.trials_csv.len()
            )
        } else {
            format!("differs: {}", diffs.join(", "))
        },
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test --workspace -- <filter>` forwards the filter here; only
    // run when it is absent or names this target.
    let mut filter = None;
    let mut skipped = false;
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        match a.as_str() {
            "--skip" => skipped |= it.next().is_some_and(|s| "acceptance".contains(s.as_str())),
            "--test-threads" | "--format" | "--color" | "--logfile" | "-Z" => {
                it.next();
            }
            a if a.starts_with('-') => {}
            a => filter = Some(a.to_string()),
        }
    }
    if skipped || args.iter().any(|a| a == "--list") || filter.is_some_and(|f| !"acceptance".contains(&f)) {
        return;
    }

    let mut report = Report { failures: 0 };
    report.run(1, "gradient check", mins(2), gradients);
    report.run(2, "kinematics round trip", secs(5), kinematics_round_trip);
    report.run(3, "extrinsics invariance", secs(10), extrinsics_invariance);
    report.run(4, "volume conservation", mins(1), conservation);
    report.run(5, "analytic metric rows", secs(10), table_three_metrics);
    report.run(6, "CEM on a Gaussian bump", mins(1), cem_bump);

    let cfg = acceptance_config();
    let dir = tempfile::tempdir().expect("temp dir");
    println!("running the desk-scale pipeline (collect, train, bench); this takes a while");
    let run = pipeline(&cfg, dir.path());
    match &run {
        Ok(run) => {
            report.run(7, "desk-scale planner ordering", None, || ordering(run));
            report.run(8, "ablation ordering", mins(20), || ablation(&cfg, dir.path()));
            report.run(9, "oversampling invariant", None, || oversampling(run));
        }
        Err(e) => {
            for (id, name) in [
                (7, "desk-scale planner ordering"),
                (8, "ablation ordering"),
                (9, "oversampling invariant"),
            ] {
                report.run(id, name, None, || Err(format!("pipeline failed: {e}")));
            }
        }
    }
    report.run(10, "planning latency", None, latency);
    match &run {
        Ok(run) => report.run(11, "determinism", None, || determinism(run, &cfg)),
        Err(e) => report.run(11, "determinism", None, || Err(format!("pipeline failed: {e}"))),
    }

    println!("{} of 11 criteria passed", 11 - report.failures);
    if report.failures > 0 {
        std::process::exit(1);
    }
}
