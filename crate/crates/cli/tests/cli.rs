use std::process::Command;

fn excavate(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_excavate"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "no.such.key = 1\n").unwrap();
    let (code, _, err) = excavate(&["collect", "--config", bad.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("unknown key"));

    let missing = dir.path().join("missing.bin");
    let (code, _, _) = excavate(&["verify-dataset", "--data", missing.to_str().unwrap()]);
    assert_eq!(code, 3);

    let (code, _, _) = excavate(&["bench", "--planner", "cem-voxel", "--episodes", "1", "--trials", "1"]);
    assert_eq!(code, 2);
    let (code, _, _) = excavate(&["bench", "--planner", "nope"]);
    assert_eq!(code, 2);
}

#[test]
fn collect_verify_bench_stats_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# small scenes\nscene.collect_objects_max = 100\nscene.bench_objects_min = 80\nscene.bench_objects_max = 120\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let data = dir.path().join("d.bin");
    let (code, out, err) = excavate(&[
        "collect",
        "--config",
        cfg,
        "--seed",
        "3",
        "--episodes",
        "2",
        "--trials",
        "3",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("wrote 6 records"));
    let meta = std::fs::read_to_string(dir.path().join("d.bin.meta")).unwrap();
    assert!(meta.contains("config_hash = ") && meta.contains("seed = 3"));

    let (code, out, _) = excavate(&["verify-dataset", "--config", cfg, "--data", data.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.contains("6 records"));

    let bench_dir = dir.path().join("bench");
    let (code, out, err) = excavate(&[
        "bench",
        "--config",
        cfg,
        "--planner",
        "random-heu,highest-heu",
        "--episodes",
        "1",
        "--trials",
        "2",
        "--out",
        bench_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("random-heu") && out.contains("highest-heu"));
    let trials = bench_dir.join("bench_trials.csv");
    assert_eq!(std::fs::read_to_string(&trials).unwrap().lines().count(), 5);

    let (code, _, err) = excavate(&[
        "stats",
        "--config",
        cfg,
        "--data",
        trials.to_str().unwrap(),
        "--out",
        bench_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(bench_dir.join("volume_histogram.csv").exists());
}

#[test]
fn defaults_lists_every_key() {
    let (code, out, _) = excavate(&["defaults"]);
    assert_eq!(code, 0);
    assert!(out.contains("train.lr = 0.1"));
    assert!(out.contains("cem.n_final = 64"));
}
