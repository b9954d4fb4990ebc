use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use excavation::commands::{self, BenchFiles};
use excavation::config::RunConfig;
use excavation::learning::{load_model, Head, Variant};
use excavation::planner::{CemMode, PlannerKind, Predictors};
use excavation::{Error, Result};

#[derive(Parser)]
#[command(
    name = "excavate",
    version,
    about = "Learning-based excavation planning for rigid objects in clutter"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// key = value configuration file; unset keys keep their defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory (defaults under `out_dir`)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated planners: cem-voxel, cem-traj, random-heu, highest-heu
    #[arg(long, global = true, value_delimiter = ',')]
    planner: Vec<PlannerKind>,
    #[arg(long, global = true)]
    episodes: Option<usize>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = VariantArg::Voxel)]
    variant: VariantArg,
    #[arg(long, global = true, value_enum, default_value_t = HeadArg::Classify)]
    head: HeadArg,
    /// CEM mode for `bench`
    #[arg(long, global = true, default_value = "full")]
    mode: CemMode,
    /// Worker threads, 0 = all cores
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Input dataset, or the per-trial CSV for `stats`
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Voxel model file
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Trajectory-only model file for cem-traj
    #[arg(long, global = true)]
    traj_model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labelled samples with the heuristic planners
    Collect,
    /// Train a predictor on a dataset
    Train,
    /// Evaluate a model on a dataset
    Eval,
    /// Benchmark planners on fresh scenes
    Bench,
    /// Compare full CEM against random PoA and random GTP replacements
    Ablate,
    /// Volume histogram and trajectory statistics from a benchmark CSV
    Stats,
    /// Re-derive every label in a dataset file
    VerifyDataset,
    /// Check analytic gradients on random tiny networks
    Gradcheck,
    /// Print every configuration key with its default
    Defaults,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Voxel,
    Traj,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Classify,
    Regress,
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("{flag} is required")))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.check()?;
    let variant = match cli.variant {
        VariantArg::Voxel => Variant::VoxelNet,
        VariantArg::Traj => Variant::TrajNet,
    };
    let head = match cli.head {
        HeadArg::Classify => Head::Classifier,
        HeadArg::Regress => Head::Regressor,
    };
    let out_or = |name: &str| cli.out.clone().unwrap_or_else(|| cfg.out_dir.join(name));

    match cli.command {
        Command::Collect => {
            let out = out_or("dataset.bin");
            let episodes = cli.episodes.unwrap_or(cfg.collect_episodes);
            let trials = cli.trials.unwrap_or(cfg.collect_trials);
            let s = commands::cmd_collect(&cfg, episodes, trials, &out)?;
            println!(
                "wrote {} records from {} episodes to {}; positive rate {:.3}, valid rate {:.3}",
                s.records,
                s.episodes,
                out.display(),
                s.positives as f64 / s.records.max(1) as f64,
                s.valid as f64 / s.records.max(1) as f64
            );
        }
        Command::Train => {
            let data = required(&cli.data, "--data")?;
            let name = match (variant, head) {
                (Variant::VoxelNet, Head::Classifier) => "voxel_classifier.model",
                (Variant::VoxelNet, Head::Regressor) => "voxel_regressor.model",
                (Variant::TrajNet, Head::Classifier) => "traj_classifier.model",
                (Variant::TrajNet, Head::Regressor) => "traj_regressor.model",
            };
            let out = out_or(name);
            println!("epoch,lr,loss,positive_fraction,val_accuracy,val_f1");
            commands::cmd_train(&cfg, data, variant, head, &out, |r| {
                let (acc, f1) = r.val.map(|m| (m.accuracy, m.f1)).unwrap_or((f64::NAN, f64::NAN));
                println!(
                    "{},{},{:.5},{:.3},{acc:.4},{f1:.4}",
                    r.epoch, r.lr, r.loss, r.positive_fraction
                );
            })?;
            println!("model written to {}", out.display());
        }
        Command::Eval => {
            let out = out_or("eval.csv");
            let m = commands::cmd_eval(
                &cfg,
                required(&cli.model, "--model")?,
                required(&cli.data, "--data")?,
                &out,
            )?;
            println!(
                "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}",
                m.accuracy, m.precision, m.recall, m.f1
            );
            if let (Some(mean), Some(std)) = (m.l1_mean, m.l1_std) {
                println!("l1 error {mean:.2} ({std:.2}) cm³");
            }
        }
        Command::Bench => {
            let planners = if cli.planner.is_empty() {
                vec![PlannerKind::RandomHeu, PlannerKind::HighestHeu]
            } else {
                cli.planner.clone()
            };
            let (voxel, traj) = commands::load_predictors(&planners, cli.model.as_deref(), cli.traj_model.as_deref())?;
            let predictors = Predictors {
                voxel: voxel.as_ref(),
                traj: traj.as_ref(),
            };
            let report = commands::bench(
                &cfg,
                &planners,
                cli.episodes.unwrap_or(cfg.bench_episodes),
                cli.trials.unwrap_or(cfg.bench_trials),
                &predictors,
                cli.mode,
            )?;
            let dir = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
            let BenchFiles { trials, .. } = commands::write_bench(&cfg, &report, &dir)?;
            println!("planner       volume cm³          objects          success  valid  plan s");
            for s in &report.summary {
                println!(
                    "{:<12}  {:>7.2} ({:>6.2})  {:>6.2} ({:>5.2})  {:>6.3}  {:>5.3}  {:.2} ({:.2})",
                    s.planner,
                    s.volume_mean,
                    s.volume_std,
                    s.count_mean,
                    s.count_std,
                    s.success_rate,
                    s.valid_rate,
                    s.time_mean,
                    s.time_std
                );
            }
            println!("per-trial rows in {}", trials.display());
        }
        Command::Ablate => {
            let model = load_model(required(&cli.model, "--model")?)?;
            let report = commands::ablate(&cfg, &model, cli.trials.unwrap_or(cfg.ablate_trials))?;
            let dir = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
            commands::write_ablation(&cfg, &report, &dir)?;
            println!("mode          volume cm³          success  valid");
            for s in &report.summary {
                println!(
                    "{:<12}  {:>7.2} ({:>6.2})  {:>6.3}  {:>5.3}",
                    s.planner, s.volume_mean, s.volume_std, s.success_rate, s.valid_rate
                );
            }
            let t = report.full_vs_random_poa;
            println!(
                "sign test full > random-poa: {} wins, {} losses, {} ties, p = {:.4}",
                t.wins, t.losses, t.ties, t.p_value
            );
        }
        Command::Stats => {
            let dir = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
            let files = commands::cmd_stats(&cfg, required(&cli.data, "--data")?, &dir)?;
            println!(
                "wrote {}, {} and {}",
                files.histogram.display(),
                files.params.display(),
                files.poa.display()
            );
        }
        Command::VerifyDataset => {
            let s = commands::cmd_verify_dataset(&cfg, required(&cli.data, "--data")?)?;
            println!(
                "{} records, {} episodes, {} positives, {} valid; all labels consistent",
                s.records, s.episodes, s.positives, s.valid
            );
        }
        Command::Gradcheck => {
            let worst = commands::cmd_gradcheck(cfg.seed, 10)?;
            println!("max relative error {worst:.3e} over 10 random networks");
        }
        Command::Defaults => {
            for (k, v, doc) in RunConfig::documented_defaults() {
                if doc.is_empty() {
                    println!("{k} = {v}");
                } else {
                    println!("# {doc}\n{k} = {v}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
