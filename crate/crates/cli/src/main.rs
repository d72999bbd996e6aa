use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use semslam::checkpoint::load_params;
use semslam::dataset::{Dataset, SplitMode};
use semslam::experiment::{
    cmd_eval_map, cmd_generate, cmd_gradcheck, cmd_run, cmd_train, ExperimentConfig, RunMode, Subset,
    DEFAULT_FD_STEP,
};
use semslam::scene::ErrorTier;

/// Semantic grid SLAM experiments.
///
/// Settings come from an optional JSON config file (`--config`); flags
/// override the file. Log verbosity is read from SEMSLAM_LOG.
#[derive(Parser, Debug)]
#[command(name = "semslam", version)]
struct Cli {
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate scenes, trajectories and IMU readings.
    Generate(GenerateArgs),
    /// Run localization and mapping over dataset episodes.
    Run(RunArgs),
    /// Train the map-update cell.
    Train(TrainArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Compare map construction quality with ground-truth poses.
    EvalMap(EvalMapArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct Selection {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Episodes to process: all, train or test.
    #[arg(long)]
    subset: Option<Subset>,
    /// Split used to pick train/test episodes: intra-scene or cross-scene.
    #[arg(long)]
    split: Option<SplitMode>,
    #[arg(long)]
    test_scenes: Option<usize>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    sel: Selection,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// visual, visual-inertial, dead-reckoning or heuristic(ALPHA).
    #[arg(long)]
    mode: Option<RunMode>,
    /// Observation error tier: real, obstructed or ideal.
    #[arg(long)]
    tier: Option<ErrorTier>,
    /// Skip writing final map snapshots.
    #[arg(long)]
    no_maps: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    sel: Selection,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fd_step: Option<f64>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalMapArgs {
    #[command(flatten)]
    sel: Selection,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    tier: Option<ErrorTier>,
}

/// Config file: the experiment settings plus the values of the path and
/// mode flags.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct FileConfig {
    #[serde(flatten)]
    experiment: ExperimentConfig,
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    mode: Option<String>,
    tier: Option<ErrorTier>,
    gradcheck_seed: Option<u64>,
    fd_step: Option<f64>,
}

fn load_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
        None => Ok(FileConfig::default()),
    }
}

fn required(flag: Option<PathBuf>, file: Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
    match flag.or(file) {
        Some(p) => Ok(p),
        None => bail!("--{name} is required (flag or config key \"{name}\")"),
    }
}

fn apply_selection(sel: &Selection, cfg: &mut ExperimentConfig) {
    if let Some(s) = sel.subset {
        cfg.subset = s;
    }
    if let Some(m) = sel.split {
        cfg.split.mode = m;
    }
    if let Some(n) = sel.test_scenes {
        cfg.split.test_scenes = n;
    }
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEMSLAM_LOG", "info")).init();
    let cli = Cli::parse();
    let file = load_config(cli.config.as_deref())?;
    let mut cfg = file.experiment;

    match cli.command {
        Command::Generate(a) => {
            let g = &mut cfg.generate;
            if let Some(v) = a.seed {
                g.seed = v;
            }
            if let Some(v) = a.scenes {
                g.scenes = v;
            }
            if let Some(v) = a.trajectories {
                g.trajectories_per_scene = v;
            }
            if let Some(v) = a.steps {
                g.steps = v;
            }
            let out = required(a.out, file.out, "out")?;
            let ds = cmd_generate(g, &out)?;
            println!("{} scenes, {} trajectories -> {}", ds.scenes.len(), ds.trajectory_count(), out.display());
        }
        Command::Run(a) => {
            apply_selection(&a.sel, &mut cfg);
            if let Some(t) = a.tier.or(file.tier) {
                cfg.pipeline.tier = t;
            }
            if a.no_maps {
                cfg.save_maps = false;
            }
            let mode = match (a.mode, file.mode) {
                (Some(m), _) => m,
                (None, Some(s)) => s.parse()?,
                (None, None) => bail!("--mode is required"),
            };
            let ds = load_dataset(&required(a.sel.dataset, file.dataset, "dataset")?)?;
            let params = a
                .checkpoint
                .or(file.checkpoint)
                .map(|p| load_params(&p).with_context(|| format!("loading checkpoint {}", p.display())))
                .transpose()?;
            let out = required(a.sel.out, file.out, "out")?;
            let s = cmd_run(&ds, params.as_ref(), mode, &cfg, &out)?;
            println!(
                "{}: APE {:.4} ADE {:.3} final map MSE {:.6} inertial {:.3} ({} episodes)",
                s.mode,
                s.ape,
                s.ade,
                s.final_map_mse,
                s.inertial_fraction,
                s.episodes.len()
            );
        }
        Command::Train(a) => {
            apply_selection(&a.sel, &mut cfg);
            let t = &mut cfg.train;
            if let Some(v) = a.epochs {
                t.epochs = v;
            }
            if let Some(v) = a.learning_rate {
                t.learning_rate = v;
            }
            if let Some(v) = a.batch {
                t.batch = v;
            }
            if let Some(v) = a.seed {
                t.seed = v;
            }
            let ds = load_dataset(&required(a.sel.dataset, file.dataset, "dataset")?)?;
            let out = required(a.sel.out, file.out, "out")?;
            let run = cmd_train(&ds, &cfg, &out)?;
            if let Some(last) = run.summary.epochs.last() {
                println!(
                    "epoch {}: train loss {:.6}, held-out loss {:.6} (initial {:.6})",
                    last.epoch, last.train_loss, last.heldout_loss, run.summary.initial_heldout_loss
                );
            }
            println!("checkpoint -> {}", out.join("final.ckpt").display());
        }
        Command::Gradcheck(a) => {
            let params = a
                .checkpoint
                .or(file.checkpoint)
                .map(|p| load_params(&p).with_context(|| format!("loading checkpoint {}", p.display())))
                .transpose()?;
            let seed = a.seed.or(file.gradcheck_seed).unwrap_or(0);
            let fd = a.fd_step.or(file.fd_step).unwrap_or(DEFAULT_FD_STEP);
            let report = cmd_gradcheck(params.as_ref(), &cfg.model, seed, fd)?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(out) = a.out.or(file.out) {
                std::fs::write(&out, &json).with_context(|| format!("writing {}", out.display()))?;
            }
            println!("{json}");
            if !report.passed {
                bail!(
                    "gradient check failed: max relative error {:.3e} >= {:.0e}",
                    report.max_rel_err,
                    report.tolerance
                );
            }
        }
        Command::EvalMap(a) => {
            apply_selection(&a.sel, &mut cfg);
            let tier = a.tier.or(file.tier).unwrap_or(cfg.pipeline.tier);
            let ds = load_dataset(&required(a.sel.dataset, file.dataset, "dataset")?)?;
            let ckpt = required(a.checkpoint, file.checkpoint, "checkpoint")?;
            let params = load_params(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let out = required(a.sel.out, file.out, "out")?;
            let report = cmd_eval_map(&ds, &params, tier, &cfg, &out)?;
            println!("tier {} over {} episodes", tier.name(), report.episodes);
            for m in &report.methods {
                println!("{:>16}: {:.6} +- {:.6}", m.method, m.mean, m.std);
            }
        }
    }
    Ok(())
}
