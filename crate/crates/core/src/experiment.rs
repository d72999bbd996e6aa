//! Experiment engine behind the command-line tool: dataset generation,
//! episode runs with per-step metrics, training with held-out loss,
//! gradient checks and map-construction evaluation.
//!
//! Episodes are evaluated in parallel and written afterwards by a single
//! writer in `(scene, trajectory)` order, so outputs are byte-identical
//! across runs and thread counts.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, save_checkpoint, save_snapshot, CheckpointManifest, SnapshotMeta, CHECKPOINT_VERSION, SNAPSHOT_VERSION};
use crate::dataset::{generate_dataset, Dataset, ExperimentSplit, GenerateConfig, SplitMode};
use crate::error::{Error, Result};
use crate::mapping::{ConvLstmParams, MapUpdater, DEFAULT_KERNEL, DEFAULT_LOGIT_SCALE};
use crate::metrics::{mean_std, summarize, EpisodeSummary, StepMetrics, DEFAULT_SMOOTHING};
use crate::pipeline::{run_episode, Episode, EpisodeInputs, EpisodeRun, LocalizationMode, PipelineConfig};
use crate::rng::derive_seed;
use crate::scene::{ErrorTier, ViewConstraint};
use crate::train::{grad_check, rollout_inputs, synthetic_inputs, train, unroll_loss, GradReport, TrainConfig};

pub const METRICS_VERSION: u32 = 1;
pub const CSV_COLUMNS: &str = "step,true_r,true_x,true_y,est_r,est_x,est_y,pos_err,dir_err_deg,source,map_mse";
/// Gradient checks fail at or above this relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const DEFAULT_ALPHAS: [f64; 4] = [0.1, 0.3, 0.7, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kernel: usize,
    pub logit_scale: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kernel: DEFAULT_KERNEL,
            logit_scale: DEFAULT_LOGIT_SCALE,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn init(&self, classes: usize) -> Result<ConvLstmParams> {
        ConvLstmParams::init(classes, self.kernel, self.logit_scale, self.init_seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub mode: SplitMode,
    /// Scenes held out by the cross-scene split.
    pub test_scenes: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            mode: SplitMode::CrossScene,
            test_scenes: 10,
        }
    }
}

/// Which episodes `run` and `eval-map` process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subset {
    All,
    Train,
    Test,
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Subset::All),
            "train" => Ok(Subset::Train),
            "test" => Ok(Subset::Test),
            other => Err(Error::Config(format!("unknown subset '{other}'"))),
        }
    }
}

/// One JSON document configures every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub generate: GenerateConfig,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    /// Error tier of the rollouts used for training.
    pub train_tier: ErrorTier,
    pub alphas: Vec<f64>,
    pub subset: Subset,
    /// Write the final map of every episode run.
    pub save_maps: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Desk-scale setup: 20 scenes of 33x33 cells with 40 objects in 10
    /// classes, three 30-step trajectories each, the last 10 scenes held
    /// out, eight headings and an 11x11 observation window.
    pub fn desk() -> Self {
        let pipeline = PipelineConfig {
            tier: ErrorTier::Real,
            ..PipelineConfig::default()
        };
        let mut generate = GenerateConfig {
            seed: 11,
            scenes: 20,
            trajectories_per_scene: 3,
            steps: 30,
            ..GenerateConfig::default()
        };
        generate.scene.classes = 10;
        generate.scene.object_count = 40;
        generate.motion.orientations = pipeline.orientations;
        generate.motion.view = Some(ViewConstraint {
            camera: pipeline.camera,
            min_visible: 5,
            min_mass: 0.2,
        });
        Self {
            generate,
            pipeline,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            train_tier: ErrorTier::Ideal,
            alphas: DEFAULT_ALPHAS.to_vec(),
            subset: Subset::Test,
            save_maps: true,
        }
    }

    pub fn split(&self, dataset: &Dataset) -> Result<ExperimentSplit> {
        let split = ExperimentSplit::new(dataset, self.split.mode, self.split.test_scenes)?;
        if split.mode == SplitMode::CrossScene && split.scenes_overlap() {
            return Err(Error::Contract("cross-scene split shares scenes between train and test".into()));
        }
        Ok(split)
    }

    pub fn keys(&self, dataset: &Dataset) -> Result<Vec<(usize, usize)>> {
        Ok(match self.subset {
            Subset::All => dataset.all_keys(),
            Subset::Train => self.split(dataset)?.train,
            Subset::Test => self.split(dataset)?.test,
        })
    }

    /// Pipeline settings for `dataset`: headings and IMU gates follow the
    /// dataset's generation parameters.
    pub fn pipeline_for(&self, dataset: &Dataset) -> Result<PipelineConfig> {
        let pc = PipelineConfig {
            orientations: dataset.orientations(),
            imu: dataset.config.imu,
            ..self.pipeline.clone()
        };
        pc.validate()?;
        Ok(pc)
    }
}

fn check_classes(params: &ConvLstmParams, dataset: &Dataset) -> Result<()> {
    match dataset.scenes.first() {
        Some(s) if s.classes != params.classes() => Err(Error::Config(format!(
            "checkpoint has {} classes, dataset has {}",
            params.classes(),
            s.classes
        ))),
        _ => Ok(()),
    }
}

pub fn cmd_generate(cfg: &GenerateConfig, out: &Path) -> Result<Dataset> {
    let ds = generate_dataset(cfg)?;
    ds.save(out)?;
    log::info!("wrote {} trajectories to {}", ds.trajectory_count(), out.display());
    Ok(ds)
}

/// Localization mode plus map updater for `run`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunMode {
    Visual,
    VisualInertial,
    DeadReckoning,
    /// Visual-inertial localization with the leaky-integration map update.
    Heuristic(f64),
}

impl RunMode {
    pub fn localization(self) -> LocalizationMode {
        match self {
            RunMode::Visual => LocalizationMode::Visual,
            RunMode::VisualInertial | RunMode::Heuristic(_) => LocalizationMode::VisualInertial,
            RunMode::DeadReckoning => LocalizationMode::DeadReckoning,
        }
    }

    pub fn name(self) -> String {
        match self {
            RunMode::Heuristic(a) => format!("heuristic({a})"),
            other => other.localization().name().into(),
        }
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    /// `visual`, `visual-inertial`, `dead-reckoning` or `heuristic(ALPHA)`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("heuristic") {
            let a = rest
                .trim_start_matches(['(', '=', ':'])
                .trim_end_matches(')')
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad heuristic mode '{s}', expected heuristic(ALPHA)")))?;
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
            }
            return Ok(RunMode::Heuristic(a));
        }
        match s.parse::<LocalizationMode>()? {
            LocalizationMode::Visual => Ok(RunMode::Visual),
            LocalizationMode::VisualInertial => Ok(RunMode::VisualInertial),
            LocalizationMode::DeadReckoning => Ok(RunMode::DeadReckoning),
            LocalizationMode::GroundTruth => Err(Error::Config("run needs an estimating mode; use eval-map for ground-truth poses".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub scene: usize,
    pub trajectory: usize,
    pub file: String,
    pub summary: EpisodeSummary,
    pub final_pos_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: u32,
    pub mode: String,
    pub tier: ErrorTier,
    pub episodes: Vec<EpisodeEntry>,
    /// Means over episodes.
    pub ape: f64,
    pub ade: f64,
    pub final_map_mse: f64,
    pub inertial_fraction: f64,
    /// Position error at the last step.
    pub final_pos_err: f64,
}

pub fn episode_stem(key: (usize, usize)) -> String {
    format!("scene{:03}-traj{}", key.0, key.1)
}

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut s = format!("# version {METRICS_VERSION}\n{CSV_COLUMNS}\n");
    for m in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            m.step,
            m.truth.r,
            m.truth.x,
            m.truth.y,
            m.estimate.r,
            m.estimate.x,
            m.estimate.y,
            m.pos_err,
            m.dir_err_deg,
            m.source,
            m.map_mse
        )
        .expect("writing to a String");
    }
    s
}

fn run_all(episodes: &[Episode], updater: &MapUpdater, pc: &PipelineConfig) -> Result<Vec<EpisodeRun>> {
    episodes.par_iter().map(|e| run_episode(e, updater, pc)).collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    mean_std(&v).0
}

/// Runs every selected episode from an empty map and a known start pose.
/// Writes one metrics CSV per episode, optional final map snapshots and
/// `summary.json` into `out`.
pub fn cmd_run(
    dataset: &Dataset,
    checkpoint: Option<&ConvLstmParams>,
    mode: RunMode,
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<RunSummary> {
    let updater = match (mode, checkpoint) {
        (RunMode::Heuristic(alpha), _) => MapUpdater::Heuristic { alpha },
        (_, Some(p)) => {
            check_classes(p, dataset)?;
            MapUpdater::ConvLstm(p.clone())
        }
        (_, None) => return Err(Error::Config(format!("mode {} needs a checkpoint", mode.name()))),
    };
    let pc = PipelineConfig {
        mode: mode.localization(),
        ..cfg.pipeline_for(dataset)?
    };
    let keys = cfg.keys(dataset)?;
    let episodes = dataset.episodes(&keys)?;
    let runs = run_all(&episodes, &updater, &pc)?;

    std::fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(runs.len());
    for (&key, run) in keys.iter().zip(&runs) {
        let rows = run.metrics(pc.orientations);
        let stem = episode_stem(key);
        let file = format!("{stem}.csv");
        std::fs::write(out.join(&file), metrics_csv(&rows))?;
        if cfg.save_maps {
            if let Some(last) = run.records.last() {
                let meta = SnapshotMeta {
                    version: SNAPSHOT_VERSION,
                    step: last.step,
                    pose: last.estimate,
                    source: last.source.name().into(),
                };
                save_snapshot(&out.join(format!("{stem}.map")), &run.map, &meta)?;
            }
        }
        entries.push(EpisodeEntry {
            scene: key.0,
            trajectory: key.1,
            file,
            summary: summarize(&rows, run.final_map_mse()),
            final_pos_err: rows.last().map_or(0.0, |r| r.pos_err),
        });
    }
    let summary = RunSummary {
        version: METRICS_VERSION,
        mode: mode.name(),
        tier: pc.tier,
        ape: mean(entries.iter().map(|e| e.summary.ape)),
        ade: mean(entries.iter().map(|e| e.summary.ade)),
        final_map_mse: mean(entries.iter().map(|e| e.summary.final_map_mse)),
        inertial_fraction: mean(entries.iter().map(|e| e.summary.inertial_fraction)),
        final_pos_err: mean(entries.iter().map(|e| e.final_pos_err)),
        episodes: entries,
    };
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    log::info!(
        "{}: APE {:.4} ADE {:.3} over {} episodes",
        summary.mode,
        summary.ape,
        summary.ade,
        summary.episodes.len()
    );
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLine {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub version: u32,
    pub config_hash: String,
    pub split: ExperimentSplit,
    pub initial_heldout_loss: f64,
    pub epochs: Vec<EpochLine>,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub init: ConvLstmParams,
    pub params: ConvLstmParams,
    pub summary: TrainSummary,
}

#[derive(Serialize)]
struct HashedConfig<'a> {
    dataset: &'a GenerateConfig,
    pipeline: &'a PipelineConfig,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    split: &'a SplitConfig,
    train_tier: ErrorTier,
}

fn heldout_loss(params: &ConvLstmParams, inputs: &[EpisodeInputs], eps: f64) -> Result<f64> {
    let losses = inputs
        .par_iter()
        .map(|i| unroll_loss(params, i, eps))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Trains on the split's training episodes and reports the teacher-forced
/// held-out loss after every epoch. Writes `epoch-0000.ckpt` (the
/// initialization), `final.ckpt`, their manifests, `train_log.csv` and
/// `train_summary.json` into `out`.
pub fn cmd_train(dataset: &Dataset, cfg: &ExperimentConfig, out: &Path) -> Result<TrainRun> {
    let split = cfg.split(dataset)?;
    let base = cfg.pipeline_for(dataset)?;
    let pc = PipelineConfig {
        tier: cfg.train_tier,
        mode: LocalizationMode::GroundTruth,
        ..base
    };
    let classes = dataset
        .scenes
        .first()
        .map(|s| s.classes)
        .ok_or_else(|| Error::Config("dataset has no scenes".into()))?;
    let init = cfg.model.init(classes)?;
    let hash = config_hash(&HashedConfig {
        dataset: &dataset.config,
        pipeline: &pc,
        model: &cfg.model,
        train: &cfg.train,
        split: &cfg.split,
        train_tier: cfg.train_tier,
    })?;
    let train_eps = dataset.episodes(&split.train)?;
    let test_eps = dataset.episodes(&split.test)?;
    let heldout: Vec<EpisodeInputs> = test_eps
        .par_iter()
        .map(|e| rollout_inputs(e, &init, &pc, true))
        .collect::<Result<_>>()?;
    let eps = cfg.train.smoothing;
    let initial = heldout_loss(&init, &heldout, eps)?;

    std::fs::create_dir_all(out)?;
    let manifest = |epoch: usize, loss: f64| CheckpointManifest {
        version: CHECKPOINT_VERSION,
        epoch,
        loss: Some(loss),
        config_hash: hash.clone(),
    };
    save_checkpoint(&out.join("epoch-0000.ckpt"), &init, &manifest(0, initial))?;
    log::info!("initial held-out loss {initial:.6}");

    let mut lines = Vec::with_capacity(cfg.train.epochs);
    let outcome = train(&train_eps, &init, &pc, &cfg.train, |report, params| {
        let h = heldout_loss(params, &heldout, eps)?;
        log::info!("epoch {}: train {:.6} held-out {h:.6}", report.epoch + 1, report.loss);
        lines.push(EpochLine {
            epoch: report.epoch + 1,
            train_loss: report.loss,
            heldout_loss: h,
        });
        Ok(())
    })?;
    let last = lines.last().map_or(initial, |l| l.heldout_loss);
    save_checkpoint(&out.join("final.ckpt"), &outcome.params, &manifest(cfg.train.epochs, last))?;

    let mut log_csv = format!("# version {METRICS_VERSION}\nepoch,train_loss,heldout_loss\n");
    for l in &lines {
        writeln!(log_csv, "{},{},{}", l.epoch, l.train_loss, l.heldout_loss).expect("writing to a String");
    }
    std::fs::write(out.join("train_log.csv"), log_csv)?;
    let summary = TrainSummary {
        version: METRICS_VERSION,
        config_hash: hash,
        split,
        initial_heldout_loss: initial,
        epochs: lines,
    };
    std::fs::write(out.join("train_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(TrainRun {
        init,
        params: outcome.params,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEpisode {
    pub steps: usize,
    pub report: GradReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub version: u32,
    pub seed: u64,
    pub fd_step: f64,
    pub tolerance: f64,
    pub episodes: Vec<GradEpisode>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Side of the synthetic grid; the ROI covers all of it.
const GRADCHECK_GRID: usize = 7;

/// Gradient check of `params` (or a fresh initialization drawn from
/// `seed`) on synthetic 1-step and 5-step episodes.
pub fn cmd_gradcheck(params: Option<&ConvLstmParams>, model: &ModelConfig, seed: u64, fd_step: f64) -> Result<GradcheckReport> {
    let params = match params {
        Some(p) => p.clone(),
        None => ConvLstmParams::init(3, model.kernel, model.logit_scale, seed)?,
    };
    let mut episodes = Vec::new();
    for steps in [1, 5] {
        let inputs = synthetic_inputs(
            params.classes(),
            GRADCHECK_GRID,
            GRADCHECK_GRID,
            steps,
            derive_seed(seed, &[steps as u64]),
        )?;
        let report = grad_check(&params, &inputs, fd_step, DEFAULT_SMOOTHING, seed)?;
        episodes.push(GradEpisode { steps, report });
    }
    let max_rel_err = episodes.iter().map(|e| e.report.max_rel_err()).fold(0.0, f64::max);
    Ok(GradcheckReport {
        version: METRICS_VERSION,
        seed,
        fd_step,
        tolerance: GRAD_TOLERANCE,
        episodes,
        max_rel_err,
        passed: max_rel_err < GRAD_TOLERANCE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEval {
    pub method: String,
    /// Final map error per episode.
    pub finals: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Mean over episodes of the map error after each step's update.
    pub series: Vec<f64>,
    /// Series means over the first and last thirds of the episode.
    pub early_mean: f64,
    pub late_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMapReport {
    pub version: u32,
    pub tier: ErrorTier,
    pub episodes: usize,
    pub methods: Vec<MethodEval>,
}

impl EvalMapReport {
    pub fn method(&self, name: &str) -> Option<&MethodEval> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn heuristics(&self) -> impl Iterator<Item = &MethodEval> {
        self.methods.iter().filter(|m| m.method.starts_with("heuristic"))
    }
}

fn evaluate_method(method: String, runs: &[EpisodeRun]) -> MethodEval {
    let finals: Vec<f64> = runs.iter().map(|r| r.final_map_mse()).collect();
    let (mean, std) = mean_std(&finals);
    let len = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
    let series: Vec<f64> = (0..len)
        .map(|t| runs.iter().map(|r| r.records[t].mse_after).sum::<f64>() / runs.len() as f64)
        .collect();
    let w = (len / 3).max(1).min(len);
    let window = |s: &[f64]| if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 };
    MethodEval {
        method,
        mean,
        std,
        early_mean: window(&series[..w]),
        late_mean: window(&series[len - w..]),
        finals,
        series,
    }
}

/// Map construction with ground-truth poses under `tier`, for the learned
/// updater ("ours") and every heuristic alpha. Writes
/// `map_mse_<tier>.json`, a mean/std table and the per-step series.
pub fn cmd_eval_map(
    dataset: &Dataset,
    params: &ConvLstmParams,
    tier: ErrorTier,
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<EvalMapReport> {
    check_classes(params, dataset)?;
    let pc = PipelineConfig {
        tier,
        mode: LocalizationMode::GroundTruth,
        ..cfg.pipeline_for(dataset)?
    };
    let episodes = dataset.episodes(&cfg.keys(dataset)?)?;
    let mut methods = Vec::with_capacity(cfg.alphas.len() + 1);
    let ours = run_all(&episodes, &MapUpdater::ConvLstm(params.clone()), &pc)?;
    methods.push(evaluate_method("ours".into(), &ours));
    for &alpha in &cfg.alphas {
        let runs = run_all(&episodes, &MapUpdater::Heuristic { alpha }, &pc)?;
        methods.push(evaluate_method(format!("heuristic({alpha})"), &runs));
    }
    let report = EvalMapReport {
        version: METRICS_VERSION,
        tier,
        episodes: episodes.len(),
        methods,
    };

    std::fs::create_dir_all(out)?;
    let name = tier.name();
    std::fs::write(out.join(format!("map_mse_{name}.json")), serde_json::to_string_pretty(&report)?)?;
    let mut table = format!("# version {METRICS_VERSION}\nmethod,mean,std\n");
    for m in &report.methods {
        writeln!(table, "{},{},{}", m.method, m.mean, m.std).expect("writing to a String");
    }
    std::fs::write(out.join(format!("map_mse_{name}.csv")), table)?;
    let mut series = format!("# version {METRICS_VERSION}\nstep");
    for m in &report.methods {
        write!(series, ",{}", m.method).expect("writing to a String");
    }
    series.push('\n');
    let len = report.methods.first().map_or(0, |m| m.series.len());
    for t in 0..len {
        write!(series, "{t}").expect("writing to a String");
        for m in &report.methods {
            write!(series, ",{}", m.series[t]).expect("writing to a String");
        }
        series.push('\n');
    }
    std::fs::write(out.join(format!("map_series_{name}.csv")), series)?;
    for m in &report.methods {
        log::info!("{name} {}: {:.6} +- {:.6}", m.method, m.mean, m.std);
    }
    Ok(report)
}
