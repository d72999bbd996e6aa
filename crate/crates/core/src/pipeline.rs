//! One episode of the full loop: observe, estimate the pose, register the
//! observation and update the map.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{cross_check, dead_reckon, select_belief, FusionConfig, PoseSource};
use crate::mapping::{project_observation, roi_mask, MapUpdater, RoiMask, SemanticMap};
use crate::metrics::{direction_error_deg, map_mse, position_error, StepMetrics, DEFAULT_SMOOTHING};
use crate::observation::{filter_noise, project_features, DEFAULT_BETA};
use crate::pose::{argmax_pose, rotation_stack, visual_belief, DiscretePose, PoseBelief};
use crate::rng::stream_rng;
use crate::scene::{ground_truth_map, sense, CameraModel, Delta, ErrorTier, ImuModel, Scene, Trajectory};
use crate::tensor::Grid3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalizationMode {
    /// Teacher forcing: the true pose is used for registration.
    GroundTruth,
    Visual,
    VisualInertial,
    DeadReckoning,
}

impl LocalizationMode {
    pub fn name(self) -> &'static str {
        match self {
            LocalizationMode::GroundTruth => "ground-truth",
            LocalizationMode::Visual => "visual",
            LocalizationMode::VisualInertial => "visual-inertial",
            LocalizationMode::DeadReckoning => "dead-reckoning",
        }
    }
}

impl std::str::FromStr for LocalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground-truth" => Ok(LocalizationMode::GroundTruth),
            "visual" => Ok(LocalizationMode::Visual),
            "visual-inertial" => Ok(LocalizationMode::VisualInertial),
            "dead-reckoning" => Ok(LocalizationMode::DeadReckoning),
            other => Err(Error::Config(format!("unknown localization mode '{other}'"))),
        }
    }
}

/// Where the pose used at a step came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepSource {
    Visual,
    Inertial,
    Truth,
}

impl StepSource {
    pub fn name(self) -> &'static str {
        match self {
            StepSource::Visual => "visual",
            StepSource::Inertial => "inertial",
            StepSource::Truth => "truth",
        }
    }
}

impl From<PoseSource> for StepSource {
    fn from(s: PoseSource) -> Self {
        match s {
            PoseSource::Visual => StepSource::Visual,
            PoseSource::Inertial => StepSource::Inertial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub orientations: usize,
    /// Side of the egocentric observation window and of the update ROI.
    pub obs_size: usize,
    pub camera: CameraModel,
    pub beta: f64,
    pub tier: ErrorTier,
    pub mode: LocalizationMode,
    /// Gates for the cross-check; derived from `imu` when absent.
    pub fusion: Option<FusionConfig>,
    pub imu: ImuModel,
    pub smoothing: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            orientations: 8,
            obs_size: 11,
            camera: CameraModel {
                fov: FRAC_PI_2,
                max_range: 5.0,
                rays: 720,
            },
            beta: DEFAULT_BETA,
            tier: ErrorTier::Ideal,
            mode: LocalizationMode::GroundTruth,
            fusion: None,
            imu: ImuModel::default(),
            smoothing: DEFAULT_SMOOTHING,
        }
    }
}

impl PipelineConfig {
    pub fn gates(&self) -> FusionConfig {
        self.fusion
            .unwrap_or_else(|| FusionConfig::from_imu(&self.imu, self.orientations))
    }

    pub fn validate(&self) -> Result<()> {
        if self.orientations == 0 {
            return Err(Error::Config("orientations must be positive".into()));
        }
        if self.obs_size % 2 == 0 {
            return Err(Error::Config(format!("observation size {} must be odd", self.obs_size)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if !(self.smoothing > 0.0) {
            return Err(Error::Config("smoothing must be positive".into()));
        }
        self.camera.validate()?;
        self.imu.validate()
    }
}

/// A trajectory through a scene together with its IMU readings.
/// `imu_deltas[t]` is the reading for the move from pose `t` to `t + 1`.
#[derive(Debug, Clone)]
pub struct Episode {
    pub scene: Arc<Scene>,
    pub trajectory: Trajectory,
    pub imu_deltas: Vec<Delta>,
    /// Seed for the observation error stream.
    pub seed: u64,
    /// `(scene, trajectory)` index in the dataset.
    pub key: (usize, usize),
}

impl Episode {
    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }
}

/// Registered observations and ROI masks of an episode, plus the target map.
/// With these fixed, the map sequence depends only on the update parameters.
#[derive(Debug, Clone)]
pub struct EpisodeInputs {
    pub observations: Vec<Grid3>,
    pub masks: Vec<RoiMask>,
    pub truth: Grid3,
}

impl EpisodeInputs {
    pub fn steps(&self) -> usize {
        self.observations.len()
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub truth: DiscretePose,
    pub estimate: DiscretePose,
    pub source: StepSource,
    pub belief_total: f64,
    /// Map error before and after this step's update.
    pub mse_before: f64,
    pub mse_after: f64,
}

#[derive(Debug, Clone)]
pub struct EpisodeRun {
    pub records: Vec<StepRecord>,
    pub inputs: EpisodeInputs,
    pub map: SemanticMap,
}

impl EpisodeRun {
    /// Per-step rows; the map error column is the map entering the step.
    pub fn metrics(&self, orientations: usize) -> Vec<StepMetrics> {
        self.records
            .iter()
            .map(|r| StepMetrics {
                step: r.step,
                truth: r.truth,
                estimate: r.estimate,
                pos_err: position_error(r.truth, r.estimate),
                dir_err_deg: direction_error_deg(r.truth, r.estimate, orientations),
                source: r.source.name().into(),
                map_mse: r.mse_before,
            })
            .collect()
    }

    pub fn final_map_mse(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.mse_after)
    }

    /// Map error after each update, step 1..=T.
    pub fn mse_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mse_after).collect()
    }
}

/// Egocentric observation at `pose` after detection, projection and the
/// noise filter.
pub fn observe(
    scene: &Scene,
    pose: DiscretePose,
    step: usize,
    seed: u64,
    cfg: &PipelineConfig,
) -> Result<crate::observation::ObservationMap> {
    let mut rng = stream_rng(seed, &[0x0B5, step as u64]);
    let dets = sense(scene, pose, &cfg.camera, cfg.orientations, &cfg.tier.injection(), &mut rng)?;
    let obs = project_features(&dets, scene.classes(), cfg.obs_size, step)?;
    Ok(filter_noise(&obs, cfg.beta))
}

/// Runs the loop over the whole trajectory from an empty map with the start
/// pose known. The map entering each step is used for visual localization.
pub fn run_episode(episode: &Episode, updater: &MapUpdater, cfg: &PipelineConfig) -> Result<EpisodeRun> {
    cfg.validate()?;
    let scene = &*episode.scene;
    let poses = &episode.trajectory.poses;
    if poses.is_empty() {
        return Err(Error::Contract("episode has no poses".into()));
    }
    if episode.imu_deltas.len() + 1 < poses.len() {
        return Err(Error::Contract(format!(
            "{} IMU readings for {} poses",
            episode.imu_deltas.len(),
            poses.len()
        )));
    }
    let (lc, hh, ww) = (scene.classes(), scene.height(), scene.width());
    let rr = cfg.orientations;
    let truth_map = ground_truth_map(scene);
    let gates = cfg.gates();
    let mut map = SemanticMap::new(lc, hh, ww);
    let mut records = Vec::with_capacity(poses.len());
    let mut observations = Vec::with_capacity(poses.len());
    let mut masks = Vec::with_capacity(poses.len());
    let mut mse = map_mse(&truth_map, &map.grid, cfg.smoothing)?;
    let mut prev: Option<DiscretePose> = None;

    for (t, &truth) in poses.iter().enumerate() {
        let obs = observe(scene, truth, t, episode.seed, cfg)?;
        let stack = rotation_stack(&obs, rr)?;
        let one_hot = |p: DiscretePose| PoseBelief::one_hot(rr, hh, ww, p);
        let (estimate, belief, source) = match (cfg.mode, prev) {
            (LocalizationMode::GroundTruth, _) => (truth, one_hot(truth), StepSource::Truth),
            (_, None) => (truth, one_hot(truth), StepSource::Inertial),
            (LocalizationMode::DeadReckoning, Some(p)) => {
                let u = dead_reckon(p, episode.imu_deltas[t - 1], rr, hh, ww);
                (u, one_hot(u), StepSource::Inertial)
            }
            (LocalizationMode::Visual, Some(_)) => {
                let v = visual_belief(&map.grid, &stack)?;
                (argmax_pose(&v), v, StepSource::Visual)
            }
            (LocalizationMode::VisualInertial, Some(p)) => {
                let u = dead_reckon(p, episode.imu_deltas[t - 1], rr, hh, ww);
                let v = visual_belief(&map.grid, &stack)?;
                let src = cross_check(argmax_pose(&v), u, rr, &gates);
                let out = select_belief(v, u, src);
                (out.pose, out.belief, out.source.into())
            }
        };
        let belief_total = belief.total();
        let registered = project_observation(&belief, &stack)?;
        let mask = roi_mask(estimate, cfg.obs_size, hh, ww)?;
        map = updater.update(&map, &registered, &mask)?;
        if !map.grid.all_finite() || !map.cell.all_finite() {
            return Err(Error::NonFinite {
                step: t,
                detail: format!("map update ({})", updater.label()),
            });
        }
        let after = map_mse(&truth_map, &map.grid, cfg.smoothing)?;
        records.push(StepRecord {
            step: t,
            truth,
            estimate,
            source,
            belief_total,
            mse_before: mse,
            mse_after: after,
        });
        mse = after;
        observations.push(registered);
        masks.push(mask);
        prev = Some(estimate);
    }
    Ok(EpisodeRun {
        records,
        inputs: EpisodeInputs {
            observations,
            masks,
            truth: truth_map,
        },
        map,
    })
}
