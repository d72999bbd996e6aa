//! Versioned JSON datasets of scenes, trajectories and IMU readings.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::Episode;
use crate::pose::DiscretePose;
use crate::rng::derive_seed;
use crate::scene::{
    generate_scene, generate_trajectory, imu_read, Cell, Delta, ImuModel, MotionParams, Scene, SceneObject,
    SceneParams, Trajectory,
};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub seed: u64,
    pub scenes: usize,
    pub trajectories_per_scene: usize,
    pub steps: usize,
    pub scene: SceneParams,
    pub motion: MotionParams,
    /// IMU noise model; each trajectory draws from its own seed derived
    /// from `seed`.
    pub imu: ImuModel,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 30,
            trajectories_per_scene: 3,
            steps: 30,
            scene: SceneParams::default(),
            motion: MotionParams::default(),
            imu: ImuModel::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub poses: Vec<DiscretePose>,
    pub true_deltas: Vec<Delta>,
    pub imu_deltas: Vec<Delta>,
    /// Seed of the observation error stream for this trajectory.
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "L")]
    pub classes: usize,
    pub walls: Vec<Cell>,
    pub objects: Vec<SceneObject>,
    pub trajectories: Vec<TrajectoryRecord>,
}

impl SceneRecord {
    pub fn scene(&self) -> Result<Scene> {
        Scene::new(
            self.height,
            self.width,
            self.classes,
            self.objects.clone(),
            self.walls.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub version: u32,
    pub config: GenerateConfig,
    pub scenes: Vec<SceneRecord>,
}

fn generate_one(cfg: &GenerateConfig, s: usize) -> Result<SceneRecord> {
    let scene = generate_scene(derive_seed(cfg.seed, &[0x5C, s as u64]), &cfg.scene)?;
    let mut trajectories = Vec::with_capacity(cfg.trajectories_per_scene);
    for k in 0..cfg.trajectories_per_scene {
        let key = [0x7B, s as u64, k as u64];
        let traj = generate_trajectory(&scene, derive_seed(cfg.seed, &key), cfg.steps, &cfg.motion)?;
        let imu = ImuModel {
            seed: derive_seed(cfg.seed ^ cfg.imu.seed, &[0x1B, s as u64, k as u64]),
            ..cfg.imu
        };
        let imu_deltas = traj
            .true_deltas
            .iter()
            .enumerate()
            .map(|(t, &d)| imu_read(d, &imu, t))
            .collect();
        trajectories.push(TrajectoryRecord {
            poses: traj.poses,
            true_deltas: traj.true_deltas,
            imu_deltas,
            noise_seed: derive_seed(cfg.seed, &[0x0B, s as u64, k as u64]),
        });
    }
    Ok(SceneRecord {
        height: scene.height(),
        width: scene.width(),
        classes: scene.classes(),
        walls: scene.walls().to_vec(),
        objects: scene.objects().to_vec(),
        trajectories,
    })
}

/// Scenes are generated in parallel; each draws from streams keyed by its
/// index, so the result does not depend on scheduling.
pub fn generate_dataset(cfg: &GenerateConfig) -> Result<Dataset> {
    if cfg.scenes == 0 || cfg.trajectories_per_scene == 0 || cfg.steps == 0 {
        return Err(Error::Config("scenes, trajectories and steps must be positive".into()));
    }
    cfg.imu.validate()?;
    let scenes = (0..cfg.scenes)
        .into_par_iter()
        .map(|s| generate_one(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        version: DATASET_VERSION,
        config: cfg.clone(),
        scenes,
    })
}

impl Dataset {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: serde_json::Value = serde_json::from_str(text)?;
        match probe.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == DATASET_VERSION as u64 => {}
            Some(v) => return Err(Error::Format(format!("dataset version {v}, expected {DATASET_VERSION}"))),
            None => return Err(Error::Format("dataset has no version field".into())),
        }
        let ds: Dataset = serde_json::from_value(probe)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        for (s, rec) in self.scenes.iter().enumerate() {
            let scene = rec.scene()?;
            for (k, t) in rec.trajectories.iter().enumerate() {
                let n = t.poses.len();
                if n == 0 || t.true_deltas.len() + 1 != n || t.imu_deltas.len() + 1 != n {
                    return Err(Error::Format(format!(
                        "scene {s} trajectory {k}: {n} poses, {} deltas, {} IMU readings",
                        t.true_deltas.len(),
                        t.imu_deltas.len()
                    )));
                }
                if t.poses.iter().any(|p| {
                    p.r >= self.config.motion.orientations || p.x >= scene.height() || p.y >= scene.width() || !scene.is_free(p.x, p.y)
                }) {
                    return Err(Error::Format(format!("scene {s} trajectory {k} has a pose off free space")));
                }
            }
        }
        Ok(())
    }

    pub fn orientations(&self) -> usize {
        self.config.motion.orientations
    }

    pub fn trajectory_count(&self) -> usize {
        self.scenes.iter().map(|s| s.trajectories.len()).sum()
    }

    /// Episodes for the listed `(scene, trajectory)` keys, in that order.
    pub fn episodes(&self, keys: &[(usize, usize)]) -> Result<Vec<Episode>> {
        let mut cache: Vec<Option<Arc<Scene>>> = vec![None; self.scenes.len()];
        keys.iter()
            .map(|&(s, k)| {
                let rec = self
                    .scenes
                    .get(s)
                    .ok_or_else(|| Error::Config(format!("no scene {s}")))?;
                let t = rec
                    .trajectories
                    .get(k)
                    .ok_or_else(|| Error::Config(format!("scene {s} has no trajectory {k}")))?;
                let scene = match &cache[s] {
                    Some(sc) => sc.clone(),
                    None => {
                        let sc = Arc::new(rec.scene()?);
                        cache[s] = Some(sc.clone());
                        sc
                    }
                };
                Ok(Episode {
                    scene,
                    trajectory: Trajectory {
                        poses: t.poses.clone(),
                        true_deltas: t.true_deltas.clone(),
                    },
                    imu_deltas: t.imu_deltas.clone(),
                    seed: t.noise_seed,
                    key: (s, k),
                })
            })
            .collect()
    }

    pub fn all_keys(&self) -> Vec<(usize, usize)> {
        self.scenes
            .iter()
            .enumerate()
            .flat_map(|(s, rec)| (0..rec.trajectories.len()).map(move |k| (s, k)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Per scene, all trajectories but the last train; the last tests.
    IntraScene,
    /// Whole scenes are held out.
    CrossScene,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra-scene" | "intra" => Ok(SplitMode::IntraScene),
            "cross-scene" | "cross" => Ok(SplitMode::CrossScene),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSplit {
    pub mode: SplitMode,
    pub train: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

impl ExperimentSplit {
    /// Intra-scene holds out the last trajectory of every scene. Cross-scene
    /// holds out the last `test_scenes` scenes entirely.
    pub fn new(dataset: &Dataset, mode: SplitMode, test_scenes: usize) -> Result<Self> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        match mode {
            SplitMode::IntraScene => {
                for (s, rec) in dataset.scenes.iter().enumerate() {
                    let n = rec.trajectories.len();
                    if n < 2 {
                        return Err(Error::Config(format!(
                            "intra-scene split needs two trajectories per scene, scene {s} has {n}"
                        )));
                    }
                    train.extend((0..n - 1).map(|k| (s, k)));
                    test.push((s, n - 1));
                }
            }
            SplitMode::CrossScene => {
                let n = dataset.scenes.len();
                if test_scenes == 0 || test_scenes >= n {
                    return Err(Error::Config(format!(
                        "cross-scene split needs 0 < test scenes < {n}, got {test_scenes}"
                    )));
                }
                for (s, rec) in dataset.scenes.iter().enumerate() {
                    let keys = (0..rec.trajectories.len()).map(|k| (s, k));
                    if s < n - test_scenes {
                        train.extend(keys);
                    } else {
                        test.extend(keys);
                    }
                }
            }
        }
        Ok(Self { mode, train, test })
    }

    pub fn scenes_overlap(&self) -> bool {
        self.train.iter().any(|(s, _)| self.test.iter().any(|(t, _)| s == t))
    }
}
