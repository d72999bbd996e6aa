use semslam::checkpoint::{load_snapshot, params_from_bytes, params_to_bytes, CheckpointManifest};
use semslam::dataset::{generate_dataset, Dataset, GenerateConfig, DATASET_VERSION};
use semslam::experiment::{cmd_run, ExperimentConfig, RunMode};
use semslam::mapping::ConvLstmParams;
use semslam::Error;

fn tiny() -> GenerateConfig {
    let mut g = ExperimentConfig::desk().generate;
    g.scenes = 2;
    g.trajectories_per_scene = 2;
    g.steps = 4;
    g
}

#[test]
fn dataset_round_trips_through_json() {
    let ds = generate_dataset(&tiny()).unwrap();
    let text = ds.to_json().unwrap();
    assert_eq!(Dataset::from_json(&text).unwrap(), ds);
    assert_eq!(ds.version, DATASET_VERSION);
}

#[test]
fn dataset_version_is_checked() {
    let ds = generate_dataset(&tiny()).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&ds.to_json().unwrap()).unwrap();
    v["version"] = serde_json::json!(DATASET_VERSION + 1);
    assert!(matches!(Dataset::from_json(&v.to_string()), Err(Error::Format(_))));
    v.as_object_mut().unwrap().remove("version");
    assert!(Dataset::from_json(&v.to_string()).is_err());
}

#[test]
fn dataset_with_off_grid_pose_is_rejected() {
    let ds = generate_dataset(&tiny()).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&ds.to_json().unwrap()).unwrap();
    v["scenes"][0]["trajectories"][0]["poses"][1]["x"] = serde_json::json!(500);
    assert!(Dataset::from_json(&v.to_string()).is_err());
}

#[test]
fn checkpoint_rejects_wrong_shapes() {
    let p = ConvLstmParams::init(3, 3, 5.0, 0).unwrap();
    let mut bytes = params_to_bytes(&p);
    // claim four classes
    bytes[12] = 4;
    assert!(params_from_bytes(&bytes).is_err());
    let m = CheckpointManifest {
        version: 1,
        epoch: 0,
        loss: None,
        config_hash: String::new(),
    };
    let text = serde_json::to_string(&m).unwrap();
    assert!(text.starts_with("{\"version\":1"));
}

#[test]
fn run_writes_loadable_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::desk();
    cfg.generate = tiny();
    cfg.split.test_scenes = 1;
    let ds = generate_dataset(&cfg.generate).unwrap();
    let params = cfg.model.init(10).unwrap();
    let summary = cmd_run(&ds, Some(&params), RunMode::VisualInertial, &cfg, dir.path()).unwrap();
    assert_eq!(summary.episodes.len(), 2);
    let (map, meta) = load_snapshot(&dir.path().join("scene001-traj1.map")).unwrap();
    assert_eq!(meta.step, 3);
    assert_eq!(map.grid.shape(), (10, 33, 33));
    assert!(meta.source == "visual" || meta.source == "inertial");

    let wrong = ConvLstmParams::init(4, 3, 5.0, 0).unwrap();
    assert!(cmd_run(&ds, Some(&wrong), RunMode::Visual, &cfg, dir.path()).is_err());
    assert!(cmd_run(&ds, None, RunMode::Visual, &cfg, dir.path()).is_err());
}
