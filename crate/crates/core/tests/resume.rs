use nvsm::io::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointConfig};
use nvsm::mesh::make_cuboid;
use nvsm::synthdata::{generate_dataset, SceneSpec};
use nvsm::training::{em_inputs, run_em, EmContext, TrainConfig};

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let spec = SceneSpec::default();
    let cam = spec.camera;
    let dataset = generate_dataset(&spec, (3, 12, 2), 4).unwrap();
    let mesh = make_cuboid(spec.object_dims, 2).unwrap();
    let config = TrainConfig {
        outer_iterations: 3,
        epochs_per_iteration: 1,
        pairs_per_step: 4,
        step_cap: Some(4),
        seed: 4,
        ..TrainConfig::default()
    };
    let channels = 6;
    let (labelled, images) = em_inputs(&dataset, &cam).unwrap();
    let ctx = EmContext::new(&labelled, &images, &mesh, &cam, &config, channels).unwrap();
    let full = ctx.run_until(ctx.init().unwrap(), 3).unwrap();
    assert_eq!(full.history.len(), 3);
    assert_eq!(run_em(&labelled, &images, &mesh, &cam, &config, channels).unwrap(), full);

    let ckpt_config = CheckpointConfig {
        camera: cam,
        mesh_dims: spec.object_dims,
        mesh_subdivisions: 2,
        channels,
        feature_stride: cam.feature_stride,
        seed: config.seed,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.nvsm");
    let first = ctx.run_until(ctx.init().unwrap(), 1).unwrap();
    save_checkpoint(&path, &Checkpoint { config: ckpt_config.clone(), state: first }).unwrap();
    let loaded = load_checkpoint(&path, Some(&ckpt_config)).unwrap();
    assert_eq!(loaded.state.completed, 1);
    let resumed = ctx.run_until(loaded.state, 3).unwrap();
    assert_eq!(resumed, full);
}
