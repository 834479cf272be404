use std::path::{Path, PathBuf};

use log::{info, warn};
use nvsm::eval::{diagnose_matching, diagnostic_csv, estimate_all, evaluate as evaluate_report, PoolImage};
use nvsm::featext::{compute_raw_descriptors, RawDescriptorMap};
use nvsm::inference::{EstimateOptions, PoseEstimate};
use nvsm::io::{load_checkpoint, read_dataset, save_checkpoint, write_atomic, write_dataset, Checkpoint, CheckpointConfig};
use nvsm::mesh::{make_cuboid, CuboidMesh};
use nvsm::synthdata::{generate_dataset, Background, Dataset, SceneSpec, Split};
use nvsm::training::{em_inputs, history_csv, EmContext, EmState, OffsetAxes, TrainConfig};
use rayon::prelude::*;

use crate::{AxesArg, BackgroundArg, DiagnoseArgs, EstimateArgs, EvaluateArgs, Failure, GenDataArgs, SplitArg, TrainArgs};

type CmdResult = Result<(), Failure>;

fn usage(e: nvsm::Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Labelled => Split::Labelled,
        SplitArg::Unlabelled => Split::Unlabelled,
        SplitArg::Test => Split::Test,
    }
}

pub fn gen_data(a: &GenDataArgs, seed: u64) -> CmdResult {
    let spec = SceneSpec {
        texture_seed: a.texture_seed,
        background: match a.background {
            BackgroundArg::Noise => Background::Noise,
            BackgroundArg::Gradient => Background::Gradient,
            BackgroundArg::Tiles => Background::Tiles,
            BackgroundArg::Mixed => Background::Mixed,
        },
        occlusion_fraction: a.occlusion,
        ..SceneSpec::default()
    };
    spec.validate().map_err(usage)?;
    if a.labelled == 0 || a.unlabelled == 0 || a.test == 0 {
        return Err(Failure::Usage("every split needs at least one image".into()));
    }
    let dataset = generate_dataset(&spec, (a.labelled, a.unlabelled, a.test), seed)?;
    write_dataset(&a.out, &spec, &dataset)?;
    info!("wrote {} images to {}", dataset.images.len(), a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs, seed: u64) -> Result<TrainConfig, Failure> {
    let config = TrainConfig {
        alpha: a.alpha,
        tau: a.tau,
        delta_step: a.delta_step.to_radians(),
        schedule_increment: a.schedule_increment.to_radians(),
        outer_iterations: a.outer_iters,
        epochs_per_iteration: a.epochs,
        pairs_per_step: a.pairs,
        learning_rate: a.lr,
        negative_weight: a.lambda,
        per_view_cap: a.per_view_cap,
        step_cap: (a.step_cap > 0).then_some(a.step_cap),
        offset_axes: match a.offset_axes {
            AxesArg::Azimuth => OffsetAxes::Azimuth,
            AxesArg::All => OffsetAxes::All,
        },
        seed,
        ..TrainConfig::default()
    };
    config.validate().map_err(usage)?;
    if a.model.channels == 0 {
        return Err(Failure::Usage("--channels must be at least 1".into()));
    }
    Ok(config)
}

fn model_mesh(spec: &SceneSpec, subdivisions: usize) -> Result<CuboidMesh, Failure> {
    make_cuboid(spec.object_dims, subdivisions).map_err(usage)
}

fn history_path(a: &TrainArgs) -> PathBuf {
    a.history.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".history.csv");
        PathBuf::from(p)
    })
}

pub fn train(a: &TrainArgs, seed: u64) -> CmdResult {
    let config = train_config(a, seed)?;
    let (spec, dataset) = read_dataset(&a.data)?;
    let camera = spec.camera;
    let mesh = model_mesh(&spec, a.model.subdivisions)?;
    let ckpt_config = CheckpointConfig {
        camera,
        mesh_dims: spec.object_dims,
        mesh_subdivisions: a.model.subdivisions,
        channels: a.model.channels,
        feature_stride: camera.feature_stride,
        seed,
    };
    let (labelled, images) = em_inputs(&dataset, &camera)?;
    let ctx = EmContext::new(&labelled, &images, &mesh, &camera, &config, a.model.channels).map_err(usage)?;
    let mut state = if a.resume && a.out.exists() {
        let ckpt = load_checkpoint(&a.out, Some(&ckpt_config))?;
        info!("resuming after iteration {}", ckpt.state.completed);
        ckpt.state
    } else {
        ctx.init()?
    };
    let history = history_path(a);
    let save = |state: &EmState| -> CmdResult {
        let ckpt = Checkpoint {
            config: ckpt_config.clone(),
            state: state.clone(),
        };
        save_checkpoint(&a.out, &ckpt)?;
        write_atomic(&history, history_csv(&state.history).as_bytes())?;
        Ok(())
    };
    save(&state)?;
    while state.completed < config.outer_iterations {
        let next = state.completed + 1;
        state = ctx.run_until(state, next)?;
        save(&state)?;
    }
    Ok(())
}

struct Loaded {
    dataset: Dataset,
    mesh: CuboidMesh,
    ckpt: Checkpoint,
}

fn load(data: &Path, ckpt_path: &Path) -> Result<Loaded, Failure> {
    let (spec, dataset) = read_dataset(data)?;
    let ckpt = load_checkpoint(ckpt_path, None)?;
    let expected = CheckpointConfig {
        camera: spec.camera,
        mesh_dims: spec.object_dims,
        feature_stride: spec.camera.feature_stride,
        ..ckpt.config.clone()
    };
    let fields = ckpt.config.conflicts(&expected);
    if !fields.is_empty() {
        return Err(Failure::Data(nvsm::Error::ConfigConflict { fields }));
    }
    let mesh = make_cuboid(ckpt.config.mesh_dims, ckpt.config.mesh_subdivisions)?;
    Ok(Loaded { dataset, mesh, ckpt })
}

fn raw_maps(dataset: &Dataset, indices: &[usize], stride: usize) -> Result<Vec<RawDescriptorMap>, Failure> {
    Ok(indices
        .par_iter()
        .map(|&i| compute_raw_descriptors(&dataset.images[i], stride))
        .collect::<nvsm::Result<_>>()?)
}

fn run_estimates(l: &Loaded, split: Split) -> Result<(Vec<usize>, Vec<PoseEstimate>), Failure> {
    let indices: Vec<usize> = l.dataset.manifest.split(split).map(|(i, _)| i).collect();
    if indices.is_empty() {
        return Err(Failure::Usage(format!("split {} is empty", split.as_str())));
    }
    let cfg = &l.ckpt.config;
    let raws = raw_maps(&l.dataset, &indices, cfg.feature_stride)?;
    let refs: Vec<&RawDescriptorMap> = raws.iter().collect();
    let state = &l.ckpt.state;
    let est = estimate_all(&refs, &state.weights, &l.mesh, &state.bank, &cfg.camera, &EstimateOptions::default())?;
    Ok((indices, est))
}

fn estimates_csv(l: &Loaded, indices: &[usize], est: &[PoseEstimate]) -> String {
    let mut out = String::from("image_id,azimuth_deg,elevation_deg,inplane_deg,score\n");
    for (&i, e) in indices.iter().zip(est) {
        let [az, el, ip] = e.pose.to_degrees();
        let id = &l.dataset.manifest.entries()[i].id;
        out.push_str(&format!("{id},{az:.6},{el:.6},{ip:.6},{:.6}\n", e.score));
    }
    out
}

pub fn estimate(a: &EstimateArgs) -> CmdResult {
    let l = load(&a.data, &a.ckpt)?;
    let (indices, est) = run_estimates(&l, split_of(a.split))?;
    write_atomic(&a.out, estimates_csv(&l, &indices, &est).as_bytes())?;
    info!("estimated {} poses", est.len());
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> CmdResult {
    let l = load(&a.data, &a.ckpt)?;
    let (indices, est) = run_estimates(&l, split_of(a.split))?;
    let entries = l.dataset.manifest.entries();
    let records = indices
        .iter()
        .zip(&est)
        .map(|(&i, e)| {
            let entry = &entries[i];
            let gt = entry.pose.ok_or_else(|| {
                Failure::Data(nvsm::Error::InvalidArgument(format!("image {} has no ground-truth pose", entry.id)))
            })?;
            Ok((*e, gt, entry.occlusion_fraction))
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let report = evaluate_report(&records)?;
    write_atomic(&a.report, report.to_csv().as_bytes())?;
    if let Some(path) = &a.estimates {
        write_atomic(path, estimates_csv(&l, &indices, &est).as_bytes())?;
    }
    println!(
        "ACC@pi/6 {:.4}  ACC@pi/18 {:.4}  median {:.3} deg  ({} images)",
        report.acc_pi6, report.acc_pi18, report.median_error, report.overall.count
    );
    Ok(())
}

pub fn diagnose(a: &DiagnoseArgs) -> CmdResult {
    if a.anchors == 0 || a.top_k == 0 || a.offsets.is_empty() {
        return Err(Failure::Usage("--anchors, --top-k and --offsets must be non-empty".into()));
    }
    let l = load(&a.data, &a.ckpt)?;
    let cfg = &l.ckpt.config;
    let weights = if a.untrained {
        let (labelled, images) = em_inputs(&l.dataset, &cfg.camera)?;
        let config = TrainConfig {
            seed: cfg.seed,
            ..TrainConfig::default()
        };
        EmContext::new(&labelled, &images, &l.mesh, &cfg.camera, &config, cfg.channels)?
            .init()?
            .weights
    } else {
        l.ckpt.state.weights.clone()
    };
    let test: Vec<usize> = l.dataset.manifest.split(Split::Test).map(|(i, _)| i).collect();
    let raws = raw_maps(&l.dataset, &test, cfg.feature_stride)?;
    let entries = l.dataset.manifest.entries();
    let pool = test
        .iter()
        .zip(&raws)
        .map(|(&i, raw)| {
            let e = &entries[i];
            let pose = e.pose.ok_or_else(|| {
                Failure::Data(nvsm::Error::InvalidArgument(format!("test image {} has no ground-truth pose", e.id)))
            })?;
            Ok(PoolImage { id: &e.id, raw, pose })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let mut n = a.anchors;
    if n > pool.len() {
        warn!("{} anchors requested but the test split has {}; using {}", n, pool.len(), pool.len());
        n = pool.len();
    }
    let rows = diagnose_matching(
        &weights,
        &l.mesh,
        &cfg.camera,
        &pool[..n],
        &pool,
        &a.offsets,
        a.top_k,
        !a.include_anchor,
    )?;
    write_atomic(&a.out, diagnostic_csv(&rows).as_bytes())?;
    Ok(())
}
