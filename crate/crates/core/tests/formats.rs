//! Golden files in `tests/golden` are produced by `make_golden.py` from the
//! byte layouts alone; these tests pin the Rust encoders to them.

use std::path::PathBuf;

use nvsm::eval::{EvalReport, DIAGNOSTIC_CSV_HEADER};
use nvsm::featext::ExtractorWeights;
use nvsm::geometry::{Camera, Pose};
use nvsm::io::{
    decode_checkpoint, decode_tensor, encode_checkpoint, encode_tensor, format_manifest, load_checkpoint, parse_manifest,
    read_tensor, Checkpoint, CheckpointConfig, Tensor,
};
use nvsm::matching::PseudoLabelSet;
use nvsm::mesh::VertexFeatureBank;
use nvsm::synthdata::Split;
use nvsm::training::{EmState, HistoryRow};

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn golden_bytes(name: &str) -> Vec<u8> {
    std::fs::read(golden(name)).unwrap()
}

#[test]
fn scalar_tensor_matches_golden() {
    let bytes = golden_bytes("scalar.nvst");
    assert_eq!(bytes.len(), 11);
    let mut out = Vec::new();
    encode_tensor(&Tensor::scalar(3.5), &mut out);
    assert_eq!(out, bytes);
    assert_eq!(read_tensor(&golden("scalar.nvst")).unwrap(), Tensor::scalar(3.5));
}

#[test]
fn matrix_tensor_matches_golden() {
    let t = Tensor::new(vec![2, 3], vec![0.5, -1.25, 2.0, 0.0, 1024.0, -0.0078125]).unwrap();
    let bytes = golden_bytes("tensor_2x3.nvst");
    let mut out = Vec::new();
    encode_tensor(&t, &mut out);
    assert_eq!(out, bytes);
    assert_eq!(decode_tensor(&bytes).unwrap(), t);
}

#[test]
fn manifest_matches_golden() {
    let text = String::from_utf8(golden_bytes("manifest.csv")).unwrap();
    let m = parse_manifest(&text).unwrap();
    assert_eq!(format_manifest(&m), text);
    let e = m.entries();
    assert_eq!(e.len(), 4);
    assert_eq!(m.split(Split::Labelled).count(), 2);
    assert!(e[2].pose.is_none());
    assert_eq!(e[3].occlusion_fraction, 0.3);
    let [az, el, ip] = e[3].pose.unwrap().to_degrees();
    assert!((az - 271.25).abs() < 1e-9 && (el - 3.5).abs() < 1e-9 && (ip + 7.125).abs() < 1e-9);
}

fn golden_checkpoint() -> Checkpoint {
    let params: Vec<f64> = (0..30).map(|k| 0.25 * k as f64 - 2.0).collect();
    let (mut w, mut b) = (Vec::new(), Vec::new());
    for row in params.chunks(15) {
        w.extend_from_slice(&row[..14]);
        b.push(row[14]);
    }
    let mask = vec![true, true, false, true, false, true, true, true];
    let rows: Vec<f64> = mask
        .iter()
        .enumerate()
        .flat_map(|(r, &m)| if m { [0.5 * r as f64 - 1.0, 0.125 * r as f64] } else { [0.0, 0.0] })
        .collect();
    let mut pseudo = PseudoLabelSet::new();
    pseudo.offer("u001", Pose::new(0.5, 0.25, -0.125).unwrap(), 0.75);
    pseudo.offer("u002", Pose::new(3.0, -0.5, 1.0).unwrap(), 0.5);
    Checkpoint {
        config: CheckpointConfig {
            camera: Camera::new(10.0, (16.0, 16.0), (32, 32), 4).unwrap(),
            mesh_dims: [1.5, 1.0, 0.5],
            mesh_subdivisions: 1,
            channels: 2,
            feature_stride: 4,
            seed: 9,
        },
        state: EmState {
            weights: ExtractorWeights::from_parts(w, b).unwrap(),
            bank: VertexFeatureBank::from_rows(rows, 2, mask).unwrap(),
            pseudo,
            completed: 2,
            history: vec![
                HistoryRow { iteration: 1, delta_range_deg: 10.0, pseudo_count: 2, mean_loss: 0.5, pseudo_precision: Some(1.0) },
                HistoryRow { iteration: 2, delta_range_deg: 20.0, pseudo_count: 2, mean_loss: 0.25, pseudo_precision: None },
            ],
        },
    }
}

#[test]
fn checkpoint_matches_golden() {
    let bytes = golden_bytes("checkpoint.nvsm");
    let ckpt = golden_checkpoint();
    assert_eq!(encode_checkpoint(&ckpt).unwrap(), bytes);
    assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
    assert_eq!(load_checkpoint(&golden("checkpoint.nvsm"), Some(&ckpt.config)).unwrap(), ckpt);
}

#[test]
fn tampered_mesh_dims_conflict() {
    let mut expected = golden_checkpoint().config;
    expected.mesh_dims[2] = 0.75;
    let err = load_checkpoint(&golden("checkpoint.nvsm"), Some(&expected)).unwrap_err();
    assert!(err.to_string().contains("mesh_dims"), "{err}");
}

#[test]
fn csv_headers_are_stable() {
    assert_eq!(EvalReport::CSV_HEADER, "band,count,acc_pi6,acc_pi18,median_error_deg");
    assert_eq!(HistoryRow::CSV_HEADER, "iteration,delta_range_deg,pseudo_count,mean_loss,pseudo_precision");
    assert_eq!(DIAGNOSTIC_CSV_HEADER, "offset_deg,mean_rotation_error_deg,top_k");
}
