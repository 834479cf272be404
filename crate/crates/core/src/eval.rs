//! Accuracy metrics for pose estimates and the matching-quality diagnostic.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featext::{apply_head, ExtractorWeights, RawDescriptorMap};
use crate::geometry::{pose_error, Camera, Pose};
use crate::inference::{estimate_from_features, EstimateOptions, PoseEstimate};
use crate::matching::{retrieve_excluding, MatchPool, NormalizedMap};
use crate::mesh::{init_vertex_features, CuboidMesh, VertexFeatureBank};
use crate::raster::{render_feature_map, FeatureMap};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub count: usize,
    pub acc_pi6: f64,
    pub acc_pi18: f64,
    pub median_error_deg: f64,
}

impl Metrics {
    /// Metrics of geodesic errors in radians; `None` when empty.
    pub fn from_errors(errors: &[f64]) -> Option<Self> {
        if errors.is_empty() {
            return None;
        }
        let n = errors.len() as f64;
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        let median = if m % 2 == 1 {
            sorted[m / 2]
        } else {
            0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
        };
        Some(Self {
            count: m,
            acc_pi6: errors.iter().filter(|&&e| e < PI / 6.0).count() as f64 / n,
            acc_pi18: errors.iter().filter(|&&e| e < PI / 18.0).count() as f64 / n,
            median_error_deg: median.to_degrees(),
        })
    }
}

/// Occlusion bands of the per-band breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OcclusionBand {
    /// Fully visible.
    None,
    /// Fraction in (0, 0.3].
    Partial,
    /// Fraction in (0.3, 0.6].
    Large,
}

impl OcclusionBand {
    pub const ALL: [OcclusionBand; 3] = [OcclusionBand::None, OcclusionBand::Partial, OcclusionBand::Large];

    pub fn of(fraction: f64) -> Option<Self> {
        if fraction == 0.0 {
            Some(OcclusionBand::None)
        } else if fraction > 0.0 && fraction <= 0.3 {
            Some(OcclusionBand::Partial)
        } else if fraction > 0.3 && fraction <= 0.6 {
            Some(OcclusionBand::Large)
        } else {
            None
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            OcclusionBand::None => "0",
            OcclusionBand::Partial => "0-0.3",
            OcclusionBand::Large => "0.3-0.6",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub acc_pi6: f64,
    pub acc_pi18: f64,
    pub median_error: f64,
    pub overall: Metrics,
    pub per_occlusion_breakdown: Vec<(OcclusionBand, Option<Metrics>)>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "band,count,acc_pi6,acc_pi18,median_error_deg";

    pub fn to_csv(&self) -> String {
        let row = |label: &str, m: &Option<Metrics>| match m {
            Some(m) => format!(
                "{label},{},{:.6},{:.6},{:.6}\n",
                m.count, m.acc_pi6, m.acc_pi18, m.median_error_deg
            ),
            None => format!("{label},0,,,\n"),
        };
        let mut out = format!("{}\n", Self::CSV_HEADER);
        out.push_str(&row("all", &Some(self.overall)));
        for (band, m) in &self.per_occlusion_breakdown {
            out.push_str(&row(band.label(), m));
        }
        out
    }
}

/// Accuracy at π/6 and π/18 (strictly below the threshold) and median
/// geodesic error, overall and per occlusion band.
pub fn evaluate(estimates: &[(PoseEstimate, Pose, f64)]) -> Result<EvalReport> {
    let errors: Vec<f64> = estimates.iter().map(|(e, gt, _)| pose_error(&e.pose, gt)).collect();
    let overall = Metrics::from_errors(&errors).ok_or_else(|| Error::invalid("nothing to evaluate"))?;
    let per_occlusion_breakdown = OcclusionBand::ALL
        .iter()
        .map(|&band| {
            let errs: Vec<f64> = estimates
                .iter()
                .zip(&errors)
                .filter(|((_, _, occ), _)| OcclusionBand::of(*occ) == Some(band))
                .map(|(_, &e)| e)
                .collect();
            (band, Metrics::from_errors(&errs))
        })
        .collect();
    Ok(EvalReport {
        acc_pi6: overall.acc_pi6,
        acc_pi18: overall.acc_pi18,
        median_error: overall.median_error_deg,
        overall,
        per_occlusion_breakdown,
    })
}

/// Pose estimates for a batch of images, in input order.
pub fn estimate_all(
    raws: &[&RawDescriptorMap],
    weights: &ExtractorWeights,
    mesh: &CuboidMesh,
    bank: &VertexFeatureBank,
    camera: &Camera,
    opts: &EstimateOptions,
) -> Result<Vec<PoseEstimate>> {
    raws.par_iter()
        .map(|raw| estimate_from_features(&apply_head(raw, weights), mesh, bank, camera, opts))
        .collect()
}

/// An image with known pose for the diagnostic.
#[derive(Clone, Copy, Debug)]
pub struct PoolImage<'a> {
    pub id: &'a str,
    pub raw: &'a RawDescriptorMap,
    pub pose: Pose,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagnosticRow {
    pub offset_deg: f64,
    pub mean_rotation_error_deg: f64,
    pub top_k: usize,
}

pub const DIAGNOSTIC_CSV_HEADER: &str = "offset_deg,mean_rotation_error_deg,top_k";

pub fn diagnostic_csv(rows: &[DiagnosticRow]) -> String {
    let mut out = format!("{DIAGNOSTIC_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{:.6},{:.6},{}\n", r.offset_deg, r.mean_rotation_error_deg, r.top_k));
    }
    out
}

/// Match quality of synthesised views. Each anchor seeds a vertex bank
/// from its own features at its true pose; views rendered at azimuth
/// offsets `±d` retrieve the `top_k` best pool images, and the row for `d`
/// averages the geodesic error between the view pose and their true poses
/// over anchors and both signs. With `exclude_anchor`, an anchor never
/// retrieves itself.
pub fn diagnose_matching(
    weights: &ExtractorWeights,
    mesh: &CuboidMesh,
    camera: &Camera,
    anchors: &[PoolImage<'_>],
    pool: &[PoolImage<'_>],
    offsets_deg: &[f64],
    top_k: usize,
    exclude_anchor: bool,
) -> Result<Vec<DiagnosticRow>> {
    if anchors.is_empty() || pool.is_empty() || top_k == 0 {
        return Err(Error::invalid("diagnostic needs anchors, a non-empty pool and top_k ≥ 1"));
    }
    let maps: Vec<FeatureMap> = pool.par_iter().map(|p| apply_head(p.raw, weights)).collect();
    let match_pool = MatchPool::new(pool.iter().zip(&maps).map(|(p, m)| (p.id, m)));
    let truth: std::collections::BTreeMap<&str, Pose> = pool.iter().map(|p| (p.id, p.pose)).collect();

    let per_anchor: Vec<Vec<f64>> = anchors
        .par_iter()
        .map(|anchor| -> Result<Vec<f64>> {
            let features = apply_head(anchor.raw, weights);
            let bank = init_vertex_features(&[(features.clone(), anchor.pose)], mesh, camera)?;
            let excluded: BTreeSet<String> = if exclude_anchor {
                BTreeSet::from([anchor.id.to_string()])
            } else {
                BTreeSet::new()
            };
            offsets_deg
                .iter()
                .map(|&d| {
                    let signs: &[f64] = if d == 0.0 { &[1.0] } else { &[1.0, -1.0] };
                    let mut total = 0.0;
                    let mut count = 0usize;
                    for s in signs {
                        let view_pose = anchor.pose.offset(s * d.to_radians(), 0.0, 0.0);
                        let view = render_feature_map(mesh, &bank, &view_pose, camera, features.grid())?;
                        let view = NormalizedMap::new(&view);
                        for m in retrieve_excluding(&view, &view_pose, &match_pool, f64::NEG_INFINITY, top_k, &excluded)? {
                            total += pose_error(&view_pose, &truth[m.image_id.as_str()]);
                            count += 1;
                        }
                    }
                    if count == 0 {
                        return Err(Error::invalid(format!("nothing left to retrieve for anchor {}", anchor.id)));
                    }
                    Ok((total / count as f64).to_degrees())
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    Ok(offsets_deg
        .iter()
        .enumerate()
        .map(|(k, &d)| DiagnosticRow {
            offset_deg: d,
            mean_rotation_error_deg: per_anchor.iter().map(|r| r[k]).sum::<f64>() / anchors.len() as f64,
            top_k,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn est(pose: Pose) -> PoseEstimate {
        PoseEstimate {
            pose,
            score: 0.5,
            starts_evaluated: 3,
            refinement_steps: 10,
        }
    }

    #[test]
    fn perfect_predictor() {
        let p = Pose::from_degrees(30.0, 10.0, 0.0).unwrap();
        let r = evaluate(&[(est(p), p, 0.0), (est(p), p, 0.2)]).unwrap();
        assert_eq!((r.acc_pi6, r.acc_pi18), (1.0, 1.0));
        assert!(r.median_error.abs() < 1e-6);
    }

    #[test]
    fn twenty_degree_offsets_straddle_thresholds() {
        let recs: Vec<_> = (0..5)
            .map(|k| {
                let gt = Pose::from_degrees(70.0 * k as f64, 10.0, 0.0).unwrap();
                (est(gt.offset(20f64.to_radians(), 0.0, 0.0)), gt, 0.0)
            })
            .collect();
        let r = evaluate(&recs).unwrap();
        assert_eq!((r.acc_pi6, r.acc_pi18), (1.0, 0.0));
        assert!((r.median_error - 20.0).abs() < 1e-9);
    }

    #[test]
    fn even_count_median_and_bands() {
        let gt = Pose::identity();
        let recs: Vec<_> = [(5.0, 0.0), (15.0, 0.0), (40.0, 0.3), (50.0, 0.5)]
            .iter()
            .map(|&(deg, occ)| (est(Pose::from_degrees(deg, 0.0, 0.0).unwrap()), gt, occ))
            .collect();
        let r = evaluate(&recs).unwrap();
        assert!((r.median_error - 27.5).abs() < 1e-9);
        assert_eq!(r.acc_pi6, 0.5);
        assert_eq!(r.acc_pi18, 0.25);
        let bands: Vec<usize> = r.per_occlusion_breakdown.iter().map(|(_, m)| m.unwrap().count).collect();
        assert_eq!(bands, vec![2, 1, 1]);
        let csv = r.to_csv();
        assert!(csv.starts_with("band,count,acc_pi6,acc_pi18,median_error_deg\nall,4,0.500000,0.250000,27.500000\n"));
    }

    #[test]
    fn empty_is_rejected() {
        assert!(evaluate(&[]).is_err());
    }

    #[test]
    fn nested_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let recs: Vec<_> = (0..50)
            .map(|_| {
                let a = Pose::new(rng.gen_range(0.0..TAU), rng.gen_range(-1.0..1.0), rng.gen_range(-3.0..3.0)).unwrap();
                let b = Pose::new(rng.gen_range(0.0..TAU), rng.gen_range(-1.0..1.0), rng.gen_range(-3.0..3.0)).unwrap();
                (est(a), b, 0.0)
            })
            .collect();
        let r = evaluate(&recs).unwrap();
        assert!(r.acc_pi18 <= r.acc_pi6);
        assert!((0.0..=180.0).contains(&r.median_error));
    }

    #[test]
    fn diagnostic_self_match_at_zero_offset() {
        use crate::featext::{compute_raw_descriptors, ExtractorWeights};
        use crate::mesh::make_cuboid;
        use crate::synthdata::{generate_dataset, SceneSpec, Split};
        let spec = SceneSpec {
            camera: Camera::new(16.0, (32.0, 32.0), (64, 64), 4).unwrap(),
            ..SceneSpec::default()
        };
        let ds = generate_dataset(&spec, (1, 12, 1), 3).unwrap();
        let raws: Vec<_> = ds.images.iter().map(|i| compute_raw_descriptors(i, 4).unwrap()).collect();
        let pool: Vec<PoolImage> = ds
            .manifest
            .split(Split::Unlabelled)
            .map(|(i, e)| PoolImage { id: &e.id, raw: &raws[i], pose: e.pose.unwrap() })
            .collect();
        let mesh = make_cuboid(spec.object_dims, 3).unwrap();
        let w = ExtractorWeights::init(8, 1);
        let rows = diagnose_matching(&w, &mesh, &spec.camera, &pool[..4], &pool, &[0.0, 30.0], 1, false).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].mean_rotation_error_deg < 1e-6, "{rows:?}");
        let others = diagnose_matching(&w, &mesh, &spec.camera, &pool[..4], &pool, &[0.0], 1, true).unwrap();
        assert!(others[0].mean_rotation_error_deg > 1e-3);
        assert_eq!(
            diagnostic_csv(&rows).lines().next().unwrap(),
            "offset_deg,mean_rotation_error_deg,top_k"
        );
    }
}
