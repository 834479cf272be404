//! Render-and-compare pose estimation: a coarse grid search over poses
//! followed by local coordinate ascent on the matching score.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featext::{extract, ExtractorWeights, Image};
use crate::geometry::{Camera, Pose};
use crate::matching::NormalizedMap;
use crate::mesh::{CuboidMesh, VertexFeatureBank};
use crate::raster::{render_feature_map, FeatureMap};

/// Pose grid of the coarse search: evenly spaced azimuths crossed with
/// explicit elevation and in-plane lists, radians.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub azimuths: usize,
    pub elevations: Vec<f64>,
    pub inplanes: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            azimuths: 24,
            elevations: [0.0, 7.5, 15.0, 22.5, 30.0].iter().map(|d: &f64| d.to_radians()).collect(),
            inplanes: [-10.0, 0.0, 10.0].iter().map(|d: &f64| d.to_radians()).collect(),
        }
    }
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.azimuths * self.elevations.len() * self.inplanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid poses, azimuth-major.
    pub fn poses(&self) -> Result<Vec<Pose>> {
        let mut out = Vec::with_capacity(self.len());
        for a in 0..self.azimuths {
            let az = std::f64::consts::TAU * a as f64 / self.azimuths as f64;
            for &el in &self.elevations {
                for &ip in &self.inplanes {
                    out.push(Pose::new(az, el, ip)?);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineOptions {
    pub max_steps: usize,
    /// Initial probe step per angle, radians.
    pub initial_step: f64,
    /// Refinement stops once the step falls below this, radians.
    pub min_step: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_steps: 100,
            initial_step: 2f64.to_radians(),
            min_step: 0.1f64.to_radians(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimateOptions {
    pub grid: GridSpec,
    pub refine: RefineOptions,
    /// Number of coarse-grid poses refined.
    pub top_k: usize,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            refine: RefineOptions::default(),
            top_k: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub score: f64,
    pub starts_evaluated: usize,
    pub refinement_steps: usize,
}

/// Scores candidate poses of one object model against a fixed target.
pub struct Scorer<'a> {
    target: NormalizedMap,
    grid: (usize, usize),
    mesh: &'a CuboidMesh,
    bank: &'a VertexFeatureBank,
    camera: &'a Camera,
}

impl<'a> Scorer<'a> {
    pub fn new(target: &FeatureMap, mesh: &'a CuboidMesh, bank: &'a VertexFeatureBank, camera: &'a Camera) -> Result<Self> {
        bank.check_matches(mesh)?;
        if target.channels() != bank.channels() {
            return Err(Error::invalid(format!(
                "target has {} channels, bank has {}",
                target.channels(),
                bank.channels()
            )));
        }
        Ok(Self {
            target: NormalizedMap::new(target),
            grid: target.grid(),
            mesh,
            bank,
            camera,
        })
    }

    pub fn score(&self, pose: &Pose) -> f64 {
        let rendered = render_feature_map(self.mesh, self.bank, pose, self.camera, self.grid)
            .expect("bank checked against mesh at construction");
        self.target.similarity(&NormalizedMap::new(&rendered))
    }
}

/// Every grid pose with its score, best first; ties keep grid order.
pub fn coarse_search(
    target: &FeatureMap,
    mesh: &CuboidMesh,
    bank: &VertexFeatureBank,
    camera: &Camera,
    grid_spec: &GridSpec,
) -> Result<Vec<(Pose, f64)>> {
    if grid_spec.is_empty() {
        return Err(Error::invalid("coarse search grid is empty"));
    }
    let scorer = Scorer::new(target, mesh, bank, camera)?;
    let mut ranked: Vec<(Pose, f64)> = grid_spec
        .poses()?
        .into_par_iter()
        .map(|p| (p, scorer.score(&p)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(ranked)
}

/// Coordinate ascent from `start`. Each step probes `±step` along every
/// angle; the central differences give an ascent direction, which is tried
/// alongside the six probes. The best candidate is taken if it improves the
/// score, otherwise the step halves.
pub fn refine(
    target: &FeatureMap,
    start: &Pose,
    mesh: &CuboidMesh,
    bank: &VertexFeatureBank,
    camera: &Camera,
    opts: &RefineOptions,
) -> Result<PoseEstimate> {
    let scorer = Scorer::new(target, mesh, bank, camera)?;
    Ok(refine_with(&scorer, start, scorer.score(start), opts))
}

fn refine_with(scorer: &Scorer<'_>, start: &Pose, start_score: f64, opts: &RefineOptions) -> PoseEstimate {
    let mut pose = *start;
    let mut score = start_score;
    let mut step = opts.initial_step;
    let mut steps = 0;
    while steps < opts.max_steps && step >= opts.min_step {
        steps += 1;
        let axis = |k: usize, d: f64| match k {
            0 => pose.offset(d, 0.0, 0.0),
            1 => pose.offset(0.0, d, 0.0),
            _ => pose.offset(0.0, 0.0, d),
        };
        let mut candidates = Vec::with_capacity(7);
        let mut grad = [0.0; 3];
        for (k, g) in grad.iter_mut().enumerate() {
            let (plus, minus) = (axis(k, step), axis(k, -step));
            let (sp, sm) = (scorer.score(&plus), scorer.score(&minus));
            *g = (sp - sm) / (2.0 * step);
            candidates.push((plus, sp));
            candidates.push((minus, sm));
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > 0.0 {
            let d: Vec<f64> = grad.iter().map(|g| step * g / norm).collect();
            let p = pose.offset(d[0], d[1], d[2]);
            candidates.push((p, scorer.score(&p)));
        }
        let best = candidates
            .into_iter()
            .fold(None::<(Pose, f64)>, |acc, c| match acc {
                Some(a) if a.1 >= c.1 => Some(a),
                _ => Some(c),
            })
            .expect("six probes always present");
        if best.1 > score {
            pose = best.0;
            score = best.1;
        } else {
            step *= 0.5;
        }
    }
    PoseEstimate {
        pose,
        score,
        starts_evaluated: 1,
        refinement_steps: steps,
    }
}

/// Coarse search then refinement of the `top_k` best grid poses, on an
/// already extracted feature map.
pub fn estimate_from_features(
    target: &FeatureMap,
    mesh: &CuboidMesh,
    bank: &VertexFeatureBank,
    camera: &Camera,
    opts: &EstimateOptions,
) -> Result<PoseEstimate> {
    if opts.top_k == 0 {
        return Err(Error::invalid("top_k must be positive"));
    }
    let ranked = coarse_search(target, mesh, bank, camera, &opts.grid)?;
    let scorer = Scorer::new(target, mesh, bank, camera)?;
    let starts = &ranked[..opts.top_k.min(ranked.len())];
    let refined: Vec<PoseEstimate> = starts
        .par_iter()
        .map(|(p, s)| refine_with(&scorer, p, *s, &opts.refine))
        .collect();
    let mut best = refined[0];
    for r in &refined[1..] {
        if r.score > best.score {
            best = *r;
        }
    }
    best.starts_evaluated = refined.len();
    best.refinement_steps = refined.iter().map(|r| r.refinement_steps).sum();
    Ok(best)
}

pub fn estimate_pose(
    target_image: &Image,
    weights: &ExtractorWeights,
    mesh: &CuboidMesh,
    bank: &VertexFeatureBank,
    camera: &Camera,
    opts: &EstimateOptions,
) -> Result<PoseEstimate> {
    let features = extract(target_image, weights, camera)?;
    estimate_from_features(&features, mesh, bank, camera, opts)
}
