//! Spatial matching of synthesised views against image feature maps, and
//! threshold-based pose pseudo-labelling.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::raster::FeatureMap;

/// Norm below which a vector is treated as having no direction.
pub const DEGENERATE_NORM: f64 = 1e-8;

/// `1 − cos(u, v)`; vectors with norm below [`DEGENERATE_NORM`] have cosine 0.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    1.0 - cosine_similarity(u, v)
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> f64 {
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < DEGENERATE_NORM || nv < DEGENERATE_NORM {
        0.0
    } else {
        (dot / (nu * nv)).clamp(-1.0, 1.0)
    }
}

/// Mean over cells of `1 − d(fa, fb)`, in `[-1, 1]`.
pub fn similarity(fa: &FeatureMap, fb: &FeatureMap) -> Result<f64> {
    if !fa.same_shape(fb) {
        return Err(Error::invalid(format!(
            "cannot compare feature maps of shapes {:?}×{} and {:?}×{}",
            fa.grid(),
            fa.channels(),
            fb.grid(),
            fb.channels()
        )));
    }
    let cells = fa.height() * fa.width();
    let total: f64 = (0..cells)
        .map(|i| 1.0 - cosine_distance(fa.cell_at(i), fb.cell_at(i)))
        .sum();
    Ok(total / cells as f64)
}

/// A feature map with every cell scaled to unit length (degenerate cells
/// zeroed) so that similarity reduces to a sum of dot products.
#[derive(Clone, Debug)]
pub struct NormalizedMap {
    grid: (usize, usize),
    channels: usize,
    data: Vec<f64>,
    nonzero: Vec<usize>,
}

impl NormalizedMap {
    pub fn new(map: &FeatureMap) -> Self {
        let c = map.channels();
        let cells = map.height() * map.width();
        let mut data = vec![0.0; cells * c];
        let mut nonzero = Vec::new();
        for i in 0..cells {
            let v = map.cell_at(i);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm >= DEGENERATE_NORM {
                nonzero.push(i);
                for (o, x) in data[i * c..(i + 1) * c].iter_mut().zip(v) {
                    *o = x / norm;
                }
            }
        }
        Self {
            grid: map.grid(),
            channels: c,
            data,
            nonzero,
        }
    }

    fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    fn shape(&self) -> ((usize, usize), usize) {
        (self.grid, self.channels)
    }

    /// Same value as [`similarity`] up to rounding.
    pub fn similarity(&self, other: &NormalizedMap) -> f64 {
        let cells = (self.grid.0 * self.grid.1) as f64;
        let total: f64 = self
            .nonzero
            .iter()
            .map(|&i| {
                let dot: f64 = self.cell(i).iter().zip(other.cell(i)).map(|(a, b)| a * b).sum();
                dot.clamp(-1.0, 1.0)
            })
            .sum();
        total / cells
    }
}

/// Images available for retrieval, prepared once per extractor state.
#[derive(Clone, Debug, Default)]
pub struct MatchPool {
    entries: Vec<(String, NormalizedMap)>,
}

impl MatchPool {
    pub fn new<'a>(maps: impl IntoIterator<Item = (&'a str, &'a FeatureMap)>) -> Self {
        let items: Vec<(&str, &FeatureMap)> = maps.into_iter().collect();
        let entries = items
            .par_iter()
            .map(|(id, m)| (id.to_string(), NormalizedMap::new(m)))
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    /// Similarity of `view` against every pool image, in pool order.
    pub fn scores(&self, view: &NormalizedMap) -> Result<Vec<f64>> {
        if let Some((_, first)) = self.entries.first() {
            if first.shape() != view.shape() {
                return Err(Error::invalid("view and pool feature maps differ in shape"));
            }
        }
        Ok(self.entries.par_iter().map(|(_, m)| view.similarity(m)).collect())
    }
}

/// One retrieved image and the pose it would be labelled with.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub image_id: String,
    pub score: f64,
    pub assigned_pose: Pose,
}

fn rank(mut scored: Vec<(f64, &str)>, tau: f64, max_count: usize) -> Vec<(f64, &str)> {
    scored.retain(|(s, _)| *s > tau);
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.truncate(max_count);
    scored
}

/// Up to `max_count` pool images scoring strictly above `tau` against the
/// synthesised view, best first; ties go to the smaller id.
pub fn retrieve(
    view: &FeatureMap,
    view_pose: &Pose,
    pool: &MatchPool,
    tau: f64,
    max_count: usize,
) -> Result<Vec<MatchResult>> {
    retrieve_excluding(&NormalizedMap::new(view), view_pose, pool, tau, max_count, &BTreeSet::new())
}

pub(crate) fn retrieve_excluding(
    view: &NormalizedMap,
    view_pose: &Pose,
    pool: &MatchPool,
    tau: f64,
    max_count: usize,
    excluded: &BTreeSet<String>,
) -> Result<Vec<MatchResult>> {
    if max_count == 0 {
        return Err(Error::invalid("max_count must be at least 1"));
    }
    let scores = pool.scores(view)?;
    let scored = pool
        .entries
        .iter()
        .zip(scores)
        .filter(|((id, _), _)| !excluded.contains(id))
        .map(|((id, _), s)| (s, id.as_str()))
        .collect();
    Ok(rank(scored, tau, max_count)
        .into_iter()
        .map(|(score, id)| MatchResult {
            image_id: id.to_string(),
            score,
            assigned_pose: *view_pose,
        })
        .collect())
}

/// Pose pseudo-labels keyed by image id; at most one entry per image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelSet {
    entries: BTreeMap<String, (Pose, f64)>,
}

impl PseudoLabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&(Pose, f64)> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Pose, f64)> {
        self.entries.iter().map(|(id, (p, s))| (id.as_str(), p, *s))
    }

    /// Inserts unless the image already carries an equal or better score.
    /// Returns whether the set changed.
    pub fn offer(&mut self, id: &str, pose: Pose, score: f64) -> bool {
        match self.entries.get(id) {
            Some((_, old)) if *old >= score => false,
            _ => {
                self.entries.insert(id.to_string(), (pose, score));
                true
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoLabelConfig {
    pub tau: f64,
    pub per_view_cap: usize,
    /// Maximum number of labels created or replaced in one step; `None`
    /// leaves the step uncapped.
    pub step_cap: Option<usize>,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            per_view_cap: 5,
            step_cap: Some(50),
        }
    }
}

/// One round of pseudo-labelling. Each synthesised view claims its best
/// matches above `tau`; an image claimed several times (or already
/// labelled) keeps the highest-scoring pose. Images in `labelled` are never
/// pseudo-labelled.
pub fn pseudo_label_step(
    views: &[(FeatureMap, Pose)],
    pool: &MatchPool,
    labelled: &BTreeSet<String>,
    config: &PseudoLabelConfig,
    existing: &PseudoLabelSet,
) -> Result<PseudoLabelSet> {
    if config.per_view_cap == 0 || config.step_cap == Some(0) {
        return Err(Error::invalid("pseudo-label caps must be positive"));
    }
    let prepared: Vec<(NormalizedMap, Pose)> = views.iter().map(|(m, p)| (NormalizedMap::new(m), *p)).collect();
    let per_view: Vec<Vec<MatchResult>> = prepared
        .iter()
        .map(|(m, p)| retrieve_excluding(m, p, pool, config.tau, config.per_view_cap, labelled))
        .collect::<Result<_>>()?;

    // Best claim per image; earlier views win exact ties.
    let mut claims: BTreeMap<&str, (f64, Pose)> = BTreeMap::new();
    for m in per_view.iter().flatten() {
        match claims.get(m.image_id.as_str()) {
            Some((s, _)) if *s >= m.score => {}
            _ => {
                claims.insert(&m.image_id, (m.score, m.assigned_pose));
            }
        }
    }

    let mut improving: Vec<(f64, &str, Pose)> = claims
        .into_iter()
        .filter(|(id, (s, _))| existing.get(id).is_none_or(|(_, old)| s > old))
        .map(|(id, (s, p))| (s, id, p))
        .collect();
    improving.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    if let Some(cap) = config.step_cap {
        improving.truncate(cap);
    }

    let mut out = existing.clone();
    for (score, id, pose) in improving {
        out.offer(id, pose, score);
    }
    Ok(out)
}
