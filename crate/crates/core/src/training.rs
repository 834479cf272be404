//! Contrastive training of the extractor and the EM-style alternation with
//! pseudo-labelling.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use log::{debug, info};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featext::{apply_head, backprop_weights, compute_raw_descriptors, ExtractorWeights, RawDescriptorMap};
use crate::geometry::{pose_error, Camera, Pose};
use crate::matching::{pseudo_label_step, MatchPool, PseudoLabelConfig, PseudoLabelSet, DEGENERATE_NORM};
use crate::mesh::{init_vertex_features, update_vertex_features, CuboidMesh, VertexFeatureBank};
use crate::raster::{render_feature_map, FeatureMap, SamplingPlan};
use crate::synthdata::{Dataset, Split};

/// Which pose angles the synthesised-view offsets sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OffsetAxes {
    #[default]
    Azimuth,
    /// Azimuth, elevation and in-plane offsets, one axis at a time.
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Moving-average rate of the vertex-feature update.
    pub alpha: f64,
    pub tau: f64,
    /// Spacing of synthesised-view offsets, radians.
    pub delta_step: f64,
    /// Growth of the offset range per outer iteration, radians.
    pub schedule_increment: f64,
    pub outer_iterations: usize,
    pub epochs_per_iteration: usize,
    pub pairs_per_step: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Weight λ of the negative (different-vertex) term.
    pub negative_weight: f64,
    pub per_view_cap: usize,
    pub step_cap: Option<usize>,
    pub offset_axes: OffsetAxes,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            tau: 0.18,
            delta_step: 10f64.to_radians(),
            schedule_increment: 10f64.to_radians(),
            outer_iterations: 12,
            epochs_per_iteration: 5,
            pairs_per_step: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            negative_weight: 0.1,
            per_view_cap: 5,
            step_cap: Some(50),
            offset_axes: OffsetAxes::Azimuth,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("delta_step", self.delta_step),
            ("schedule_increment", self.schedule_increment),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            // A zero learning rate is allowed: it freezes the extractor.
            let ok = if name == "learning_rate" { v >= 0.0 } else { v > 0.0 };
            if !(v.is_finite() && ok) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.beta1 < 1.0 && self.beta2 < 1.0) {
            return Err(Error::invalid("optimizer betas must be below 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha must lie in [0, 1]"));
        }
        if !(self.tau > -1.0 && self.tau <= 1.0) {
            return Err(Error::invalid("tau must lie in (-1, 1]"));
        }
        if !(self.negative_weight >= 0.0) {
            return Err(Error::invalid("negative_weight must be non-negative"));
        }
        if self.pairs_per_step == 0 || self.per_view_cap == 0 || self.step_cap == Some(0) {
            return Err(Error::invalid("pair and label caps must be positive"));
        }
        Ok(())
    }

    pub fn pseudo_label_config(&self) -> PseudoLabelConfig {
        PseudoLabelConfig {
            tau: self.tau,
            per_view_cap: self.per_view_cap,
            step_cap: self.step_cap,
        }
    }

    /// Offset range in effect at 1-based outer iteration `k`.
    pub fn delta_range(&self, k: usize) -> f64 {
        (k as f64 * self.schedule_increment).min(PI)
    }
}

/// Adaptive-moment optimiser state, one moment pair per extractor parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(weights: &ExtractorWeights) -> Self {
        Self {
            m: vec![0.0; weights.len()],
            v: vec![0.0; weights.len()],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, weights: &mut ExtractorWeights, grad: &ExtractorWeights, config: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        for (((p, g), m), v) in weights
            .params_mut()
            .zip(grad.params())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
}

/// Annotated images: ids with their ground-truth poses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelledSet {
    entries: Vec<(String, Pose)>,
}

impl LabelledSet {
    pub fn new(entries: Vec<(String, Pose)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (id, _) in &entries {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("duplicate labelled image id {id}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<String> {
        self.entries.iter().map(|(id, _)| id.clone()).collect()
    }
}

/// Loss value with its gradients with respect to both input maps.
#[derive(Clone, Debug)]
pub struct PairLoss {
    pub value: f64,
    pub grad_i: FeatureMap,
    pub grad_j: FeatureMap,
}

/// Vertex features sampled from one map, with unit directions and norms.
struct Sampled {
    unit: Vec<f64>,
    norm: Vec<f64>,
    visible: Vec<bool>,
    channels: usize,
}

impl Sampled {
    fn new(map: &FeatureMap, plan: &SamplingPlan) -> Self {
        let c = map.channels();
        let r_count = plan.vertex_count();
        let mut unit = vec![0.0; r_count * c];
        let mut norm = vec![0.0; r_count];
        let mut visible = vec![false; r_count];
        for r in 0..r_count {
            let row = &mut unit[r * c..(r + 1) * c];
            if plan.sample_into(map, r, row) {
                visible[r] = true;
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                norm[r] = n;
                if n >= DEGENERATE_NORM {
                    row.iter_mut().for_each(|x| *x /= n);
                } else {
                    row.iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        Self {
            unit,
            norm,
            visible,
            channels: c,
        }
    }

    fn unit(&self, r: usize) -> &[f64] {
        &self.unit[r * self.channels..(r + 1) * self.channels]
    }

    fn degenerate(&self, r: usize) -> bool {
        self.norm[r] < DEGENERATE_NORM
    }

    /// Gradient of `unit(r)·t` with respect to the raw sampled vector.
    fn dot_grad(&self, r: usize, t: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        if self.degenerate(r) {
            return;
        }
        let u = self.unit(r);
        let proj: f64 = u.iter().zip(t).map(|(a, b)| a * b).sum();
        let inv = 1.0 / self.norm[r];
        for k in 0..self.channels {
            out[k] = (t[k] - proj * u[k]) * inv;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Positive and negative contrastive terms of one image pair, with the
/// gradient of `positive_weight·L+ + negative_weight·L−`.
pub(crate) struct PairTerms {
    pub positive: f64,
    pub negative: f64,
    pub grad_i: FeatureMap,
    pub grad_j: FeatureMap,
}

pub(crate) fn pair_terms(
    fi: &FeatureMap,
    plan_i: &SamplingPlan,
    fj: &FeatureMap,
    plan_j: &SamplingPlan,
    positive_weight: f64,
    negative_weight: f64,
) -> PairTerms {
    let si = Sampled::new(fi, plan_i);
    let sj = Sampled::new(fj, plan_j);
    let c = fi.channels();
    let r_count = plan_i.vertex_count();
    let mut grad_i = FeatureMap::zeros(fi.height(), fi.width(), c);
    let mut grad_j = FeatureMap::zeros(fj.height(), fj.width(), c);

    let mut sum_i = vec![0.0; c];
    let mut sum_j = vec![0.0; c];
    for r in 0..r_count {
        if si.visible[r] {
            sum_i.iter_mut().zip(si.unit(r)).for_each(|(a, b)| *a += b);
        }
        if sj.visible[r] {
            sum_j.iter_mut().zip(sj.unit(r)).for_each(|(a, b)| *a += b);
        }
    }

    // L+ over mutually visible vertices; L− = A·B − Σ_{mutual} âᵣ·b̂ᵣ.
    let mut positive = 0.0;
    let mut mutual_dot = 0.0;
    for r in 0..r_count {
        if si.visible[r] && sj.visible[r] {
            let d = dot(si.unit(r), sj.unit(r));
            positive += 1.0 - d;
            mutual_dot += d;
        }
    }
    let negative = dot(&sum_i, &sum_j) - mutual_dot;

    let mut target = vec![0.0; c];
    let mut g = vec![0.0; c];
    for r in 0..r_count {
        if si.visible[r] {
            // d/da of  -w+·(âᵣ·b̂ᵣ)  +  w−·âᵣ·(B − [r∈Vj] b̂ᵣ)
            let mutual = sj.visible[r];
            for k in 0..c {
                let b = if mutual { sj.unit(r)[k] } else { 0.0 };
                target[k] = negative_weight * (sum_j[k] - b) - positive_weight * b;
            }
            si.dot_grad(r, &target, &mut g);
            plan_i.scatter(&mut grad_i, r, &g);
        }
        if sj.visible[r] {
            let mutual = si.visible[r];
            for k in 0..c {
                let a = if mutual { si.unit(r)[k] } else { 0.0 };
                target[k] = negative_weight * (sum_i[k] - a) - positive_weight * a;
            }
            sj.dot_grad(r, &target, &mut g);
            plan_j.scatter(&mut grad_j, r, &g);
        }
    }

    PairTerms {
        positive,
        negative,
        grad_i,
        grad_j,
    }
}

fn check_pair(fi: &FeatureMap, fj: &FeatureMap) -> Result<()> {
    if !fi.same_shape(fj) {
        return Err(Error::invalid("contrastive pair maps differ in shape"));
    }
    Ok(())
}

/// `Σ_r [1 − cos(fi(xᵣ), fj(xᵣ))]` over vertices visible in both images.
pub fn loss_positive(
    fi: &FeatureMap,
    fj: &FeatureMap,
    poses: (&Pose, &Pose),
    mesh: &CuboidMesh,
    camera: &Camera,
) -> Result<PairLoss> {
    check_pair(fi, fj)?;
    let pi = SamplingPlan::new(mesh, poses.0, camera, fi.grid());
    let pj = SamplingPlan::new(mesh, poses.1, camera, fj.grid());
    let t = pair_terms(fi, &pi, fj, &pj, 1.0, 0.0);
    Ok(PairLoss {
        value: t.positive,
        grad_i: t.grad_i,
        grad_j: t.grad_j,
    })
}

/// `Σ_r Σ_{r'≠r} cos(fi(xᵣ), fj(xᵣ'))` over vertices visible in their
/// respective images.
pub fn loss_negative(
    fi: &FeatureMap,
    fj: &FeatureMap,
    poses: (&Pose, &Pose),
    mesh: &CuboidMesh,
    camera: &Camera,
) -> Result<PairLoss> {
    check_pair(fi, fj)?;
    let pi = SamplingPlan::new(mesh, poses.0, camera, fi.grid());
    let pj = SamplingPlan::new(mesh, poses.1, camera, fj.grid());
    let t = pair_terms(fi, &pi, fj, &pj, 0.0, 1.0);
    Ok(PairLoss {
        value: t.negative,
        grad_i: t.grad_i,
        grad_j: t.grad_j,
    })
}

/// An image ready for training: its descriptors and the sampling plan of
/// its (annotated or pseudo-labelled) pose.
#[derive(Clone, Debug)]
pub struct TrainItem<'a> {
    pub raw: &'a RawDescriptorMap,
    pub plan: SamplingPlan,
}

impl<'a> TrainItem<'a> {
    pub fn new(raw: &'a RawDescriptorMap, pose: &Pose, mesh: &CuboidMesh, camera: &Camera) -> Self {
        Self {
            raw,
            plan: SamplingPlan::new(mesh, pose, camera, raw.grid()),
        }
    }
}

/// Combined loss `L+ + λ·L−` summed over `pairs` and its gradient with
/// respect to the extractor weights.
pub fn pairs_loss_and_grad(
    weights: &ExtractorWeights,
    items: &[TrainItem<'_>],
    pairs: &[(usize, usize)],
    negative_weight: f64,
) -> Result<(f64, ExtractorWeights)> {
    let mut involved: Vec<usize> = pairs.iter().flat_map(|&(i, j)| [i, j]).collect();
    involved.sort_unstable();
    involved.dedup();
    let maps: BTreeMap<usize, FeatureMap> = involved
        .par_iter()
        .map(|&i| (i, apply_head(items[i].raw, weights)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect();

    let per_pair: Vec<(f64, FeatureMap, FeatureMap)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let t = pair_terms(&maps[&i], &items[i].plan, &maps[&j], &items[j].plan, 1.0, negative_weight);
            (t.positive + negative_weight * t.negative, t.grad_i, t.grad_j)
        })
        .collect();

    // Deterministic reduction in pair order.
    let mut loss = 0.0;
    let mut grad_maps: BTreeMap<usize, FeatureMap> = BTreeMap::new();
    for (&(i, j), (l, gi, gj)) in pairs.iter().zip(per_pair) {
        loss += l;
        for (idx, g) in [(i, gi), (j, gj)] {
            match grad_maps.get_mut(&idx) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => {
                    grad_maps.insert(idx, g);
                }
            }
        }
    }
    let partials: Vec<ExtractorWeights> = grad_maps
        .par_iter()
        .map(|(&idx, g)| backprop_weights(items[idx].raw, g))
        .collect::<Result<_>>()?;
    let mut grad = ExtractorWeights::zeros(weights.channels());
    for p in &partials {
        grad.add_scaled(p, 1.0);
    }
    Ok((loss, grad))
}

/// Draws up to `count` distinct unordered pairs from `n` items.
fn sample_pairs(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let total = n * (n - 1) / 2;
    let picks = index::sample(rng, total, count.min(total)).into_vec();
    picks
        .into_iter()
        .map(|mut k| {
            // Row-major enumeration of i < j.
            let mut i = 0;
            while k >= n - 1 - i {
                k -= n - 1 - i;
                i += 1;
            }
            (i, i + 1 + k)
        })
        .collect()
}

/// One epoch: `⌈N / pairs_per_step⌉` optimiser steps, each over a fresh
/// random batch of distinct pairs. Returns the mean combined loss per pair.
pub fn train_epoch(
    weights: &mut ExtractorWeights,
    opt: &mut OptimizerState,
    items: &[TrainItem<'_>],
    config: &TrainConfig,
    epoch_seed: u64,
) -> Result<f64> {
    train_epoch_with(weights, opt, items, config, epoch_seed, |_, _| Ok(()))
}

/// [`train_epoch`], calling `after_step` with the updated weights and the
/// indices of the images in each step's batch.
pub fn train_epoch_with(
    weights: &mut ExtractorWeights,
    opt: &mut OptimizerState,
    items: &[TrainItem<'_>],
    config: &TrainConfig,
    epoch_seed: u64,
    mut after_step: impl FnMut(&ExtractorWeights, &[usize]) -> Result<()>,
) -> Result<f64> {
    if items.len() < 2 {
        return Err(Error::invalid(format!(
            "training needs at least 2 images, got {}",
            items.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let steps = items.len().div_ceil(config.pairs_per_step);
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..steps {
        let pairs = sample_pairs(items.len(), config.pairs_per_step, &mut rng);
        let (loss, mut grad) = pairs_loss_and_grad(weights, items, &pairs, config.negative_weight)?;
        let scale = 1.0 / pairs.len() as f64;
        grad.params_mut().for_each(|g| *g *= scale);
        opt.apply(weights, &grad, config);
        let mut batch: Vec<usize> = pairs.iter().flat_map(|&(i, j)| [i, j]).collect();
        batch.sort_unstable();
        batch.dedup();
        after_step(weights, &batch)?;
        total += loss;
        count += pairs.len();
    }
    Ok(total / count as f64)
}

/// An image available to the EM loop. Ground truth, when present, is only
/// used to score pseudo-label precision.
#[derive(Clone, Debug)]
pub struct EmImage {
    pub id: String,
    pub raw: RawDescriptorMap,
    pub ground_truth: Option<Pose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub delta_range_deg: f64,
    pub pseudo_count: usize,
    pub mean_loss: f64,
    /// Fraction of pseudo-labels within π/6 of ground truth, when known.
    pub pseudo_precision: Option<f64>,
}

impl HistoryRow {
    pub const CSV_HEADER: &'static str = "iteration,delta_range_deg,pseudo_count,mean_loss,pseudo_precision";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{},{:.6},{}",
            self.iteration,
            self.delta_range_deg,
            self.pseudo_count,
            self.mean_loss,
            self.pseudo_precision.map_or(String::new(), |p| format!("{p:.6}"))
        )
    }
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HistoryRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Everything the EM loop carries between outer iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct EmState {
    pub weights: ExtractorWeights,
    pub bank: VertexFeatureBank,
    pub pseudo: PseudoLabelSet,
    pub completed: usize,
    pub history: Vec<HistoryRow>,
}

/// Shared inputs of the EM loop.
pub struct EmContext<'a> {
    pub labelled: &'a LabelledSet,
    pub images: &'a [EmImage],
    pub mesh: &'a CuboidMesh,
    pub camera: &'a Camera,
    pub config: &'a TrainConfig,
    pub channels: usize,
    index: BTreeMap<&'a str, usize>,
}

impl<'a> EmContext<'a> {
    pub fn new(
        labelled: &'a LabelledSet,
        images: &'a [EmImage],
        mesh: &'a CuboidMesh,
        camera: &'a Camera,
        config: &'a TrainConfig,
        channels: usize,
    ) -> Result<Self> {
        config.validate()?;
        if labelled.is_empty() {
            return Err(Error::invalid("the EM loop needs at least one labelled image"));
        }
        let mut index = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            if index.insert(img.id.as_str(), i).is_some() {
                return Err(Error::invalid(format!("duplicate image id {}", img.id)));
            }
        }
        for (id, _) in labelled.entries() {
            if !index.contains_key(id.as_str()) {
                return Err(Error::invalid(format!("labelled image {id} missing from the pool")));
            }
        }
        Ok(Self {
            labelled,
            images,
            mesh,
            camera,
            config,
            channels,
            index,
        })
    }

    fn image(&self, id: &str) -> &'a EmImage {
        &self.images[self.index[id]]
    }

    /// Labelled entries followed by pseudo-labelled ones, in id order.
    fn training_poses(&self, pseudo: &PseudoLabelSet) -> Vec<(&'a EmImage, Pose)> {
        let mut out: Vec<(&EmImage, Pose)> = self
            .labelled
            .entries()
            .iter()
            .map(|(id, p)| (self.image(id), *p))
            .collect();
        out.extend(pseudo.iter().map(|(id, p, _)| (self.image(id), *p)));
        out
    }

    /// Seed-initialised extractor and the vertex bank averaged over the
    /// labelled images.
    pub fn init(&self) -> Result<EmState> {
        let mut weights = ExtractorWeights::init(self.channels, self.config.seed);
        weights.quantize_f32();
        let extracted: Vec<(FeatureMap, Pose)> = self
            .labelled
            .entries()
            .iter()
            .map(|(id, p)| (apply_head(&self.image(id).raw, &weights), *p))
            .collect();
        let mut bank = init_vertex_features(&extracted, self.mesh, self.camera)?;
        bank.quantize_f32();
        Ok(EmState {
            weights,
            bank,
            pseudo: PseudoLabelSet::new(),
            completed: 0,
            history: Vec::new(),
        })
    }

    /// Poses of the synthesised views for outer iteration `k`, deduplicated.
    pub fn view_poses(&self, pseudo: &PseudoLabelSet, k: usize) -> Vec<Pose> {
        let range = self.config.delta_range(k);
        let steps = (range / self.config.delta_step + 1e-9).floor() as i64;
        let mut anchors: Vec<Pose> = self.labelled.entries().iter().map(|(_, p)| *p).collect();
        anchors.extend(pseudo.iter().map(|(_, p, _)| *p));
        let key = |p: &Pose| {
            let q = |v: f64| (v * 1e9).round() as i64;
            (q(p.azimuth()), q(p.elevation()), q(p.inplane()))
        };
        let mut views = BTreeMap::new();
        for a in &anchors {
            for m in (-steps..=steps).filter(|&m| m != 0) {
                let d = m as f64 * self.config.delta_step;
                let mut candidates = vec![a.offset(d, 0.0, 0.0)];
                if self.config.offset_axes == OffsetAxes::All {
                    candidates.push(a.offset(0.0, d, 0.0));
                    candidates.push(a.offset(0.0, 0.0, d));
                }
                for p in candidates {
                    views.entry(key(&p)).or_insert(p);
                }
            }
        }
        views.into_values().collect()
    }

    fn precision(&self, pseudo: &PseudoLabelSet) -> Option<f64> {
        let judged: Vec<bool> = pseudo
            .iter()
            .filter_map(|(id, p, _)| self.image(id).ground_truth.map(|gt| pose_error(p, &gt) < PI / 6.0))
            .collect();
        if judged.is_empty() {
            None
        } else {
            Some(judged.iter().filter(|&&ok| ok).count() as f64 / judged.len() as f64)
        }
    }

    /// Runs outer iterations until `target` have completed in total.
    pub fn run_until(&self, mut state: EmState, target: usize) -> Result<EmState> {
        let labelled_ids = self.labelled.ids();
        let grid = self.camera.grid();
        while state.completed < target {
            let k = state.completed + 1;
            let config = self.config;

            // Synthesise views and pseudo-label the unlabelled pool.
            let views: Vec<(FeatureMap, Pose)> = self
                .view_poses(&state.pseudo, k)
                .par_iter()
                .map(|p| render_feature_map(self.mesh, &state.bank, p, self.camera, grid).map(|m| (m, *p)))
                .collect::<Result<_>>()?;
            let unlabelled: Vec<&EmImage> = self.images.iter().filter(|i| !labelled_ids.contains(&i.id)).collect();
            let maps: Vec<FeatureMap> = unlabelled.par_iter().map(|i| apply_head(&i.raw, &state.weights)).collect();
            let pool = MatchPool::new(unlabelled.iter().zip(&maps).map(|(i, m)| (i.id.as_str(), m)));
            state.pseudo = pseudo_label_step(&views, &pool, &labelled_ids, &config.pseudo_label_config(), &state.pseudo)?;
            debug!("iteration {k}: {} views, {} pseudo-labels", views.len(), state.pseudo.len());

            // Train the extractor on labelled ∪ pseudo-labelled images.
            let poses = self.training_poses(&state.pseudo);
            let items: Vec<TrainItem> = poses
                .par_iter()
                .map(|(img, p)| TrainItem::new(&img.raw, p, self.mesh, self.camera))
                .collect();
            // Moving-average bank update after every optimiser step.
            let mut mean_loss = f64::NAN;
            if items.len() >= 2 {
                let mut opt = OptimizerState::new(&state.weights);
                let mut bank = state.bank.clone();
                for e in 0..config.epochs_per_iteration {
                    let seed = config
                        .seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add((k as u64) << 20)
                        .wrapping_add(e as u64);
                    mean_loss = train_epoch_with(&mut state.weights, &mut opt, &items, config, seed, |w, idx| {
                        let batch: Vec<(FeatureMap, Pose)> =
                            idx.par_iter().map(|&i| (apply_head(&poses[i].0.raw, w), poses[i].1)).collect();
                        bank = update_vertex_features(&bank, &batch, config.alpha, self.mesh, self.camera)?;
                        Ok(())
                    })?;
                }
                state.bank = bank;
            } else {
                let batch: Vec<(FeatureMap, Pose)> =
                    poses.iter().map(|(img, p)| (apply_head(&img.raw, &state.weights), *p)).collect();
                state.bank = update_vertex_features(&state.bank, &batch, config.alpha, self.mesh, self.camera)?;
            }
            state.weights.quantize_f32();
            state.bank.quantize_f32();

            let row = HistoryRow {
                iteration: k,
                delta_range_deg: config.delta_range(k).to_degrees(),
                pseudo_count: state.pseudo.len(),
                mean_loss,
                pseudo_precision: self.precision(&state.pseudo),
            };
            info!(
                "iteration {k}: range {:.0}°, {} pseudo-labels, loss {:.4}, precision {:?}",
                row.delta_range_deg, row.pseudo_count, row.mean_loss, row.pseudo_precision
            );
            state.history.push(row);
            state.completed = k;
        }
        Ok(state)
    }
}

/// Full EM run from seed initialisation through `config.outer_iterations`.
pub fn run_em(
    labelled: &LabelledSet,
    images: &[EmImage],
    mesh: &CuboidMesh,
    camera: &Camera,
    config: &TrainConfig,
    channels: usize,
) -> Result<EmState> {
    let ctx = EmContext::new(labelled, images, mesh, camera, config, channels)?;
    let state = ctx.init()?;
    ctx.run_until(state, config.outer_iterations)
}

/// Labelled set and EM images (labelled and unlabelled splits) of a
/// dataset. Unlabelled ground truth is carried only for precision
/// reporting.
pub fn em_inputs(dataset: &Dataset, camera: &Camera) -> Result<(LabelledSet, Vec<EmImage>)> {
    let entries = dataset.manifest.entries();
    let picked: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].split != Split::Test).collect();
    let raws: Vec<RawDescriptorMap> = picked
        .par_iter()
        .map(|&i| compute_raw_descriptors(&dataset.images[i], camera.feature_stride))
        .collect::<Result<_>>()?;
    let mut labelled = Vec::new();
    let mut images = Vec::with_capacity(picked.len());
    for (&i, raw) in picked.iter().zip(raws) {
        let e = &entries[i];
        if e.split == Split::Labelled {
            let pose = e
                .pose
                .ok_or_else(|| Error::invalid(format!("labelled image {} has no pose", e.id)))?;
            labelled.push((e.id.clone(), pose));
        }
        images.push(EmImage {
            id: e.id.clone(),
            raw,
            ground_truth: e.pose,
        });
    }
    Ok((LabelledSet::new(labelled)?, images))
}
