//! Trainable feature extractor: fixed patch descriptors followed by a
//! learnable affine map.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::raster::FeatureMap;

/// Raw descriptor width: mean RGB, std RGB and an 8-bin orientation
/// histogram.
pub const RAW_DIM: usize = 14;
pub const ORIENTATION_BINS: usize = 8;

/// RGB image, row-major `H × W × 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "image buffer of {} values does not match {height}×{width}×3",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Writes a pixel, clamping each channel into `[0, 1]`.
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for k in 0..3 {
            self.data[i + k] = rgb[k].clamp(0.0, 1.0);
        }
    }

    /// Rounds every value through `f32`, matching the on-disk precision.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    fn luminance(&self, y: usize, x: usize) -> f64 {
        let p = self.pixel(y, x);
        (p[0] + p[1] + p[2]) / 3.0
    }
}

/// Per-patch descriptors, `RAW_DIM` channels on the feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDescriptorMap(FeatureMap);

impl RawDescriptorMap {
    pub fn as_map(&self) -> &FeatureMap {
        &self.0
    }

    pub fn grid(&self) -> (usize, usize) {
        self.0.grid()
    }
}

pub fn compute_raw_descriptors(image: &Image, stride: usize) -> Result<RawDescriptorMap> {
    if stride == 0 || !image.height.is_multiple_of(stride) || !image.width.is_multiple_of(stride) {
        return Err(Error::invalid(format!(
            "image {}×{} is not divisible by stride {stride}",
            image.height, image.width
        )));
    }
    let (ih, iw) = (image.height, image.width);
    let (gh, gw) = (ih / stride, iw / stride);

    // Central-difference luminance gradients, replicated at the border.
    let mut magnitude = vec![0.0; ih * iw];
    let mut bin = vec![0usize; ih * iw];
    for y in 0..ih {
        for x in 0..iw {
            let gx = (image.luminance(y, (x + 1).min(iw - 1)) - image.luminance(y, x.saturating_sub(1))) / 2.0;
            let gy = (image.luminance((y + 1).min(ih - 1), x) - image.luminance(y.saturating_sub(1), x)) / 2.0;
            let m = gx.hypot(gy);
            magnitude[y * iw + x] = m;
            if m > 0.0 {
                let angle = gy.atan2(gx).rem_euclid(TAU);
                bin[y * iw + x] = ((angle / (TAU / ORIENTATION_BINS as f64)) as usize) % ORIENTATION_BINS;
            }
        }
    }

    let n = (stride * stride) as f64;
    let mut out = FeatureMap::zeros(gh, gw, RAW_DIM);
    for h in 0..gh {
        for w in 0..gw {
            let d = out.cell_mut(h, w);
            for y in h * stride..(h + 1) * stride {
                for x in w * stride..(w + 1) * stride {
                    let p = image.pixel(y, x);
                    for k in 0..3 {
                        d[k] += p[k];
                    }
                    let m = magnitude[y * iw + x];
                    if m > 0.0 {
                        d[6 + bin[y * iw + x]] += m;
                    }
                }
            }
            for k in 0..3 {
                d[k] /= n;
            }
            for y in h * stride..(h + 1) * stride {
                for x in w * stride..(w + 1) * stride {
                    let p = image.pixel(y, x);
                    for k in 0..3 {
                        d[3 + k] += (p[k] - d[k]).powi(2);
                    }
                }
            }
            for k in 3..6 {
                d[k] = (d[k] / n).sqrt();
            }
        }
    }
    Ok(RawDescriptorMap(out))
}

/// Affine head `feature = W·descriptor + b`, with `W` stored row-major
/// `C × RAW_DIM`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorWeights {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl ExtractorWeights {
    pub fn zeros(channels: usize) -> Self {
        Self {
            w: vec![0.0; channels * RAW_DIM],
            b: vec![0.0; channels],
        }
    }

    /// Uniform `[-1/√D0, 1/√D0]` weights and zero bias from `seed`.
    pub fn init(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (RAW_DIM as f64).sqrt();
        let w = (0..channels * RAW_DIM).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self {
            w,
            b: vec![0.0; channels],
        }
    }

    pub fn from_parts(w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if b.is_empty() || w.len() != b.len() * RAW_DIM {
            return Err(Error::invalid(format!(
                "weight matrix of {} values does not match {} channels × {RAW_DIM}",
                w.len(),
                b.len()
            )));
        }
        if w.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::invalid("extractor weights must be finite"));
        }
        Ok(Self { w, b })
    }

    pub fn channels(&self) -> usize {
        self.b.len()
    }

    pub fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    /// Flat view `[W..., b...]`, the order the optimiser walks.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().chain(self.b.iter_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().chain(self.b.iter())
    }

    pub fn quantize_f32(&mut self) {
        for v in self.params_mut() {
            *v = *v as f32 as f64;
        }
    }

    pub fn add_scaled(&mut self, other: &ExtractorWeights, scale: f64) {
        for (a, b) in self.params_mut().zip(other.params()) {
            *a += scale * b;
        }
    }
}

/// Applies the affine head to precomputed descriptors.
pub fn apply_head(raw: &RawDescriptorMap, weights: &ExtractorWeights) -> FeatureMap {
    let (h, w) = raw.grid();
    let c = weights.channels();
    let mut out = FeatureMap::zeros(h, w, c);
    for idx in 0..h * w {
        let d = raw.0.cell_at(idx);
        let f = out.cell_at_mut(idx);
        for (k, fk) in f.iter_mut().enumerate() {
            let row = &weights.w[k * RAW_DIM..(k + 1) * RAW_DIM];
            *fk = weights.b[k] + row.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

pub fn extract(image: &Image, weights: &ExtractorWeights, camera: &Camera) -> Result<FeatureMap> {
    if (image.width, image.height) != camera.image_size {
        return Err(Error::invalid(format!(
            "image {}×{} does not match camera image size {:?}",
            image.width, image.height, camera.image_size
        )));
    }
    let raw = compute_raw_descriptors(image, camera.feature_stride)?;
    Ok(apply_head(&raw, weights))
}

/// Gradient of a loss with respect to the head, given its gradient with
/// respect to the output feature map.
pub fn backprop_weights(raw: &RawDescriptorMap, grad_out: &FeatureMap) -> Result<ExtractorWeights> {
    if raw.grid() != grad_out.grid() {
        return Err(Error::invalid(format!(
            "gradient grid {:?} does not match descriptor grid {:?}",
            grad_out.grid(),
            raw.grid()
        )));
    }
    let c = grad_out.channels();
    let mut grad = ExtractorWeights::zeros(c);
    let (h, w) = raw.grid();
    for idx in 0..h * w {
        let g = grad_out.cell_at(idx);
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let d = raw.0.cell_at(idx);
        for (k, gk) in g.iter().enumerate() {
            grad.b[k] += gk;
            for (acc, dj) in grad.w[k * RAW_DIM..(k + 1) * RAW_DIM].iter_mut().zip(d) {
                *acc += gk * dj;
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn flat_patch() {
        let img = Image::filled(8, 8, [0.4, 0.4, 0.4]);
        let raw = compute_raw_descriptors(&img, 4).unwrap();
        for idx in 0..4 {
            let d = raw.as_map().cell_at(idx);
            assert!(d[..3].iter().all(|v| (v - 0.4).abs() < 1e-12));
            assert!(d[3..6].iter().all(|v| v.abs() < 1e-12));
            assert!(d[6..].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn vertical_edge_goes_to_horizontal_bins() {
        let mut img = Image::filled(8, 8, [0.1, 0.1, 0.1]);
        for y in 0..8 {
            for x in 2..8 {
                img.set_pixel(y, x, [0.9, 0.9, 0.9]);
            }
        }
        let raw = compute_raw_descriptors(&img, 4).unwrap();
        let d = raw.as_map().cell(0, 0);
        let hist = &d[6..];
        let total: f64 = hist.iter().sum();
        assert!(total > 0.0);
        assert!((hist[0] + hist[4]) / total > 0.99);
    }

    #[test]
    fn indivisible_size_rejected() {
        let img = Image::filled(6, 8, [0.0; 3]);
        assert!(compute_raw_descriptors(&img, 4).is_err());
    }

    #[test]
    fn descriptors_match_scalar_reference() {
        let img = random_image(12, 16, 3);
        let s = 4;
        let raw = compute_raw_descriptors(&img, s).unwrap();
        let lum = |y: i64, x: i64| {
            let y = y.clamp(0, 11) as usize;
            let x = x.clamp(0, 15) as usize;
            let p = img.pixel(y, x);
            (p[0] + p[1] + p[2]) / 3.0
        };
        for h in 0..3 {
            for w in 0..4 {
                let mut mean = [0.0; 3];
                let mut hist = [0.0; 8];
                let mut pixels = Vec::new();
                for y in h * s..(h + 1) * s {
                    for x in w * s..(w + 1) * s {
                        let p = img.pixel(y, x);
                        pixels.push(p);
                        let (yi, xi) = (y as i64, x as i64);
                        let gx = 0.5 * (lum(yi, xi + 1) - lum(yi, xi - 1));
                        let gy = 0.5 * (lum(yi + 1, xi) - lum(yi - 1, xi));
                        let mut a = gy.atan2(gx);
                        if a < 0.0 {
                            a += TAU;
                        }
                        let b = ((a / (TAU / 8.0)).floor() as usize).min(7);
                        hist[b] += (gx * gx + gy * gy).sqrt();
                    }
                }
                for p in &pixels {
                    for k in 0..3 {
                        mean[k] += p[k] / 16.0;
                    }
                }
                let d = raw.as_map().cell(h, w);
                for k in 0..3 {
                    let var: f64 = pixels.iter().map(|p| (p[k] - mean[k]).powi(2)).sum::<f64>() / 16.0;
                    assert!((d[k] - mean[k]).abs() < 1e-12);
                    assert!((d[3 + k] - var.sqrt()).abs() < 1e-12);
                }
                for k in 0..8 {
                    assert!((d[6 + k] - hist[k]).abs() < 1e-12, "bin {k}");
                }
            }
        }
    }

    #[test]
    fn descriptor_bounds_and_flip_invariance() {
        let img = random_image(8, 8, 9);
        let mut flipped = img.clone();
        for y in 0..8 {
            for x in 0..8 {
                flipped.set_pixel(y, x, img.pixel(y, 7 - x));
            }
        }
        let a = compute_raw_descriptors(&img, 8).unwrap();
        let b = compute_raw_descriptors(&flipped, 8).unwrap();
        let (da, db) = (a.as_map().cell(0, 0), b.as_map().cell(0, 0));
        for k in 0..6 {
            assert!((da[k] - db[k]).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&da[k]));
        }
        // Luminance differences are at most 1, so |∇| ≤ √2/2.
        let bound = 64.0 * std::f64::consts::SQRT_2 / 2.0;
        assert!(da[6..].iter().all(|v| *v >= 0.0 && *v <= bound));
    }

    fn camera() -> Camera {
        Camera::new(4.0, (8.0, 8.0), (16, 16), 4).unwrap()
    }

    #[test]
    fn identity_head_reproduces_descriptors() {
        let img = random_image(16, 16, 1);
        let c = RAW_DIM + 2;
        let mut weights = ExtractorWeights::zeros(c);
        for k in 0..RAW_DIM {
            weights.w[k * RAW_DIM + k] = 1.0;
        }
        let f = extract(&img, &weights, &camera()).unwrap();
        let raw = compute_raw_descriptors(&img, 4).unwrap();
        for idx in 0..16 {
            assert_eq!(&f.cell_at(idx)[..RAW_DIM], raw.as_map().cell_at(idx));
            assert_eq!(&f.cell_at(idx)[RAW_DIM..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn bias_only_head_is_constant() {
        let img = random_image(16, 16, 2);
        let mut weights = ExtractorWeights::zeros(3);
        weights.b = vec![1.0, -2.0, 0.5];
        let f = extract(&img, &weights, &camera()).unwrap();
        for idx in 0..16 {
            assert_eq!(f.cell_at(idx), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn random_head_matches_naive_product() {
        let img = random_image(16, 16, 4);
        let weights = ExtractorWeights::init(5, 11);
        let f = extract(&img, &weights, &camera()).unwrap();
        let raw = compute_raw_descriptors(&img, 4).unwrap();
        for idx in 0..16 {
            let d = raw.as_map().cell_at(idx);
            for k in 0..5 {
                let mut acc = weights.b[k];
                for j in 0..RAW_DIM {
                    acc += weights.w[k * RAW_DIM + j] * d[j];
                }
                assert!((f.cell_at(idx)[k] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extract_rejects_mismatched_image() {
        let img = random_image(8, 16, 4);
        assert!(extract(&img, &ExtractorWeights::zeros(2), &camera()).is_err());
    }

    #[test]
    fn backprop_cases() {
        let img = random_image(16, 16, 5);
        let raw = compute_raw_descriptors(&img, 4).unwrap();
        let zero = backprop_weights(&raw, &FeatureMap::zeros(4, 4, 3)).unwrap();
        assert!(zero.params().all(|v| *v == 0.0));

        let mut g = FeatureMap::zeros(4, 4, 3);
        g.cell_mut(2, 1).copy_from_slice(&[1.0, -0.5, 2.0]);
        let grad = backprop_weights(&raw, &g).unwrap();
        let d = raw.as_map().cell(2, 1);
        for k in 0..3 {
            assert_eq!(grad.b[k], g.cell(2, 1)[k]);
            for j in 0..RAW_DIM {
                assert!((grad.w[k * RAW_DIM + j] - g.cell(2, 1)[k] * d[j]).abs() < 1e-15);
            }
        }
        assert!(backprop_weights(&raw, &FeatureMap::zeros(3, 4, 3)).is_err());
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let img = random_image(16, 16, 6);
        let raw = compute_raw_descriptors(&img, 4).unwrap();
        let weights = ExtractorWeights::init(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let probe: Vec<f64> = (0..16 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let functional = |w: &ExtractorWeights| -> f64 {
            apply_head(&raw, w).data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let grad = backprop_weights(&raw, &FeatureMap::from_vec(4, 4, 3, probe.clone()).unwrap()).unwrap();
        let step = 1e-4;
        let analytic: Vec<f64> = grad.params().copied().collect();
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = weights.clone();
            let mut minus = weights.clone();
            *plus.params_mut().nth(i).unwrap() += step;
            *minus.params_mut().nth(i).unwrap() -= step;
            let fd = (functional(&plus) - functional(&minus)) / (2.0 * step);
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: fd {fd} analytic {a}");
        }
    }
}
