//! Synthetic world: images of a textured cuboid under pose, appearance,
//! illumination, background and occlusion nuisances, with known poses.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featext::Image;
use crate::geometry::{rotation_from_pose, Camera, Pose};
use crate::mesh::{lattice_position, quad_triangles, side_lattice, validate_dims};
use crate::raster::{rasterize_triangles, to_screen};

/// Subdivisions of each side of the generator mesh.
pub const GENERATOR_SUBDIVISIONS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Noise,
    Gradient,
    Tiles,
    /// One of the other three, drawn per image.
    Mixed,
}

/// Uniform ranges of elevation and in-plane rotation, radians; azimuth is
/// always uniform over the full circle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseDistribution {
    pub elevation: (f64, f64),
    pub inplane: (f64, f64),
}

impl Default for PoseDistribution {
    fn default() -> Self {
        Self {
            elevation: (0.0, 30f64.to_radians()),
            inplane: (-10f64.to_radians(), 10f64.to_radians()),
        }
    }
}

impl PoseDistribution {
    pub fn median(&self) -> (f64, f64) {
        (
            0.5 * (self.elevation.0 + self.elevation.1),
            0.5 * (self.inplane.0 + self.inplane.1),
        )
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<Pose> {
        let az = rng.gen_range(0.0..TAU);
        let el = sample_range(rng, self.elevation);
        let ip = sample_range(rng, self.inplane);
        canonical_pose(az, el, ip)
    }
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Pose rounded to the micro-degree grid the manifest stores, so in-memory
/// and on-disk datasets agree exactly.
pub fn canonical_pose(az: f64, el: f64, ip: f64) -> Result<Pose> {
    let p = Pose::new(az, el, ip)?;
    let round = |r: f64| (r.to_degrees() * 1e6).round() / 1e6;
    let mut a = round(p.azimuth());
    if a >= 360.0 {
        a -= 360.0;
    }
    Pose::from_degrees(a, round(p.elevation()), round(p.inplane()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub object_dims: [f64; 3],
    pub texture_seed: u64,
    /// Relative per-channel jitter of the palette, per image.
    pub palette_jitter: f64,
    /// Range of the multiplicative illumination scale.
    pub illumination: (f64, f64),
    pub background: Background,
    /// Fraction of the object bounding box hidden in test images.
    pub occlusion_fraction: f64,
    pub pose_distribution: PoseDistribution,
    pub camera: Camera,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            object_dims: [2.0, 1.2, 1.4],
            texture_seed: 7,
            palette_jitter: 0.1,
            illumination: (0.8, 1.2),
            background: Background::Mixed,
            occlusion_fraction: 0.0,
            pose_distribution: PoseDistribution::default(),
            camera: Camera::new(32.0, (64.0, 64.0), (128, 128), 4).expect("valid default camera"),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        validate_dims(self.object_dims, GENERATOR_SUBDIVISIONS)?;
        self.camera.validate()?;
        if !(0.0..1.0).contains(&self.occlusion_fraction) {
            return Err(Error::invalid(format!(
                "occlusion fraction {} outside [0, 1)",
                self.occlusion_fraction
            )));
        }
        if !(self.palette_jitter >= 0.0 && self.palette_jitter < 1.0) {
            return Err(Error::invalid("palette jitter must lie in [0, 1)"));
        }
        let (lo, hi) = self.illumination;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid("illumination range must be positive and ordered"));
        }
        let d = &self.pose_distribution;
        for (lo, hi) in [d.elevation, d.inplane] {
            if !(lo.is_finite() && hi.is_finite() && hi >= lo) {
                return Err(Error::invalid("pose ranges must be finite and ordered"));
            }
        }
        if d.elevation.0 < -PI / 2.0 || d.elevation.1 > PI / 2.0 {
            return Err(Error::invalid("elevation range exceeds ±90°"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Labelled,
    Unlabelled,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Labelled => "labelled",
            Split::Unlabelled => "unlabelled",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "labelled" => Some(Split::Labelled),
            "unlabelled" => Some(Split::Unlabelled),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Image path relative to the dataset directory.
    pub path: String,
    pub pose: Option<Pose>,
    pub split: Split,
    pub occlusion_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut ids = std::collections::BTreeSet::new();
        for e in &entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::invalid(format!("duplicate image id {}", e.id)));
            }
            if e.split == Split::Labelled && e.pose.is_none() {
                return Err(Error::invalid(format!("labelled image {} has no pose", e.id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &ManifestEntry)> {
        self.entries.iter().enumerate().filter(move |(_, e)| e.split == split)
    }
}

/// Generated images alongside their manifest, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
}

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Independent random stream per (seed, image id, purpose).
fn stream(seed: u64, id: &str, purpose: u64) -> ChaCha8Rng {
    // FNV-1a keeps ids stable across platforms and toolchains.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h ^ purpose.rotate_left(56));
    rng
}

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Checker(usize),
    StripesA(usize),
    StripesB(usize),
}

impl Pattern {
    fn pick(&self, a: usize, b: usize) -> usize {
        match *self {
            Pattern::Checker(p) => (a / p + b / p) % 2,
            Pattern::StripesA(p) => (a / p) % 2,
            Pattern::StripesB(p) => (b / p) % 2,
        }
    }
}

/// Object identity: two colours and a pattern per side.
#[derive(Clone, Debug)]
struct Texture {
    palette: [[[f64; 3]; 2]; 6],
    patterns: [Pattern; 6],
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut palette = [[[0.0; 3]; 2]; 6];
        let mut patterns = [Pattern::Checker(1); 6];
        for side in 0..6 {
            for colour in palette[side].iter_mut() {
                for c in colour.iter_mut() {
                    *c = rng.gen_range(0.1..0.9);
                }
            }
            let period = rng.gen_range(1..=2);
            patterns[side] = match rng.gen_range(0..3) {
                0 => Pattern::Checker(period),
                1 => Pattern::StripesA(period),
                _ => Pattern::StripesB(period),
            };
        }
        Self { palette, patterns }
    }
}

/// Generator mesh: every triangle owns its three vertices, so colours stay
/// flat per triangle.
struct GeneratorMesh {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    /// Side and palette slot of each triangle.
    material: Vec<(usize, usize)>,
}

impl GeneratorMesh {
    fn new(dims: [f64; 3], texture: &Texture) -> Self {
        let n = GENERATOR_SUBDIVISIONS;
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        let mut material = Vec::new();
        for side in 0..6 {
            for a in 0..n {
                for b in 0..n {
                    let slot = texture.patterns[side].pick(a, b);
                    for tri in quad_triangles(a, b) {
                        let base = vertices.len();
                        for (ta, tb) in tri {
                            vertices.push(lattice_position(dims, n, side_lattice(side, n, ta, tb)));
                        }
                        faces.push([base, base + 1, base + 2]);
                        material.push((side, slot));
                    }
                }
            }
        }
        Self {
            vertices,
            faces,
            material,
        }
    }
}

const SIDE_NORMALS: [[f64; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
];

fn fill_background(image: &mut Image, kind: Background, rng: &mut ChaCha8Rng) {
    let (h, w) = (image.height(), image.width());
    let kind = match kind {
        Background::Mixed => [Background::Noise, Background::Gradient, Background::Tiles][rng.gen_range(0..3)],
        k => k,
    };
    let colour = |rng: &mut ChaCha8Rng| -> [f64; 3] { [rng.gen(), rng.gen(), rng.gen()] };
    match kind {
        Background::Noise => {
            for y in 0..h {
                for x in 0..w {
                    let c = colour(rng);
                    image.set_pixel(y, x, c);
                }
            }
        }
        Background::Gradient => {
            let (c0, c1) = (colour(rng), colour(rng));
            let angle = rng.gen_range(0.0..TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let span = (w as f64).hypot(h as f64);
            for y in 0..h {
                for x in 0..w {
                    let t = (((x as f64 - w as f64 / 2.0) * dx + (y as f64 - h as f64 / 2.0) * dy) / span + 0.5).clamp(0.0, 1.0);
                    image.set_pixel(y, x, std::array::from_fn(|k| (1.0 - t) * c0[k] + t * c1[k]));
                }
            }
        }
        _ => {
            let tile = rng.gen_range(8..=24);
            let (ty, tx) = (h.div_ceil(tile), w.div_ceil(tile));
            let colours: Vec<[f64; 3]> = (0..ty * tx).map(|_| colour(rng)).collect();
            for y in 0..h {
                for x in 0..w {
                    image.set_pixel(y, x, colours[(y / tile) * tx + x / tile]);
                }
            }
        }
    }
}

/// Object coverage mask of a generated image at `pose`, row-major.
pub fn object_silhouette(spec: &SceneSpec, pose: &Pose) -> Vec<bool> {
    let texture = Texture::new(spec.texture_seed);
    let mesh = GeneratorMesh::new(spec.object_dims, &texture);
    let cam = spec.camera.pixel_camera();
    let screen = to_screen(&mesh.vertices, &cam.projector(pose), &cam);
    let buf = rasterize_triangles(&screen, &mesh.faces, cam.grid());
    buf.face_id.iter().map(|&f| f >= 0).collect()
}

pub fn bounding_box(mask: &[bool], width: usize) -> Option<BoundingBox> {
    let mut bb: Option<BoundingBox> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (i / width, i % width);
        bb = Some(match bb {
            None => BoundingBox { x0: x, y0: y, x1: x + 1, y1: y + 1 },
            Some(b) => BoundingBox {
                x0: b.x0.min(x),
                y0: b.y0.min(y),
                x1: b.x1.max(x + 1),
                y1: b.y1.max(y + 1),
            },
        });
    }
    bb
}

/// Renders one sample: the textured object at `pose` over a background.
/// Returns the image and the object mask.
pub fn render_sample(spec: &SceneSpec, pose: &Pose, rng: &mut ChaCha8Rng) -> (Image, Vec<bool>) {
    let texture = Texture::new(spec.texture_seed);
    let mesh = GeneratorMesh::new(spec.object_dims, &texture);
    let cam = spec.camera.pixel_camera();
    let (h, w) = cam.grid();

    let mut palette = texture.palette;
    for side in palette.iter_mut() {
        for colour in side.iter_mut() {
            for c in colour.iter_mut() {
                *c *= 1.0 + rng.gen_range(-1.0..=1.0) * spec.palette_jitter;
            }
        }
    }
    let (lo, hi) = spec.illumination;
    let illumination = if hi > lo { rng.gen_range(lo..hi) } else { lo };

    let rotation = rotation_from_pose(pose);
    let light = Vector3::new(-0.4, 0.6, 1.0).normalize();
    let shading: Vec<f64> = SIDE_NORMALS
        .iter()
        .map(|n| {
            let n = rotation.apply(&Vector3::new(n[0], n[1], n[2]));
            illumination * (0.4 + 0.6 * n.dot(&light).max(0.0))
        })
        .collect();

    let mut image = Image::filled(h, w, [0.0; 3]);
    fill_background(&mut image, spec.background, rng);

    let screen = to_screen(&mesh.vertices, &cam.projector(pose), &cam);
    let buf = rasterize_triangles(&screen, &mesh.faces, (h, w));
    let mut mask = vec![false; h * w];
    for (idx, &fid) in buf.face_id.iter().enumerate() {
        if fid < 0 {
            continue;
        }
        let (side, slot) = mesh.material[fid as usize];
        let c = palette[side][slot];
        let s = shading[side];
        image.set_pixel(idx / w, idx % w, [c[0] * s, c[1] * s, c[2] * s]);
        mask[idx] = true;
    }
    (image, mask)
}

/// Pastes seeded random-texture rectangles inside `bbox` until exactly
/// `round(fraction · area)` of its pixels are covered.
pub fn occlude(image: &Image, fraction: f64, seed: u64, bbox: BoundingBox) -> Result<Image> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("occlusion fraction {fraction} outside [0, 1)")));
    }
    if bbox.x0 >= bbox.x1 || bbox.y0 >= bbox.y1 || bbox.x1 > image.width() || bbox.y1 > image.height() {
        return Err(Error::invalid(format!("bounding box {bbox:?} outside the image")));
    }
    let mut out = image.clone();
    let target = (fraction * bbox.area() as f64).round() as usize;
    if target == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (bw, bh) = (bbox.x1 - bbox.x0, bbox.y1 - bbox.y0);
    let mut covered = vec![false; bbox.area()];
    let mut count = 0;
    while count < target {
        let rw = rng.gen_range((bw / 5).max(1)..=(bw * 3 / 5).max(1));
        let rh = rng.gen_range((bh / 5).max(1)..=(bh * 3 / 5).max(1));
        let x0 = rng.gen_range(0..=bw - rw);
        let y0 = rng.gen_range(0..=bh - rh);
        let base: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                let grain: f64 = rng.gen_range(-0.15..0.15);
                let i = y * bw + x;
                if covered[i] || count == target {
                    continue;
                }
                covered[i] = true;
                count += 1;
                out.set_pixel(bbox.y0 + y, bbox.x0 + x, base.map(|c| (c + grain).clamp(0.0, 1.0)));
            }
        }
    }
    Ok(out)
}

fn make_sample(
    spec: &SceneSpec,
    seed: u64,
    id: &str,
    split: Split,
    pose: Pose,
) -> Result<(ManifestEntry, Image)> {
    let (mut image, mask) = render_sample(spec, &pose, &mut stream(seed, id, 1));
    let mut occlusion = 0.0;
    if split == Split::Test && spec.occlusion_fraction > 0.0 {
        if let Some(bbox) = bounding_box(&mask, image.width()) {
            let occ_seed = stream(seed, id, 2).gen();
            image = occlude(&image, spec.occlusion_fraction, occ_seed, bbox)?;
            occlusion = spec.occlusion_fraction;
        }
    }
    image.quantize_f32();
    let entry = ManifestEntry {
        id: id.to_string(),
        path: format!("images/{id}.nvst"),
        pose: Some(pose),
        split,
        occlusion_fraction: occlusion,
    };
    Ok((entry, image))
}

/// Azimuths evenly spread over the circle at the median elevation and
/// in-plane angle of the pose distribution.
pub fn labelled_poses(spec: &SceneSpec, n: usize) -> Result<Vec<Pose>> {
    let (el, ip) = spec.pose_distribution.median();
    (0..n).map(|k| Pose::new(TAU * k as f64 / n as f64, el, ip)).collect()
}

/// Generates `counts = (labelled, unlabelled, test)` images. Occluders are
/// only pasted into test images. Every sample draws from its own stream,
/// so a test image's pose and appearance do not depend on the occlusion
/// setting or on the other counts.
pub fn generate_dataset(spec: &SceneSpec, counts: (usize, usize, usize), seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let (nl, nu, nt) = counts;
    if nl == 0 || nu == 0 || nt == 0 {
        return Err(Error::invalid(format!("all split counts must be positive, got {counts:?}")));
    }
    let mut jobs: Vec<(String, Split, Option<Pose>)> = Vec::with_capacity(nl + nu + nt);
    for (k, p) in labelled_poses(spec, nl)?.into_iter().enumerate() {
        jobs.push((format!("labelled-{k:04}"), Split::Labelled, Some(p)));
    }
    jobs.extend((0..nu).map(|k| (format!("unlabelled-{k:04}"), Split::Unlabelled, None)));
    jobs.extend((0..nt).map(|k| (format!("test-{k:04}"), Split::Test, None)));

    let samples: Vec<(ManifestEntry, Image)> = jobs
        .par_iter()
        .map(|(id, split, pose)| {
            let pose = match pose {
                Some(p) => *p,
                None => spec.pose_distribution.sample(&mut stream(seed, id, 0))?,
            };
            make_sample(spec, seed, id, *split, pose)
        })
        .collect::<Result<_>>()?;
    let (entries, images): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
    Ok(Dataset {
        manifest: DatasetManifest::new(entries)?,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::make_cuboid;
    use crate::raster::rasterize;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            camera: Camera::new(16.0, (32.0, 32.0), (64, 64), 4).unwrap(),
            ..SceneSpec::default()
        }
    }

    #[test]
    fn labelled_azimuths_are_even() {
        let poses = labelled_poses(&SceneSpec::default(), 7).unwrap();
        for (k, p) in poses.iter().enumerate() {
            assert!((p.azimuth() - TAU * k as f64 / 7.0).abs() < 1e-9);
            assert!((p.elevation() - 15f64.to_radians()).abs() < 1e-12);
            assert_eq!(p.inplane(), 0.0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec { occlusion_fraction: 0.3, ..small_spec() };
        let a = generate_dataset(&spec, (3, 4, 3), 11).unwrap();
        let b = generate_dataset(&spec, (3, 4, 3), 11).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&spec, (3, 4, 3), 12).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn occlusion_does_not_move_test_poses() {
        let clean = generate_dataset(&small_spec(), (2, 2, 4), 5).unwrap();
        let occluded = generate_dataset(&SceneSpec { occlusion_fraction: 0.3, ..small_spec() }, (2, 2, 4), 5).unwrap();
        for ((a, ia), (b, ib)) in clean.manifest.split(Split::Test).zip(occluded.manifest.split(Split::Test)) {
            assert_eq!(ia.pose, ib.pose);
            assert_eq!(ia.occlusion_fraction, 0.0);
            assert_eq!(ib.occlusion_fraction, 0.3);
            assert_ne!(clean.images[a], occluded.images[b]);
        }
        for (i, e) in clean.manifest.split(Split::Unlabelled) {
            assert_eq!(clean.images[i], occluded.images[i], "{}", e.id);
        }
    }

    #[test]
    fn zero_occlusion_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (img, mask) = render_sample(&small_spec(), &Pose::identity(), &mut rng);
        let bb = bounding_box(&mask, 64).unwrap();
        assert_eq!(occlude(&img, 0.0, 3, bb).unwrap(), img);
        assert!(occlude(&img, 1.0, 3, bb).is_err());
    }

    #[test]
    fn occluded_pixel_count_matches_fraction() {
        let spec = small_spec();
        let pose = Pose::from_degrees(40.0, 20.0, 5.0).unwrap();
        let (img, mask) = render_sample(&spec, &pose, &mut ChaCha8Rng::seed_from_u64(2));
        let bb = bounding_box(&mask, 64).unwrap();
        for seed in 0..5 {
            let out = occlude(&img, 0.3, seed, bb).unwrap();
            let changed = (0..64 * 64).filter(|&i| out.pixel(i / 64, i % 64) != img.pixel(i / 64, i % 64)).count();
            let target = 0.3 * bb.area() as f64;
            assert!((changed as f64 - target).abs() <= 0.05 * target, "{changed} vs {target}");
            assert_eq!(out, occlude(&img, 0.3, seed, bb).unwrap());
        }
    }

    #[test]
    fn silhouette_matches_model_cuboid() {
        // The generator mesh and a coarse model cuboid of the same box
        // cover exactly the same pixels.
        let spec = small_spec();
        let model = make_cuboid(spec.object_dims, 4).unwrap();
        let cam = spec.camera.pixel_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let pose = spec.pose_distribution.sample(&mut rng).unwrap();
            let sil = object_silhouette(&spec, &pose);
            let buf = rasterize(&model, &pose, &cam, cam.grid());
            let inter = sil.iter().zip(&buf.face_id).filter(|(&s, &f)| s && f >= 0).count();
            let union = sil.iter().zip(&buf.face_id).filter(|(&s, &f)| s || f >= 0).count();
            assert_eq!(inter, union);
            let (_, mask) = render_sample(&spec, &pose, &mut rng);
            assert_eq!(mask, sil);
        }
    }

    #[test]
    fn pose_sampling_respects_ranges() {
        let d = PoseDistribution::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let p = d.sample(&mut rng).unwrap();
            assert!(p.elevation() >= 0.0 && p.elevation() <= 30f64.to_radians() + 1e-9);
            assert!(p.inplane().abs() <= 10f64.to_radians() + 1e-9);
            let deg = p.azimuth().to_degrees() * 1e6;
            assert!((deg - deg.round()).abs() < 1e-3);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(SceneSpec { occlusion_fraction: 1.0, ..SceneSpec::default() }.validate().is_err());
        assert!(SceneSpec { object_dims: [1.0, 0.0, 1.0], ..SceneSpec::default() }.validate().is_err());
        assert!(generate_dataset(&SceneSpec::default(), (0, 1, 1), 0).is_err());
    }
}
