//! Cuboid mesh and the per-vertex feature bank carried on it.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{Camera, Pose};
use crate::raster::{FeatureMap, SamplingPlan};

/// Axis-aligned cuboid centred at the origin, each side an `(n+1)×(n+1)`
/// vertex grid, triangles wound counter-clockwise when seen from outside.
#[derive(Clone, Debug, PartialEq)]
pub struct CuboidMesh {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    dims: [f64; 3],
    subdivisions: usize,
}

/// Lattice coordinates `(i, j, k) ∈ [0, n]³` of the grid point `(a, b)` on
/// side `side`. Sides are ordered +x, -x, +y, -y, +z, -z and parameterised
/// so that `∂/∂a × ∂/∂b` points outward.
pub(crate) fn side_lattice(side: usize, n: usize, a: usize, b: usize) -> [usize; 3] {
    match side {
        0 => [n, a, b],
        1 => [0, b, a],
        2 => [b, n, a],
        3 => [a, 0, b],
        4 => [a, b, n],
        5 => [b, a, 0],
        _ => unreachable!("a cuboid has six sides"),
    }
}

pub(crate) fn lattice_position(dims: [f64; 3], n: usize, l: [usize; 3]) -> Vector3<f64> {
    let nf = n as f64;
    Vector3::new(
        (l[0] as f64 / nf - 0.5) * dims[0],
        (l[1] as f64 / nf - 0.5) * dims[1],
        (l[2] as f64 / nf - 0.5) * dims[2],
    )
}

/// The two triangles of grid quad `(a, b)` as `(a, b)` grid corners.
pub(crate) fn quad_triangles(a: usize, b: usize) -> [[(usize, usize); 3]; 2] {
    [
        [(a, b), (a + 1, b), (a + 1, b + 1)],
        [(a, b), (a + 1, b + 1), (a, b + 1)],
    ]
}

pub(crate) fn validate_dims(dims: [f64; 3], n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("cuboid subdivisions must be at least 1"));
    }
    if dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Error::invalid(format!("cuboid dims must be positive, got {dims:?}")));
    }
    Ok(())
}

pub fn make_cuboid(dims: [f64; 3], subdivisions: usize) -> Result<CuboidMesh> {
    validate_dims(dims, subdivisions)?;
    let n = subdivisions;
    let mut index: HashMap<[usize; 3], usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::with_capacity(12 * n * n);

    for side in 0..6 {
        let mut id = |a: usize, b: usize| -> usize {
            let l = side_lattice(side, n, a, b);
            *index.entry(l).or_insert_with(|| {
                vertices.push(lattice_position(dims, n, l));
                vertices.len() - 1
            })
        };
        for a in 0..n {
            for b in 0..n {
                for tri in quad_triangles(a, b) {
                    faces.push([id(tri[0].0, tri[0].1), id(tri[1].0, tri[1].1), id(tri[2].0, tri[2].1)]);
                }
            }
        }
    }

    Ok(CuboidMesh {
        vertices,
        faces,
        dims,
        subdivisions,
    })
}

impl CuboidMesh {
    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn dims(&self) -> [f64; 3] {
        self.dims
    }

    pub fn subdivisions(&self) -> usize {
        self.subdivisions
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Closed-form vertex count `6(n+1)² − 12(n+1) + 8`.
    pub fn expected_vertex_count(n: usize) -> usize {
        let m = n + 1;
        6 * m * m + 8 - 12 * m
    }
}

/// Per-vertex feature vectors, row-major `R × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexFeatureBank {
    features: Vec<f64>,
    channels: usize,
    initialized: Vec<bool>,
}

impl VertexFeatureBank {
    pub fn zeros(vertex_count: usize, channels: usize) -> Self {
        Self {
            features: vec![0.0; vertex_count * channels],
            channels,
            initialized: vec![false; vertex_count],
        }
    }

    pub fn from_rows(features: Vec<f64>, channels: usize, initialized: Vec<bool>) -> Result<Self> {
        if channels == 0 || features.len() != initialized.len() * channels {
            return Err(Error::invalid(format!(
                "bank of {} values does not hold {} rows of {} channels",
                features.len(),
                initialized.len(),
                channels
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("bank entries must be finite"));
        }
        Ok(Self {
            features,
            channels,
            initialized,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn vertex_count(&self) -> usize {
        self.initialized.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.features[r * self.channels..(r + 1) * self.channels]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.features[r * self.channels..(r + 1) * self.channels]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// `false` for vertices that no image has observed yet.
    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }

    /// Rounds every entry through `f32`, matching what a checkpoint stores.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.features {
            *v = *v as f32 as f64;
        }
    }

    pub(crate) fn check_matches(&self, mesh: &CuboidMesh) -> Result<()> {
        if self.vertex_count() != mesh.vertex_count() {
            return Err(Error::invalid(format!(
                "bank has {} rows but mesh has {} vertices",
                self.vertex_count(),
                mesh.vertex_count()
            )));
        }
        Ok(())
    }
}

/// Per-vertex mean of the sampled features over the images in which the
/// vertex is visible, plus the number of contributing images.
fn visible_means(
    maps: &[(FeatureMap, Pose)],
    mesh: &CuboidMesh,
    camera: &Camera,
) -> Result<(Vec<f64>, Vec<usize>, usize)> {
    let channels = maps[0].0.channels();
    let r_count = mesh.vertex_count();
    let mut sums = vec![0.0; r_count * channels];
    let mut counts = vec![0usize; r_count];
    for (map, pose) in maps {
        if map.channels() != channels {
            return Err(Error::invalid("feature maps disagree on channel count"));
        }
        let plan = SamplingPlan::new(mesh, pose, camera, map.grid());
        for r in 0..r_count {
            if let Some(taps) = plan.taps(r) {
                counts[r] += 1;
                let row = &mut sums[r * channels..(r + 1) * channels];
                for &(cell, w) in taps {
                    for (acc, v) in row.iter_mut().zip(map.cell_at(cell)) {
                        *acc += w * v;
                    }
                }
            }
        }
    }
    for r in 0..r_count {
        if counts[r] > 0 {
            let inv = 1.0 / counts[r] as f64;
            sums[r * channels..(r + 1) * channels]
                .iter_mut()
                .for_each(|v| *v *= inv);
        }
    }
    Ok((sums, counts, channels))
}

/// Initial bank: mean of the features sampled at each vertex over the
/// annotated images where it is visible. Unseen vertices stay zero and are
/// flagged uninitialised.
pub fn init_vertex_features(
    extracted: &[(FeatureMap, Pose)],
    mesh: &CuboidMesh,
    camera: &Camera,
) -> Result<VertexFeatureBank> {
    if extracted.is_empty() {
        return Err(Error::invalid("cannot initialise a bank from zero images"));
    }
    let (features, counts, channels) = visible_means(extracted, mesh, camera)?;
    Ok(VertexFeatureBank {
        features,
        channels,
        initialized: counts.iter().map(|&c| c > 0).collect(),
    })
}

/// Moving-average update `σ ← (1−α)σ + α·mean`, restricted to vertices seen
/// in at least one image of the batch.
pub fn update_vertex_features(
    bank: &VertexFeatureBank,
    batch: &[(FeatureMap, Pose)],
    alpha: f64,
    mesh: &CuboidMesh,
    camera: &Camera,
) -> Result<VertexFeatureBank> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("moving-average rate {alpha} outside [0, 1]")));
    }
    bank.check_matches(mesh)?;
    let mut out = bank.clone();
    if batch.is_empty() {
        return Ok(out);
    }
    let (means, counts, channels) = visible_means(batch, mesh, camera)?;
    if channels != bank.channels {
        return Err(Error::invalid("batch channel count differs from bank"));
    }
    for (r, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let mean = &means[r * channels..(r + 1) * channels];
        for (s, m) in out.row_mut(r).iter_mut().zip(mean) {
            *s = (1.0 - alpha) * *s + alpha * m;
        }
        out.initialized[r] = true;
    }
    Ok(out)
}
