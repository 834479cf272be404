//! Feature-map rasterisation of the cuboid mesh, vertex visibility and
//! per-vertex sampling of dense feature maps.
//!
//! Feature-grid cell `(h, w)` covers the pixel centred at
//! `((w + 0.5)·s_f, (h + 0.5)·s_f)`; in continuous cell coordinates the cell
//! centres sit on the integers. Coverage is decided at cell centres with a
//! z-buffer that keeps the largest interpolated depth.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{Camera, Pose, Projector};
use crate::mesh::{CuboidMesh, VertexFeatureBank};

/// Dense `H × W × C` grid of feature vectors, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("feature map dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "feature map data has {} values, expected {}×{}×{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn cell(&self, h: usize, w: usize) -> &[f64] {
        self.cell_at(h * self.width + w)
    }

    pub fn cell_mut(&mut self, h: usize, w: usize) -> &mut [f64] {
        self.cell_at_mut(h * self.width + w)
    }

    /// Cell by flat index `h·W + w`.
    pub fn cell_at(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn cell_at_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Per-cell z-buffer state produced by [`rasterize`].
#[derive(Clone, Debug, PartialEq)]
pub struct RasterBuffers {
    pub height: usize,
    pub width: usize,
    /// Interpolated depth of the winning triangle, `-inf` where empty.
    pub depth: Vec<f64>,
    /// Winning triangle index, `-1` where empty.
    pub face_id: Vec<i32>,
    /// Barycentric coordinates of the cell centre in the winning triangle,
    /// ordered like the triangle's vertex indices.
    pub barycentric: Vec<[f64; 3]>,
}

impl RasterBuffers {
    fn empty(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            depth: vec![f64::NEG_INFINITY; n],
            face_id: vec![-1; n],
            barycentric: vec![[0.0; 3]; n],
        }
    }

    pub fn covered(&self, idx: usize) -> bool {
        self.face_id[idx] >= 0
    }

    pub fn covered_count(&self) -> usize {
        self.face_id.iter().filter(|&&f| f >= 0).count()
    }
}

/// A vertex mapped to continuous cell coordinates.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ScreenVertex {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

pub(crate) fn to_screen(vertices: &[Vector3<f64>], projector: &Projector, camera: &Camera) -> Vec<ScreenVertex> {
    vertices
        .iter()
        .map(|x| {
            let p = projector.project(x);
            let (cx, cy) = camera.pixel_to_cell(p.u, p.v);
            ScreenVertex {
                x: cx,
                y: cy,
                depth: p.depth,
            }
        })
        .collect()
}

const MIN_TRIANGLE_AREA: f64 = 1e-12;

/// Twice the signed area in cell coordinates (`y` pointing down). Triangles
/// that are counter-clockwise in the camera plane (`y` up), i.e. facing the
/// viewer, come out negative.
#[inline]
fn signed_area2(a: &ScreenVertex, b: &ScreenVertex, c: &ScreenVertex) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y)
}

#[inline]
fn edge(a: &ScreenVertex, b: &ScreenVertex, px: f64, py: f64) -> f64 {
    (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x)
}

/// Whether the directed edge `a → b` of a front-facing triangle owns cell
/// centres lying exactly on it. The rule is antisymmetric, so an edge shared
/// by two front faces is owned by exactly one of them.
#[inline]
fn owns_edge(a: &ScreenVertex, b: &ScreenVertex) -> bool {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

/// Z-buffered rasterisation of an arbitrary triangle list.
pub(crate) fn rasterize_triangles(
    screen: &[ScreenVertex],
    faces: &[[usize; 3]],
    grid: (usize, usize),
) -> RasterBuffers {
    let (height, width) = grid;
    let mut buf = RasterBuffers::empty(height, width);
    if height == 0 || width == 0 {
        return buf;
    }
    for (fid, f) in faces.iter().enumerate() {
        let (a, b, c) = (&screen[f[0]], &screen[f[1]], &screen[f[2]]);
        let area2 = signed_area2(a, b, c);
        // Back-facing or degenerate.
        if area2 > -2.0 * MIN_TRIANGLE_AREA {
            continue;
        }
        let min_x = a.x.min(b.x).min(c.x).ceil().max(0.0);
        let max_x = a.x.max(b.x).max(c.x).floor().min((width - 1) as f64);
        let min_y = a.y.min(b.y).min(c.y).ceil().max(0.0);
        let max_y = a.y.max(b.y).max(c.y).floor().min((height - 1) as f64);
        if min_x > max_x || min_y > max_y {
            continue;
        }
        // Edge i is opposite vertex i; every edge weight is ≤ 0 inside.
        let owns = [owns_edge(b, c), owns_edge(c, a), owns_edge(a, b)];
        let inv = 1.0 / area2;
        for h in min_y as usize..=max_y as usize {
            let py = h as f64;
            for w in min_x as usize..=max_x as usize {
                let px = w as f64;
                let e = [edge(b, c, px, py), edge(c, a, px, py), edge(a, b, px, py)];
                let inside = (0..3).all(|i| e[i] < 0.0 || (e[i] == 0.0 && owns[i]));
                if !inside {
                    continue;
                }
                let l = [e[0] * inv, e[1] * inv, e[2] * inv];
                let z = l[0] * a.depth + l[1] * b.depth + l[2] * c.depth;
                let idx = h * width + w;
                if z > buf.depth[idx] {
                    buf.depth[idx] = z;
                    buf.face_id[idx] = fid as i32;
                    buf.barycentric[idx] = l;
                }
            }
        }
    }
    buf
}

/// Interpolates per-vertex attributes (`R × C`, row-major) over the covered
/// cells; empty cells are zero.
pub(crate) fn shade(buf: &RasterBuffers, faces: &[[usize; 3]], attrs: &[f64], channels: usize) -> FeatureMap {
    let mut out = FeatureMap::zeros(buf.height, buf.width, channels);
    for idx in 0..buf.height * buf.width {
        let fid = buf.face_id[idx];
        if fid < 0 {
            continue;
        }
        let f = &faces[fid as usize];
        let l = buf.barycentric[idx];
        let cell = out.cell_at_mut(idx);
        for k in 0..3 {
            let row = &attrs[f[k] * channels..(f[k] + 1) * channels];
            let wk = l[k];
            for (o, v) in cell.iter_mut().zip(row) {
                *o += wk * v;
            }
        }
    }
    out
}

pub fn rasterize(mesh: &CuboidMesh, pose: &Pose, camera: &Camera, grid: (usize, usize)) -> RasterBuffers {
    let screen = to_screen(mesh.vertices(), &camera.projector(pose), camera);
    rasterize_triangles(&screen, mesh.faces(), grid)
}

/// Synthesises the feature map of the mesh at `pose`: barycentric blend of
/// vertex features on covered cells, zero elsewhere.
pub fn render_feature_map(
    mesh: &CuboidMesh,
    bank: &VertexFeatureBank,
    pose: &Pose,
    camera: &Camera,
    grid: (usize, usize),
) -> Result<FeatureMap> {
    bank.check_matches(mesh)?;
    let buf = rasterize(mesh, pose, camera, grid);
    Ok(shade(&buf, mesh.faces(), bank.features(), bank.channels()))
}

/// Maximum vertex depth deficit still counted as visible.
pub const VISIBILITY_EPSILON: f64 = 1e-4;

const CONTAINMENT_TOLERANCE: f64 = 1e-9;

fn inside_grid(v: &ScreenVertex, grid: (usize, usize)) -> bool {
    v.x >= -0.5 && v.x < grid.1 as f64 - 0.5 && v.y >= -0.5 && v.y < grid.0 as f64 - 0.5
}

/// Depth of the front-most front-facing surface at the exact position of
/// `p`, if any triangle covers it.
fn surface_depth(screen: &[ScreenVertex], faces: &[[usize; 3]], p: &ScreenVertex) -> Option<f64> {
    let mut best: Option<f64> = None;
    for f in faces {
        let (a, b, c) = (&screen[f[0]], &screen[f[1]], &screen[f[2]]);
        let area2 = signed_area2(a, b, c);
        if area2 > -2.0 * MIN_TRIANGLE_AREA {
            continue;
        }
        if p.x < a.x.min(b.x).min(c.x) - 1e-9
            || p.x > a.x.max(b.x).max(c.x) + 1e-9
            || p.y < a.y.min(b.y).min(c.y) - 1e-9
            || p.y > a.y.max(b.y).max(c.y) + 1e-9
        {
            continue;
        }
        let inv = 1.0 / area2;
        let l = [
            edge(b, c, p.x, p.y) * inv,
            edge(c, a, p.x, p.y) * inv,
            edge(a, b, p.x, p.y) * inv,
        ];
        if l.iter().all(|&li| li >= -CONTAINMENT_TOLERANCE) {
            let z = l[0] * a.depth + l[1] * b.depth + l[2] * c.depth;
            best = Some(best.map_or(z, |d: f64| d.max(z)));
        }
    }
    best
}

fn visibility_from_screen(screen: &[ScreenVertex], faces: &[[usize; 3]], grid: (usize, usize)) -> Vec<bool> {
    screen
        .iter()
        .map(|v| {
            inside_grid(v, grid)
                && surface_depth(screen, faces, v).is_none_or(|d| v.depth >= d - VISIBILITY_EPSILON)
        })
        .collect()
}

/// Vertex visibility: the vertex projects inside the grid and no front
/// surface lies more than [`VISIBILITY_EPSILON`] in front of it.
pub fn visible_vertices(mesh: &CuboidMesh, pose: &Pose, camera: &Camera, grid: (usize, usize)) -> Vec<bool> {
    let screen = to_screen(mesh.vertices(), &camera.projector(pose), camera);
    visibility_from_screen(&screen, mesh.faces(), grid)
}

/// How a vertex reads a value off a feature map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SampleMode {
    #[default]
    Bilinear,
    Nearest,
}

pub(crate) type Taps = [(usize, f64); 4];

/// Visibility and interpolation taps of every vertex for one pose; sampling
/// and its adjoint (scattering gradients back onto cells) share it.
#[derive(Clone, Debug)]
pub struct SamplingPlan {
    taps: Vec<Option<Taps>>,
    grid: (usize, usize),
}

fn bilinear_taps(x: f64, y: f64, grid: (usize, usize)) -> Taps {
    let (h, w) = grid;
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let clamp_x = |v: f64| v.max(0.0).min((w - 1) as f64) as usize;
    let clamp_y = |v: f64| v.max(0.0).min((h - 1) as f64) as usize;
    let (xa, xb) = (clamp_x(x0), clamp_x(x0 + 1.0));
    let (ya, yb) = (clamp_y(y0), clamp_y(y0 + 1.0));
    [
        (ya * w + xa, (1.0 - fx) * (1.0 - fy)),
        (ya * w + xb, fx * (1.0 - fy)),
        (yb * w + xa, (1.0 - fx) * fy),
        (yb * w + xb, fx * fy),
    ]
}

fn nearest_taps(x: f64, y: f64, grid: (usize, usize)) -> Taps {
    let (h, w) = grid;
    let xi = x.round().max(0.0).min((w - 1) as f64) as usize;
    let yi = y.round().max(0.0).min((h - 1) as f64) as usize;
    [(yi * w + xi, 1.0), (0, 0.0), (0, 0.0), (0, 0.0)]
}

impl SamplingPlan {
    pub fn new(mesh: &CuboidMesh, pose: &Pose, camera: &Camera, grid: (usize, usize)) -> Self {
        Self::with_mode(mesh, pose, camera, grid, SampleMode::Bilinear)
    }

    pub fn with_mode(mesh: &CuboidMesh, pose: &Pose, camera: &Camera, grid: (usize, usize), mode: SampleMode) -> Self {
        let screen = to_screen(mesh.vertices(), &camera.projector(pose), camera);
        let visible = visibility_from_screen(&screen, mesh.faces(), grid);
        let taps = screen
            .iter()
            .zip(&visible)
            .map(|(v, &vis)| {
                vis.then(|| match mode {
                    SampleMode::Bilinear => bilinear_taps(v.x, v.y, grid),
                    SampleMode::Nearest => nearest_taps(v.x, v.y, grid),
                })
            })
            .collect();
        Self { taps, grid }
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn vertex_count(&self) -> usize {
        self.taps.len()
    }

    pub fn is_visible(&self, r: usize) -> bool {
        self.taps[r].is_some()
    }

    pub fn visibility(&self) -> Vec<bool> {
        self.taps.iter().map(Option::is_some).collect()
    }

    pub(crate) fn taps(&self, r: usize) -> Option<&Taps> {
        self.taps[r].as_ref()
    }

    /// Writes the sampled feature of vertex `r` into `out`; returns `false`
    /// (leaving `out` zeroed) when the vertex is not visible.
    pub fn sample_into(&self, map: &FeatureMap, r: usize, out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|v| *v = 0.0);
        match &self.taps[r] {
            None => false,
            Some(taps) => {
                for &(cell, w) in taps {
                    if w != 0.0 {
                        for (o, v) in out.iter_mut().zip(map.cell_at(cell)) {
                            *o += w * v;
                        }
                    }
                }
                true
            }
        }
    }

    /// Adjoint of [`Self::sample_into`]: accumulates `grad` for vertex `r`
    /// onto the cells it was sampled from.
    pub fn scatter(&self, grad_map: &mut FeatureMap, r: usize, grad: &[f64]) {
        if let Some(taps) = &self.taps[r] {
            for &(cell, w) in taps {
                if w != 0.0 {
                    for (g, d) in grad_map.cell_at_mut(cell).iter_mut().zip(grad) {
                        *g += w * d;
                    }
                }
            }
        }
    }
}

/// Samples the map at every vertex's projection (bilinear). Returns the
/// `R × C` matrix and the visibility mask; invisible rows are zero.
pub fn sample_vertex_features(
    map: &FeatureMap,
    mesh: &CuboidMesh,
    pose: &Pose,
    camera: &Camera,
) -> (Vec<f64>, Vec<bool>) {
    sample_vertex_features_with(map, mesh, pose, camera, SampleMode::Bilinear)
}

pub fn sample_vertex_features_with(
    map: &FeatureMap,
    mesh: &CuboidMesh,
    pose: &Pose,
    camera: &Camera,
    mode: SampleMode,
) -> (Vec<f64>, Vec<bool>) {
    let plan = SamplingPlan::with_mode(mesh, pose, camera, map.grid(), mode);
    let c = map.channels();
    let mut rows = vec![0.0; mesh.vertex_count() * c];
    for r in 0..mesh.vertex_count() {
        plan.sample_into(map, r, &mut rows[r * c..(r + 1) * c]);
    }
    (rows, plan.visibility())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::make_cuboid;

    fn camera() -> Camera {
        Camera::new(8.0, (32.0, 32.0), (64, 64), 4).unwrap()
    }

    #[test]
    fn shifted_out_of_frame_is_empty() {
        let mesh = make_cuboid([1.0, 1.0, 1.0], 2).unwrap();
        // Principal point in the image corner: the whole projection lands
        // left of and above the first cell centre.
        let cam = Camera::new(1.0, (0.0, 0.0), (64, 64), 4).unwrap();
        let buf = rasterize(&mesh, &Pose::identity(), &cam, (16, 16));
        assert_eq!(buf.covered_count(), 0);
        assert!(buf.depth.iter().all(|d| *d == f64::NEG_INFINITY));
    }

    #[test]
    fn frontal_face_fills_grid_with_constant_depth() {
        let mesh = make_cuboid([2.0, 2.0, 2.0], 1).unwrap();
        // 8×8 grid of stride-1 cells, face spans 20 pixels around (4, 4).
        let cam = Camera::new(10.0, (4.0, 4.0), (8, 8), 1).unwrap();
        let buf = rasterize(&mesh, &Pose::identity(), &cam, (8, 8));
        // The +z side is faces 8..10 (sides ordered +x, -x, +y, -y, +z, -z).
        for idx in 0..64 {
            assert!(buf.face_id[idx] == 8 || buf.face_id[idx] == 9, "cell {idx}: {}", buf.face_id[idx]);
            assert!((buf.depth[idx] - 1.0).abs() < 1e-12);
            let l = buf.barycentric[idx];
            assert!(l.iter().all(|&v| v >= 0.0));
            assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_bank_renders_constant() {
        let mesh = make_cuboid([1.0, 0.6, 0.8], 3).unwrap();
        let cam = camera();
        let c = vec![0.5, -1.0, 2.0];
        let mut bank = VertexFeatureBank::zeros(mesh.vertex_count(), 3);
        for r in 0..mesh.vertex_count() {
            bank.row_mut(r).copy_from_slice(&c);
        }
        let pose = Pose::new(0.7, 0.3, 0.2).unwrap();
        let map = render_feature_map(&mesh, &bank, &pose, &cam, cam.grid()).unwrap();
        let buf = rasterize(&mesh, &pose, &cam, cam.grid());
        assert!(buf.covered_count() > 0);
        for idx in 0..map.height() * map.width() {
            let cell = map.cell_at(idx);
            if buf.covered(idx) {
                for (a, b) in cell.iter().zip(&c) {
                    assert!((a - b).abs() < 1e-12);
                }
            } else {
                assert!(cell.iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn centroid_cell_gets_equal_thirds() {
        // Single triangle whose centroid lands exactly on cell centre (2, 2).
        let screen = vec![
            ScreenVertex { x: 1.0, y: 4.0, depth: 0.0 },
            ScreenVertex { x: 4.0, y: 1.0, depth: 0.0 },
            ScreenVertex { x: 1.0, y: 1.0, depth: 0.0 },
        ];
        let faces = [[0usize, 2, 1]];
        // Make sure winding is front-facing; otherwise flip.
        let faces = if signed_area2(&screen[0], &screen[2], &screen[1]) < 0.0 {
            faces
        } else {
            [[0usize, 1, 2]]
        };
        let buf = rasterize_triangles(&screen, &faces, (6, 6));
        let mut attrs = vec![0.0; 3 * 4];
        attrs[0] = 1.0;
        attrs[4 + 1] = 1.0;
        attrs[8 + 2] = 1.0;
        let map = shade(&buf, &faces, &attrs, 4);
        let cell = map.cell(2, 2);
        for k in 0..3 {
            assert!((cell[k] - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(cell[3], 0.0);
    }

    #[test]
    fn bank_size_mismatch_is_error() {
        let mesh = make_cuboid([1.0, 1.0, 1.0], 2).unwrap();
        let bank = VertexFeatureBank::zeros(3, 2);
        let cam = camera();
        assert!(render_feature_map(&mesh, &bank, &Pose::identity(), &cam, cam.grid()).is_err());
    }

    #[test]
    fn unit_cube_front_view_visibility() {
        let mesh = make_cuboid([1.0, 1.0, 1.0], 1).unwrap();
        let cam = camera();
        let vis = visible_vertices(&mesh, &Pose::identity(), &cam, cam.grid());
        for (r, v) in mesh.vertices().iter().enumerate() {
            assert_eq!(vis[r], v.z > 0.0, "vertex {r} at {v:?}");
        }
        assert_eq!(vis.iter().filter(|&&v| v).count(), 4);
    }

    #[test]
    fn out_of_grid_vertex_is_invisible() {
        let mesh = make_cuboid([1.0, 1.0, 1.0], 1).unwrap();
        let cam = Camera::new(8.0, (2.0, 32.0), (64, 64), 4).unwrap();
        let pose = Pose::new(0.3, 0.2, 0.0).unwrap();
        let vis = visible_vertices(&mesh, &pose, &cam, cam.grid());
        let projector = cam.projector(&pose);
        for (r, v) in mesh.vertices().iter().enumerate() {
            let p = projector.project(v);
            if p.u < 0.0 {
                assert!(!vis[r]);
            }
        }
        assert!(vis.iter().any(|&v| !v));
    }

    #[test]
    fn constant_map_samples_constant() {
        let mesh = make_cuboid([1.0, 0.5, 0.8], 2).unwrap();
        let cam = camera();
        let mut map = FeatureMap::zeros(16, 16, 2);
        for h in 0..16 {
            for w in 0..16 {
                map.cell_mut(h, w).copy_from_slice(&[3.0, -1.0]);
            }
        }
        let pose = Pose::new(1.1, 0.4, -0.3).unwrap();
        let (rows, vis) = sample_vertex_features(&map, &mesh, &pose, &cam);
        assert!(vis.iter().any(|&v| v));
        for r in 0..mesh.vertex_count() {
            let row = &rows[2 * r..2 * r + 2];
            if vis[r] {
                assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] + 1.0).abs() < 1e-12);
            } else {
                assert_eq!(row, &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn bilinear_weights_at_node_and_between() {
        let grid = (4, 5);
        let taps = bilinear_taps(2.0, 1.0, grid);
        assert_eq!(taps[0], (7, 1.0));
        assert!(taps[1..].iter().all(|t| t.1 == 0.0));

        let mut map = FeatureMap::zeros(4, 5, 1);
        for idx in 0..20 {
            map.cell_at_mut(idx)[0] = (idx * idx) as f64 * 0.1;
        }
        let (x, y) = (1.25, 2.6);
        let v = |h: usize, w: usize| map.cell(h, w)[0];
        let expected = 0.75 * 0.4 * v(2, 1) + 0.25 * 0.4 * v(2, 2) + 0.75 * 0.6 * v(3, 1) + 0.25 * 0.6 * v(3, 2);
        let got: f64 = bilinear_taps(x, y, grid).iter().map(|&(i, w)| w * map.cell_at(i)[0]).sum();
        assert!((got - expected).abs() < 1e-12);

        let near = nearest_taps(x, y, grid);
        assert_eq!(near[0], (3 * 5 + 1, 1.0));
    }

    #[test]
    fn rendering_is_deterministic() {
        let mesh = make_cuboid([1.3, 0.9, 0.7], 3).unwrap();
        let cam = camera();
        let mut bank = VertexFeatureBank::zeros(mesh.vertex_count(), 2);
        for r in 0..mesh.vertex_count() {
            bank.row_mut(r).copy_from_slice(&[(r as f64).sin(), (r as f64 * 0.3).cos()]);
        }
        let pose = Pose::new(2.0, 0.5, 0.4).unwrap();
        let a = render_feature_map(&mesh, &bank, &pose, &cam, cam.grid()).unwrap();
        let b = render_feature_map(&mesh, &bank, &pose, &cam, cam.grid()).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
