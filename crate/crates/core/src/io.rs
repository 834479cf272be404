//! On-disk formats: binary tensors, dataset manifests and model checkpoints.
//!
//! Everything is little-endian without padding. Tensors are `"NVST"`, a
//! `u16` version, a `u8` rank, `u64` dims and row-major `f32` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featext::{ExtractorWeights, Image, RAW_DIM};
use crate::geometry::{Camera, Pose};
use crate::matching::PseudoLabelSet;
use crate::mesh::VertexFeatureBank;
use crate::synthdata::{Dataset, DatasetManifest, ManifestEntry, SceneSpec, Split};
use crate::training::{EmState, HistoryRow};

pub const TENSOR_MAGIC: &[u8; 4] = b"NVST";
pub const TENSOR_VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NVSM";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Dense `f32` array with its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        match element_count(&dims) {
            Some(n) if n == data.len() as u64 => Ok(Self { dims, data }),
            _ => Err(Error::invalid(format!(
                "{} values do not fill a tensor of shape {dims:?}",
                data.len()
            ))),
        }
    }

    pub fn from_f64(dims: Vec<u64>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            dims: Vec::new(),
            data: vec![v],
        }
    }
}

fn element_count(dims: &[u64]) -> Option<u64> {
    dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
}

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(t.dims.len() as u8);
    for d in &t.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Little-endian cursor whose errors carry the byte offset.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.offset(),
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let at = self.offset();
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::format(
                at,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(expected)),
            ));
        }
        Ok(())
    }

    fn version(&mut self, expected: u16) -> Result<()> {
        let at = self.offset();
        let v = self.u16("version")?;
        if v != expected {
            return Err(Error::format(at, format!("unsupported version {v}, expected {expected}")));
        }
        Ok(())
    }

    fn tensor(&mut self) -> Result<Tensor> {
        self.magic(TENSOR_MAGIC)?;
        self.version(TENSOR_VERSION)?;
        let ndim = self.u8("rank")? as usize;
        let dims_at = self.offset();
        let dims = (0..ndim).map(|_| self.u64("dimension")).collect::<Result<Vec<_>>>()?;
        let count = element_count(&dims)
            .and_then(|n| n.checked_mul(4))
            .filter(|&b| b <= usize::MAX as u64)
            .ok_or_else(|| Error::format(dims_at, format!("dimensions {dims:?} overflow")))?;
        let payload = self.take(count as usize, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Ok(Tensor { dims, data })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.offset(), "trailing bytes"));
        }
        Ok(())
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

/// Writes via a sibling temporary file and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::new();
    encode_tensor(t, &mut bytes);
    write_atomic(path, &bytes)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&read_file(path)?)
}

pub fn image_to_tensor(image: &Image) -> Tensor {
    Tensor::from_f64(vec![image.height() as u64, image.width() as u64, 3], image.data())
        .expect("image data matches its shape")
}

pub fn image_from_tensor(t: &Tensor) -> Result<Image> {
    match t.dims[..] {
        [h, w, 3] => Image::new(h as usize, w as usize, t.to_f64()),
        _ => Err(Error::invalid(format!("image tensor must be H×W×3, got {:?}", t.dims))),
    }
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    write_tensor(path, &image_to_tensor(image))
}

pub fn read_image(path: &Path) -> Result<Image> {
    image_from_tensor(&read_tensor(path)?)
}

fn format_entry(e: &ManifestEntry) -> String {
    let pose = match &e.pose {
        None => "none".to_string(),
        Some(p) => {
            let [a, el, i] = p.to_degrees();
            format!("{a:.6},{el:.6},{i:.6}")
        }
    };
    format!("{},{},{},{:.6},{}", e.id, e.path, e.split.as_str(), e.occlusion_fraction, pose)
}

/// One record per line: id, relative path, split, occlusion fraction, then
/// azimuth/elevation/in-plane in degrees or `none`.
pub fn format_manifest(m: &DatasetManifest) -> String {
    m.entries().iter().map(|e| format_entry(e) + "\n").collect()
}

pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let bad = |message: String| Error::Manifest { line: line_no, message };
        let fields: Vec<&str> = line.split(',').collect();
        let pose = match fields.len() {
            5 if fields[4] == "none" => None,
            7 => {
                let mut deg = [0.0; 3];
                for (k, d) in deg.iter_mut().enumerate() {
                    *d = fields[4 + k]
                        .parse::<f64>()
                        .map_err(|_| bad(format!("bad angle {:?}", fields[4 + k])))?;
                }
                Some(Pose::from_degrees(deg[0], deg[1], deg[2]).map_err(|e| bad(e.to_string()))?)
            }
            n => return Err(bad(format!("expected 5 or 7 fields, found {n}"))),
        };
        if fields[0].is_empty() {
            return Err(bad("empty image id".into()));
        }
        let split = Split::parse(fields[2]).ok_or_else(|| bad(format!("unknown split {:?}", fields[2])))?;
        let occlusion_fraction: f64 = fields[3]
            .parse()
            .ok()
            .filter(|f| (0.0..1.0).contains(f))
            .ok_or_else(|| bad(format!("bad occlusion fraction {:?}", fields[3])))?;
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            path: fields[1].to_string(),
            pose,
            split,
            occlusion_fraction,
        });
    }
    DatasetManifest::new(entries).map_err(|e| Error::Manifest { line: 0, message: e.to_string() })
}

pub fn write_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    write_atomic(path, format_manifest(m).as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::format(e.utf8_error().valid_up_to() as u64, "manifest is not UTF-8"))?;
    parse_manifest(&text)
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SCENE_FILE: &str = "scene.json";

/// Writes `manifest.csv`, `scene.json` and every image under `dir`.
pub fn write_dataset(dir: &Path, spec: &SceneSpec, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    for (entry, image) in dataset.manifest.entries().iter().zip(&dataset.images) {
        write_image(&dir.join(&entry.path), image)?;
    }
    let scene = serde_json::to_string_pretty(spec).map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(&dir.join(SCENE_FILE), (scene + "\n").as_bytes())?;
    write_manifest(&dir.join(MANIFEST_FILE), &dataset.manifest)
}

pub fn read_scene(dir: &Path) -> Result<SceneSpec> {
    let path = dir.join(SCENE_FILE);
    let bytes = read_file(&path)?;
    let spec: SceneSpec = serde_json::from_slice(&bytes).map_err(|e| Error::format(0, format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

pub fn read_dataset(dir: &Path) -> Result<(SceneSpec, Dataset)> {
    let spec = read_scene(dir)?;
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let images = manifest
        .entries()
        .iter()
        .map(|e| read_image(&dir.join(&e.path)))
        .collect::<Result<Vec<_>>>()?;
    Ok((spec, Dataset { manifest, images }))
}

/// Settings a checkpoint is only valid under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub camera: Camera,
    pub mesh_dims: [f64; 3],
    pub mesh_subdivisions: usize,
    pub channels: usize,
    pub feature_stride: usize,
    pub seed: u64,
}

impl CheckpointConfig {
    /// Names of the fields that differ from `other`.
    pub fn conflicts(&self, other: &CheckpointConfig) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |name: &str, same: bool| {
            if !same {
                out.push(name.to_string());
            }
        };
        check("camera.scale", self.camera.scale == other.camera.scale);
        check("camera.principal", self.camera.principal == other.camera.principal);
        check("camera.image_size", self.camera.image_size == other.camera.image_size);
        check("camera.feature_stride", self.camera.feature_stride == other.camera.feature_stride);
        check("mesh_dims", self.mesh_dims == other.mesh_dims);
        check("mesh_subdivisions", self.mesh_subdivisions == other.mesh_subdivisions);
        check("channels", self.channels == other.channels);
        check("feature_stride", self.feature_stride == other.feature_stride);
        check("seed", self.seed == other.seed);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub state: EmState,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let state = &ckpt.state;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(&ckpt.config).map_err(|e| Error::invalid(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);

    // Weights as C × (RAW_DIM + 1), the bias in the last column.
    let c = state.weights.channels();
    let mut w = Vec::with_capacity(c * (RAW_DIM + 1));
    for k in 0..c {
        w.extend_from_slice(&state.weights.w[k * RAW_DIM..(k + 1) * RAW_DIM]);
        w.push(state.weights.b[k]);
    }
    encode_tensor(&Tensor::from_f64(vec![c as u64, RAW_DIM as u64 + 1], &w)?, &mut out);
    let bank = &state.bank;
    encode_tensor(
        &Tensor::from_f64(vec![bank.vertex_count() as u64, bank.channels() as u64], bank.features())?,
        &mut out,
    );
    out.extend_from_slice(&(bank.vertex_count() as u64).to_le_bytes());
    out.extend(bank.initialized().iter().map(|&b| b as u8));

    out.extend_from_slice(&(state.pseudo.len() as u64).to_le_bytes());
    for (id, pose, score) in state.pseudo.iter() {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for v in [pose.azimuth(), pose.elevation(), pose.inplane(), score] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    out.extend_from_slice(&(state.completed as u64).to_le_bytes());
    out.extend_from_slice(&(state.history.len() as u64).to_le_bytes());
    for h in &state.history {
        out.extend_from_slice(&(h.iteration as u64).to_le_bytes());
        out.extend_from_slice(&h.delta_range_deg.to_le_bytes());
        out.extend_from_slice(&(h.pseudo_count as u64).to_le_bytes());
        out.extend_from_slice(&h.mean_loss.to_le_bytes());
        out.extend_from_slice(&h.pseudo_precision.unwrap_or(f64::NAN).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let len = r.u32("config length")? as usize;
    let at = r.offset();
    let config: CheckpointConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::format(at, format!("bad config echo: {e}")))?;

    let at = r.offset();
    let wt = r.tensor()?;
    if wt.dims != [config.channels as u64, RAW_DIM as u64 + 1] {
        return Err(Error::format(at, format!("weights tensor has shape {:?}", wt.dims)));
    }
    let (mut w, mut b) = (Vec::new(), Vec::new());
    for row in wt.to_f64().chunks_exact(RAW_DIM + 1) {
        w.extend_from_slice(&row[..RAW_DIM]);
        b.push(row[RAW_DIM]);
    }
    let weights = ExtractorWeights::from_parts(w, b).map_err(|e| Error::format(at, e.to_string()))?;

    let at = r.offset();
    let bt = r.tensor()?;
    if bt.dims.len() != 2 || bt.dims[1] != config.channels as u64 {
        return Err(Error::format(at, format!("bank tensor has shape {:?}", bt.dims)));
    }
    let at = r.offset();
    let rows = r.u64("mask length")?;
    if rows != bt.dims[0] {
        return Err(Error::format(at, format!("mask of {rows} rows for a bank of {}", bt.dims[0])));
    }
    let mask_at = r.offset();
    let mask = r
        .take(rows as usize, "mask")?
        .iter()
        .map(|&m| match m {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(Error::format(mask_at, format!("mask byte {m} is not 0 or 1"))),
        })
        .collect::<Result<Vec<bool>>>()?;
    let bank = VertexFeatureBank::from_rows(bt.to_f64(), config.channels, mask).map_err(|e| Error::format(at, e.to_string()))?;

    let mut pseudo = PseudoLabelSet::new();
    let count = r.u64("pseudo-label count")?;
    for _ in 0..count {
        let at = r.offset();
        let n = r.u32("id length")? as usize;
        let id = std::str::from_utf8(r.take(n, "id")?).map_err(|_| Error::format(at, "image id is not UTF-8"))?;
        let (a, e, i, s) = (r.f64("azimuth")?, r.f64("elevation")?, r.f64("inplane")?, r.f64("score")?);
        let pose = Pose::new(a, e, i).map_err(|err| Error::format(at, err.to_string()))?;
        if pseudo.get(id).is_some() {
            return Err(Error::format(at, format!("duplicate pseudo-label for {id}")));
        }
        pseudo.offer(id, pose, s);
    }

    let completed = r.u64("completed iterations")? as usize;
    let rows = r.u64("history length")?;
    let mut history = Vec::new();
    for _ in 0..rows {
        let iteration = r.u64("iteration")? as usize;
        let delta_range_deg = r.f64("range")?;
        let pseudo_count = r.u64("pseudo count")? as usize;
        let mean_loss = r.f64("loss")?;
        let p = r.f64("precision")?;
        history.push(HistoryRow {
            iteration,
            delta_range_deg,
            pseudo_count,
            mean_loss,
            pseudo_precision: (!p.is_nan()).then_some(p),
        });
    }
    r.finish()?;
    Ok(Checkpoint {
        config,
        state: EmState {
            weights,
            bank,
            pseudo,
            completed,
            history,
        },
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

/// Loads a checkpoint, verifying its config echo against `expected` when
/// given.
pub fn load_checkpoint(path: &Path, expected: Option<&CheckpointConfig>) -> Result<Checkpoint> {
    let ckpt = decode_checkpoint(&read_file(path)?)?;
    if let Some(exp) = expected {
        let fields = ckpt.config.conflicts(exp);
        if !fields.is_empty() {
            return Err(Error::ConfigConflict { fields });
        }
    }
    Ok(ckpt)
}
