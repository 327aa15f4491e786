//! On-disk formats: JSON metadata next to raw little-endian payloads, and
//! versioned binary checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cloud::{GaussianCloud, GridSpec, Volume};
use crate::engine::{MetricRecord, MotionState};
use crate::error::{Error, Result};
use crate::ffd::{FfdMotionModel, LatticeSpec, SpatialLattice, TemporalSpline};
use crate::geometry::ScanGeometry;
use crate::phantom::NoiseSpec;
use crate::splat::DetectorImage;
use crate::warp::{MotionMode, PerGaussianWeights};

pub const FORMAT_VERSION: u32 = 1;
const CLOUD_MAGIC: &[u8; 8] = b"FSCLOUD\0";
const MOTION_MAGIC: &[u8; 8] = b"FSMOTION";
/// Values per kernel in a cloud checkpoint.
pub const KERNEL_RECORD: usize = 11;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    write_bytes(path, format!("{text}\n").as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn f32_to_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn bytes_to_f32(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f32>> {
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, expected {}", bytes.len(), expected * 4),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn sibling(path: &Path, file: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new("")).join(file)
}

// ---------------------------------------------------------------------------
// Projection sets

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub index: usize,
    pub angle: f64,
    pub time_index: usize,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionMeta {
    pub format_version: u32,
    pub geometry: ScanGeometry,
    pub n_times: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixel_pitch: f64,
    /// Line integrals, dimensionless.
    pub units: String,
    pub noise: Option<NoiseSpec>,
    pub seed: Option<u64>,
    pub views: Vec<ViewEntry>,
}

pub const PROJECTIONS_FILE: &str = "projections.json";

/// Writes `projections.json` plus one `view_NNNN.f32` per view into `dir`.
/// Returns the metadata (with checksums).
pub fn write_projection_set(
    dir: &Path,
    geom: &ScanGeometry,
    projections: &[DetectorImage],
    noise: Option<NoiseSpec>,
    seed: Option<u64>,
) -> Result<ProjectionMeta> {
    geom.validate()?;
    if projections.len() != geom.n_views() {
        return Err(Error::DimensionMismatch(format!(
            "{} images for {} views",
            projections.len(),
            geom.n_views()
        )));
    }
    let mut views = Vec::with_capacity(projections.len());
    for (i, img) in projections.iter().enumerate() {
        if img.rows != geom.detector.rows || img.cols != geom.detector.cols {
            return Err(Error::DimensionMismatch(format!("view {i} has the wrong size")));
        }
        let file = format!("view_{i:04}.f32");
        let bytes = f32_to_bytes(img.data.iter().map(|&v| v as f32));
        write_bytes(&dir.join(&file), &bytes)?;
        views.push(ViewEntry {
            index: i,
            angle: geom.angles[i],
            time_index: geom.time_indices[i],
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    let meta = ProjectionMeta {
        format_version: FORMAT_VERSION,
        geometry: geom.clone(),
        n_times: geom.n_times(),
        rows: geom.detector.rows,
        cols: geom.detector.cols,
        pixel_pitch: geom.detector.pixel_pitch,
        units: "line integral".into(),
        noise,
        seed,
        views,
    };
    write_json(&dir.join(PROJECTIONS_FILE), &meta)?;
    Ok(meta)
}

/// Reads a projection set, verifying view count, sizes and checksums.
pub fn read_projection_set(dir: &Path) -> Result<(ProjectionMeta, Vec<DetectorImage>)> {
    let meta_path = dir.join(PROJECTIONS_FILE);
    let meta: ProjectionMeta = read_json(&meta_path)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::format(&meta_path, format!("unsupported version {}", meta.format_version)));
    }
    meta.geometry.validate()?;
    if meta.views.len() != meta.geometry.n_views() {
        return Err(Error::format(&meta_path, "view count differs from geometry"));
    }
    let n = meta.rows * meta.cols;
    let mut images = Vec::with_capacity(meta.views.len());
    for v in &meta.views {
        let path = dir.join(&v.file);
        let bytes = read_bytes(&path)?;
        if sha256_hex(&bytes) != v.sha256 {
            return Err(Error::format(&path, "checksum mismatch"));
        }
        let data = bytes_to_f32(&path, &bytes, n)?;
        images.push(DetectorImage {
            rows: meta.rows,
            cols: meta.cols,
            data: data.into_iter().map(f64::from).collect(),
        });
    }
    Ok((meta, images))
}

// ---------------------------------------------------------------------------
// Volumes

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeMeta {
    pub format_version: u32,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub units: String,
    /// Order of the raw payload.
    pub order: String,
    pub file: String,
    pub sha256: String,
}

/// Writes `<stem>.json` and `<stem>.f32` at `path` (the `.json` path).
pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::format(path, "volume path needs a file name"))?;
    let file = format!("{stem}.f32");
    let bytes = f32_to_bytes(volume.data.iter().copied());
    write_bytes(&sibling(path, &file), &bytes)?;
    let g = &volume.grid;
    write_json(
        path,
        &VolumeMeta {
            format_version: FORMAT_VERSION,
            dims: g.dims,
            spacing: g.spacing,
            origin: g.origin,
            units: "mm^-1".into(),
            order: "x-fastest".into(),
            file,
            sha256: sha256_hex(&bytes),
        },
    )
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let meta: VolumeMeta = read_json(path)?;
    let grid = GridSpec {
        dims: meta.dims,
        spacing: meta.spacing,
        origin: meta.origin,
    };
    grid.validate()?;
    let raw = sibling(path, &meta.file);
    let bytes = read_bytes(&raw)?;
    if sha256_hex(&bytes) != meta.sha256 {
        return Err(Error::format(&raw, "checksum mismatch"));
    }
    Ok(Volume {
        grid,
        data: bytes_to_f32(&raw, &bytes, grid.n_voxels())?,
    })
}

// ---------------------------------------------------------------------------
// Binary checkpoints

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format(self.path, "count overflows usize"))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n > (self.bytes.len() - self.pos) / 8 {
            return Err(Error::format(self.path, "truncated file"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::format(self.path, "bad magic"));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::format(self.path, format!("unsupported version {v}")));
        }
        Ok(())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

/// Magic, version, kernel count, then per kernel: raw density, mean (3),
/// quaternion (4), log-scale (3), all little-endian f64.
pub fn cloud_to_bytes(cloud: &GaussianCloud) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(20 + cloud.len() * KERNEL_RECORD * 8));
    w.0.extend(CLOUD_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(cloud.len() as u64);
    for n in 0..cloud.len() {
        w.f64(cloud.density_raw[n]);
        w.f64s(&cloud.means[n]);
        w.f64s(&cloud.rotations[n]);
        w.f64s(&cloud.log_scales[n]);
    }
    w.0
}

pub fn cloud_from_bytes(path: &Path, bytes: &[u8]) -> Result<GaussianCloud> {
    let mut r = Reader { path, bytes, pos: 0 };
    r.header(CLOUD_MAGIC)?;
    let n = r.usize()?;
    let values = r.f64s(n.checked_mul(KERNEL_RECORD).ok_or_else(|| Error::format(path, "bad count"))?)?;
    r.finish()?;
    let mut cloud = GaussianCloud::new();
    for k in values.chunks_exact(KERNEL_RECORD) {
        cloud.density_raw.push(k[0]);
        cloud.means.push([k[1], k[2], k[3]]);
        cloud.rotations.push([k[4], k[5], k[6], k[7]]);
        cloud.log_scales.push([k[8], k[9], k[10]]);
    }
    Ok(cloud)
}

pub fn write_cloud(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    write_bytes(path, &cloud_to_bytes(cloud))
}

pub fn read_cloud(path: &Path) -> Result<GaussianCloud> {
    cloud_from_bytes(path, &read_bytes(path)?)
}

fn mode_code(mode: MotionMode) -> u32 {
    match mode {
        MotionMode::Di => 0,
        MotionMode::DecoupledFfd => 1,
        MotionMode::PerGaussian => 2,
    }
}

/// Magic, version, mode, lattice spec, rank, channels, temporal spec, the
/// lattice and temporal payloads, then an optional per-kernel weight block.
pub fn motion_to_bytes(motion: &MotionState) -> Vec<u8> {
    let m = &motion.model;
    let mut w = Writer(Vec::new());
    w.0.extend(MOTION_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(mode_code(motion.mode));
    let spec = &m.lattice.spec;
    for d in spec.dims {
        w.u64(d as u64);
    }
    w.f64s(&spec.spacing);
    w.f64s(&spec.origin);
    w.u64(m.lattice.rank as u64);
    w.u64(m.lattice.channels as u64);
    w.u64(m.temporal.n_times as u64);
    w.f64(m.temporal.spacing);
    w.u64(m.temporal.n_control as u64);
    w.u64(m.lattice.coeffs.len() as u64);
    w.f64s(&m.lattice.coeffs);
    w.u64(m.temporal.controls.len() as u64);
    w.f64s(&m.temporal.controls);
    match &motion.per_gaussian {
        Some(pg) => {
            w.u64(pg.values.len() as u64);
            w.f64s(&pg.values);
        }
        None => w.u64(0),
    }
    w.0
}

pub fn motion_from_bytes(path: &Path, bytes: &[u8]) -> Result<MotionState> {
    let mut r = Reader { path, bytes, pos: 0 };
    r.header(MOTION_MAGIC)?;
    let mode = match r.u32()? {
        0 => MotionMode::Di,
        1 => MotionMode::DecoupledFfd,
        2 => MotionMode::PerGaussian,
        c => return Err(Error::format(path, format!("unknown motion mode {c}"))),
    };
    let dims = [r.usize()?, r.usize()?, r.usize()?];
    let spacing = [r.f64()?, r.f64()?, r.f64()?];
    let origin = [r.f64()?, r.f64()?, r.f64()?];
    let spec = LatticeSpec { dims, spacing, origin };
    spec.validate()?;
    let rank = r.usize()?;
    let channels = r.usize()?;
    let n_times = r.usize()?;
    let t_spacing = r.f64()?;
    let n_control = r.usize()?;
    let mut lattice = SpatialLattice::zeros(spec, rank, channels)?;
    let mut temporal = TemporalSpline::zeros(rank, n_times, t_spacing)?;
    if temporal.n_control != n_control {
        return Err(Error::format(path, "temporal control count inconsistent with spacing"));
    }
    let n = r.usize()?;
    if n != lattice.coeffs.len() {
        return Err(Error::format(path, "lattice payload length"));
    }
    lattice.coeffs = r.f64s(n)?;
    let n = r.usize()?;
    if n != temporal.controls.len() {
        return Err(Error::format(path, "temporal payload length"));
    }
    temporal.controls = r.f64s(n)?;
    let n = r.usize()?;
    let per_gaussian = if n > 0 {
        let values = r.f64s(n)?;
        let stride = rank * crate::ffd::DECOUPLED_CHANNELS;
        if n % stride != 0 {
            return Err(Error::format(path, "per-kernel payload length"));
        }
        Some(PerGaussianWeights { rank, values })
    } else {
        None
    };
    r.finish()?;
    if mode == MotionMode::PerGaussian && per_gaussian.is_none() {
        return Err(Error::format(path, "per-Gaussian mode without per-kernel weights"));
    }
    Ok(MotionState {
        mode,
        model: FfdMotionModel { lattice, temporal },
        per_gaussian,
    })
}

pub fn write_motion(path: &Path, motion: &MotionState) -> Result<()> {
    write_bytes(path, &motion_to_bytes(motion))
}

pub fn read_motion(path: &Path) -> Result<MotionState> {
    motion_from_bytes(path, &read_bytes(path)?)
}

/// Appends records as JSON lines.
pub fn write_metrics_log(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::format(path, e.to_string()))?);
        text.push('\n');
    }
    write_bytes(path, text.as_bytes())
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

// ---------------------------------------------------------------------------
// Slice dumps

/// Axial slice `k` of a volume, x-fastest.
pub fn axial_slice(volume: &Volume, k: usize) -> Vec<f32> {
    let [nx, ny, _] = volume.grid.dims;
    volume.data[k * nx * ny..(k + 1) * nx * ny].to_vec()
}

/// Coronal slice (fixed y index `j`), rows running along −z so superior is up.
pub fn coronal_slice(volume: &Volume, j: usize) -> Vec<f32> {
    let [nx, _, nz] = volume.grid.dims;
    let mut out = Vec::with_capacity(nx * nz);
    for k in (0..nz).rev() {
        for i in 0..nx {
            out.push(volume.at(i, j, k));
        }
    }
    out
}

/// 8-bit binary PGM of `values` (row-major, `width` wide) mapped linearly from `window`.
pub fn write_pgm(path: &Path, values: &[f32], width: usize, window: (f32, f32)) -> Result<()> {
    if width == 0 || values.len() % width != 0 || !(window.1 > window.0) {
        return Err(Error::format(path, "bad slice shape or window"));
    }
    let height = values.len() / width;
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = window.1 - window.0;
    bytes.extend(
        values
            .iter()
            .map(|&v| (((v - window.0) / span).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    write_bytes(path, &bytes)
}
