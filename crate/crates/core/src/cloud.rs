//! Gaussian mixture representation of the attenuation field.

use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, Vector3};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{named_rng, Stream};

/// Kernels contribute only inside the axis-aligned box of half-width
/// `CUTOFF_SIGMAS · sqrt(Σ_ii)` around their mean.
pub const CUTOFF_SIGMAS: f64 = 3.0;

const QUAT_NORM_FLOOR: f64 = 1e-12;

/// `ln(1 + e^x)`, the non-negative density activation.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`].
pub fn softplus_grad(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    let y = y.max(1e-300);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_rotation(q: &[f64; 4]) -> Result<Matrix3<f64>> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(n >= QUAT_NORM_FLOOR) {
        return Err(Error::DegenerateQuaternion(n));
    }
    let [w, x, y, z] = q.map(|c| c / n);
    Ok(rotation_of_unit(w, x, y, z))
}

fn rotation_of_unit(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `Σ = R(q) diag(exp(2s)) R(q)ᵀ`.
pub fn assemble_covariance(q: &[f64; 4], log_scale: &[f64; 3]) -> Result<Matrix3<f64>> {
    let r = quat_to_rotation(q)?;
    let d = Matrix3::from_diagonal(&Vector3::from_fn(|i, _| (2.0 * log_scale[i]).exp()));
    let sigma = r * d * r.transpose();
    Ok((sigma + sigma.transpose()) * 0.5)
}

/// Adjoint of [`assemble_covariance`]: given a symmetric `dL/dΣ`, returns
/// `(dL/dq, dL/ds)` with respect to the raw (unnormalized) quaternion.
pub fn assemble_covariance_backward(
    q: &[f64; 4],
    log_scale: &[f64; 3],
    grad_sigma: &Matrix3<f64>,
) -> Result<([f64; 4], [f64; 3])> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if !(n >= QUAT_NORM_FLOOR) {
        return Err(Error::DegenerateQuaternion(n));
    }
    let [w, x, y, z] = q.map(|c| c / n);
    let r = rotation_of_unit(w, x, y, z);
    let e2s = Vector3::from_fn(|i, _| (2.0 * log_scale[i]).exp());
    let d = Matrix3::from_diagonal(&e2s);
    let g = (grad_sigma + grad_sigma.transpose()) * 0.5;

    let gd = r.transpose() * g * r;
    let grad_s = [0, 1, 2].map(|i| 2.0 * gd[(i, i)] * e2s[i]);

    let gr = 2.0 * g * r * d;
    let dr = [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ];
    let gq_unit = dr.map(|m| gr.component_mul(&m).sum());
    let qhat = [w, x, y, z];
    let dot: f64 = (0..4).map(|k| gq_unit[k] * qhat[k]).sum();
    let grad_q = [0, 1, 2, 3].map(|k| (gq_unit[k] - qhat[k] * dot) / n);
    Ok((grad_q, grad_s))
}

/// An explicit Gaussian kernel: amplitude, mean and covariance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel3 {
    pub density: f64,
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

/// A kernel with its inverse covariance and cutoff box precomputed.
#[derive(Clone, Copy, Debug)]
pub struct PreparedKernel {
    pub density: f64,
    pub mean: Vector3<f64>,
    pub precision: Matrix3<f64>,
    pub half_extent: Vector3<f64>,
}

impl PreparedKernel {
    pub fn new(k: &Kernel3) -> Option<Self> {
        let precision = k.cov.try_inverse()?;
        let half_extent = Vector3::from_fn(|i, _| CUTOFF_SIGMAS * k.cov[(i, i)].max(0.0).sqrt());
        Some(Self {
            density: k.density,
            mean: k.mean,
            precision,
            half_extent,
        })
    }

    #[inline]
    pub fn contribution(&self, x: &Vector3<f64>) -> Option<f64> {
        let d = x - self.mean;
        if d.x.abs() > self.half_extent.x || d.y.abs() > self.half_extent.y || d.z.abs() > self.half_extent.z {
            return None;
        }
        Some(self.density * (-0.5 * d.dot(&(self.precision * d))).exp())
    }
}

/// Scale bounds applied to `exp(log_scale)`, in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleBounds {
    pub min: f64,
    pub max: f64,
}

impl ScaleBounds {
    /// `[0.1 voxel, 0.5 FOV extent]` for a reconstruction grid.
    pub fn for_grid(grid: &GridSpec) -> Self {
        let voxel = grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
        let extent = (0..3)
            .map(|i| grid.dims[i] as f64 * grid.spacing[i])
            .fold(0.0, f64::max);
        Self {
            min: 0.1 * voxel,
            max: 0.5 * extent,
        }
    }
}

/// The optimizable scene: per-kernel raw density, mean, quaternion and log-scale.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    /// Raw density parameters; the physical density is `softplus(raw)`.
    pub density_raw: Vec<f64>,
    pub means: Vec<[f64; 3]>,
    /// Quaternions `(w, x, y, z)`, normalized at use sites.
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
}

impl GaussianCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Appends a kernel given its physical (activated) density.
    pub fn push(&mut self, density: f64, mean: [f64; 3], rotation: [f64; 4], log_scale: [f64; 3]) {
        self.density_raw.push(softplus_inv(density));
        self.means.push(mean);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
    }

    pub fn density(&self, n: usize) -> f64 {
        softplus(self.density_raw[n])
    }

    pub fn mean(&self, n: usize) -> Vector3<f64> {
        Vector3::from(self.means[n])
    }

    pub fn covariance(&self, n: usize) -> Result<Matrix3<f64>> {
        assemble_covariance(&self.rotations[n], &self.log_scales[n])
    }

    pub fn kernel(&self, n: usize) -> Result<Kernel3> {
        Ok(Kernel3 {
            density: self.density(n),
            mean: self.mean(n),
            cov: self.covariance(n)?,
        })
    }

    pub fn kernels(&self) -> Result<Vec<Kernel3>> {
        (0..self.len()).map(|n| self.kernel(n)).collect()
    }

    pub fn clamp_scales(&mut self, bounds: &ScaleBounds) {
        let (lo, hi) = (bounds.min.ln(), bounds.max.ln());
        for s in self.log_scales.iter_mut().flatten() {
            *s = s.clamp(lo, hi);
        }
    }

    /// Keeps the kernels for which `keep[n]` is true.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.density_raw.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.means.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.rotations.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.log_scales.retain(|_| *it.next().unwrap());
    }

    /// Appends all kernels of `other`.
    pub fn extend_from(&mut self, other: &GaussianCloud) {
        self.density_raw.extend_from_slice(&other.density_raw);
        self.means.extend_from_slice(&other.means);
        self.rotations.extend_from_slice(&other.rotations);
        self.log_scales.extend_from_slice(&other.log_scales);
    }
}

/// Regular voxel grid; `origin` is the world position of voxel `(0, 0, 0)`'s center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl GridSpec {
    /// Grid of `dims` voxels with isotropic `spacing`, centered on the isocenter.
    pub fn centered(dims: [usize; 3], spacing: f64) -> Self {
        Self {
            dims,
            spacing: [spacing; 3],
            origin: [0, 1, 2].map(|i| -0.5 * (dims[i] as f64 - 1.0) * spacing),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("grid dims must be >= 1".into()));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("grid spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        )
    }

    pub fn center_of(&self, flat: usize) -> Vector3<f64> {
        let i = flat % self.dims[0];
        let j = (flat / self.dims[0]) % self.dims[1];
        let k = flat / (self.dims[0] * self.dims[1]);
        self.center(i, j, k)
    }

    /// Lower and upper world coordinates of the grid's outer voxel faces.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let lo = Vector3::from_fn(|a, _| self.origin[a] - 0.5 * self.spacing[a]);
        let hi = Vector3::from_fn(|a, _| lo[a] + self.dims[a] as f64 * self.spacing[a]);
        (lo, hi)
    }

    /// Inclusive voxel index range along `axis` whose centers lie in `[lo, hi]`.
    fn index_range(&self, axis: usize, lo: f64, hi: f64) -> Option<(usize, usize)> {
        let a = ((lo - self.origin[axis]) / self.spacing[axis]).ceil().max(0.0);
        let b = ((hi - self.origin[axis]) / self.spacing[axis]).floor();
        let b = b.min(self.dims[axis] as f64 - 1.0);
        (a <= b).then(|| (a as usize, b as usize))
    }
}

/// Voxel volume, x-fastest, in mm⁻¹.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub grid: GridSpec,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            data: vec![0.0; grid.n_voxels()],
            grid,
        }
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.index(i, j, k)]
    }
}

/// `φ(x) = Σ_n G_n(x)` with the per-kernel box cutoff.
pub fn field_value(kernels: &[Kernel3], x: &Vector3<f64>) -> f64 {
    kernels
        .iter()
        .filter_map(PreparedKernel::new)
        .filter_map(|k| k.contribution(x))
        .sum()
}

/// Samples the field at every voxel center.
pub fn rasterize_to_volume(kernels: &[Kernel3], grid: &GridSpec) -> Volume {
    let prepared: Vec<PreparedKernel> = kernels.iter().filter_map(PreparedKernel::new).collect();
    let [nx, ny, nz] = grid.dims;

    // kernel lists per z slice, in index order
    let mut per_slice: Vec<Vec<u32>> = vec![Vec::new(); nz];
    for (n, k) in prepared.iter().enumerate() {
        if let Some((k0, k1)) = grid.index_range(2, k.mean.z - k.half_extent.z, k.mean.z + k.half_extent.z) {
            for list in &mut per_slice[k0..=k1] {
                list.push(n as u32);
            }
        }
    }

    let mut data = vec![0.0f32; grid.n_voxels()];
    data.par_chunks_mut(nx * ny)
        .zip(per_slice.par_iter())
        .enumerate()
        .for_each(|(kz, (slice, list))| {
            let mut acc = vec![0.0f64; nx * ny];
            for &n in list {
                let k = &prepared[n as usize];
                let (Some((i0, i1)), Some((j0, j1))) = (
                    grid.index_range(0, k.mean.x - k.half_extent.x, k.mean.x + k.half_extent.x),
                    grid.index_range(1, k.mean.y - k.half_extent.y, k.mean.y + k.half_extent.y),
                ) else {
                    continue;
                };
                for j in j0..=j1 {
                    for i in i0..=i1 {
                        if let Some(v) = k.contribution(&grid.center(i, j, kz)) {
                            acc[i + nx * j] += v;
                        }
                    }
                }
            }
            for (o, a) in slice.iter_mut().zip(acc) {
                *o = a as f32;
            }
        });
    Volume { grid: *grid, data }
}

/// Initializes a cloud by sampling kernel centers from a volume.
///
/// Centers are drawn from voxels above `threshold` with probability
/// proportional to the voxel value and jittered uniformly within the voxel.
/// Scales start at the mean distance to the three nearest neighbours;
/// densities start at the sampled voxel value times a single constant that
/// makes the rasterized cloud match the volume's mean over the support.
pub fn sample_cloud_from_volume(
    volume: &Volume,
    n_points: usize,
    threshold: f64,
    seed: u64,
    bounds: &ScaleBounds,
) -> Result<GaussianCloud> {
    if n_points == 0 {
        return Err(Error::Config("n_points must be >= 1".into()));
    }
    let grid = &volume.grid;
    let support: Vec<usize> = (0..volume.data.len())
        .filter(|&v| volume.data[v] as f64 > threshold)
        .collect();
    if support.is_empty() {
        return Err(Error::EmptySupport(threshold));
    }
    let weights: Vec<f64> = support.iter().map(|&v| volume.data[v] as f64).collect();
    let picker = WeightedIndex::new(&weights).map_err(|e| Error::NumericDomain(e.to_string()))?;
    let mut rng = named_rng(seed, Stream::Init, 0);

    let mut means = Vec::with_capacity(n_points);
    let mut values = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let v = support[picker.sample(&mut rng)];
        let c = grid.center_of(v);
        let jitter: [f64; 3] = std::array::from_fn(|a| (rng.random::<f64>() - 0.5) * grid.spacing[a]);
        means.push([c.x + jitter[0], c.y + jitter[1], c.z + jitter[2]]);
        values.push(volume.data[v] as f64);
    }

    let voxel = grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let scales = neighbour_scales(&means, voxel);

    let mut cloud = GaussianCloud::new();
    for n in 0..n_points {
        let s = scales[n].clamp(bounds.min, bounds.max).ln();
        cloud.push(values[n], means[n], [1.0, 0.0, 0.0, 0.0], [s; 3]);
    }

    let raster = rasterize_to_volume(&cloud.kernels()?, grid);
    let (mut sum_vol, mut sum_raster) = (0.0, 0.0);
    for &v in &support {
        sum_vol += volume.data[v] as f64;
        sum_raster += raster.data[v] as f64;
    }
    if sum_raster > 0.0 {
        let c = sum_vol / sum_raster;
        for n in 0..n_points {
            cloud.density_raw[n] = softplus_inv(values[n] * c);
        }
    }
    Ok(cloud)
}

/// Mean distance from each point to its three nearest neighbours.
fn neighbour_scales(points: &[[f64; 3]], fallback: f64) -> Vec<f64> {
    if points.len() < 2 {
        return vec![fallback; points.len()];
    }
    let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(points);
    let k = points.len().min(4);
    points
        .iter()
        .map(|p| {
            let nn = tree.nearest_n::<SquaredEuclidean>(p, NonZero::new(k).unwrap());
            let d: Vec<f64> = nn.iter().map(|n| n.distance.sqrt()).filter(|&d| d > 0.0).collect();
            if d.is_empty() {
                fallback
            } else {
                d.iter().sum::<f64>() / d.len() as f64
            }
        })
        .collect()
}
