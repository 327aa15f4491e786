//! Additive X-ray splatting of 3D Gaussians onto the cone-beam detector.
//!
//! Each kernel is mapped to a 2D Gaussian by the local affine approximation
//! of the perspective map: `Σ̃` is the image block of `J W Σ Wᵀ Jᵀ` and the
//! amplitude is `ρ` times the exact ray-marginal constant of `J W Σ Wᵀ Jᵀ`.
//! Splats are binned into 16×16 tiles and summed in kernel index order.
//!
//! The backward pass treats `J` as constant with respect to the mean.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{Kernel3, CUTOFF_SIGMAS};
use crate::error::{Error, Result};
use crate::geometry::{perspective_jacobian, project_camera, ScanGeometry, ViewPose};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplatConfig {
    /// Added to the diagonal of every 2D covariance, in pixels².
    pub low_pass: f64,
    pub tile_size: usize,
    /// Reduce backward partial sums in a fixed order.
    pub deterministic: bool,
}

impl Default for SplatConfig {
    fn default() -> Self {
        Self {
            low_pass: 0.3,
            tile_size: 16,
            deterministic: true,
        }
    }
}

/// Detector image of line integrals; row-major, `rows × cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DetectorImage {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rounds every pixel to single precision (the on-disk storage type).
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub col0: usize,
    pub col1: usize,
    pub row0: usize,
    pub row1: usize,
}

impl PixelRect {
    #[inline]
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row <= self.row1 && col >= self.col0 && col <= self.col1
    }
}

#[derive(Clone, Debug)]
pub struct Splat2D {
    /// Index of the source kernel.
    pub kernel: usize,
    pub center: Vector2<f64>,
    /// 2D covariance including the low-pass floor.
    pub cov: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub amplitude: f64,
    pub bbox: PixelRect,
    pub jacobian: Matrix3<f64>,
    pub factor: f64,
    /// `J W Σ Wᵀ Jᵀ` without the floor.
    pub cov_ray: Matrix3<f64>,
}

/// Ray-marginal constant `sqrt(2π det Σ / det Σ₂)` of a trivariate Gaussian
/// whose third axis is the integration direction (`Σ₂` = leading 2×2 block).
pub fn integration_factor(cov: &Matrix3<f64>) -> Result<f64> {
    let det3 = cov.determinant();
    let det2 = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det3 > 0.0 && det2 > 0.0 && cov[(0, 0)] > 0.0) {
        return Err(Error::NumericDomain(format!(
            "covariance not positive definite (det3 = {det3:e}, det2 = {det2:e})"
        )));
    }
    Ok((2.0 * std::f64::consts::PI * det3 / det2).sqrt())
}

/// Projects one kernel, or returns `None` when it is culled.
pub fn project_gaussian(
    pose: &ViewPose,
    geom: &ScanGeometry,
    kernel: &Kernel3,
    cfg: &SplatConfig,
) -> Option<Splat2D> {
    let t = pose.to_camera(&kernel.mean);
    let jacobian = perspective_jacobian(geom, &t).ok()?;
    project_gaussian_with_jacobian(pose, geom, kernel, &jacobian, cfg)
}

/// [`project_gaussian`] with an externally supplied perspective Jacobian.
pub fn project_gaussian_with_jacobian(
    pose: &ViewPose,
    geom: &ScanGeometry,
    kernel: &Kernel3,
    jacobian: &Matrix3<f64>,
    cfg: &SplatConfig,
) -> Option<Splat2D> {
    let t = pose.to_camera(&kernel.mean);
    let p = project_camera(geom, &t).ok()?;
    let cov_cam = pose.rotation * kernel.cov * pose.rotation.transpose();
    let cov_ray = jacobian * cov_cam * jacobian.transpose();
    let cov_ray = (cov_ray + cov_ray.transpose()) * 0.5;
    let factor = integration_factor(&cov_ray).ok()?;

    let cov = Matrix2::new(
        cov_ray[(0, 0)] + cfg.low_pass,
        cov_ray[(0, 1)],
        cov_ray[(1, 0)],
        cov_ray[(1, 1)] + cfg.low_pass,
    );
    let conic = cov.try_inverse()?;
    let center = Vector2::new(p.u, p.v);
    let bbox = footprint(&center, &cov, geom.detector.rows, geom.detector.cols)?;
    Some(Splat2D {
        kernel: 0,
        center,
        cov,
        conic,
        amplitude: kernel.density * factor,
        bbox,
        jacobian: *jacobian,
        factor,
        cov_ray,
    })
}

fn footprint(center: &Vector2<f64>, cov: &Matrix2<f64>, rows: usize, cols: usize) -> Option<PixelRect> {
    let hu = CUTOFF_SIGMAS * cov[(0, 0)].sqrt();
    let hv = CUTOFF_SIGMAS * cov[(1, 1)].sqrt();
    let c0 = (center.x - hu).ceil().max(0.0);
    let c1 = (center.x + hu).floor().min(cols as f64 - 1.0);
    let r0 = (center.y - hv).ceil().max(0.0);
    let r1 = (center.y + hv).floor().min(rows as f64 - 1.0);
    if !(c0 <= c1 && r0 <= r1) {
        return None;
    }
    Some(PixelRect {
        col0: c0 as usize,
        col1: c1 as usize,
        row0: r0 as usize,
        row1: r1 as usize,
    })
}

/// Projects every kernel; culled kernels are skipped, indices are kept in `Splat2D::kernel`.
pub fn project_all(kernels: &[Kernel3], pose: &ViewPose, geom: &ScanGeometry, cfg: &SplatConfig) -> Vec<Splat2D> {
    kernels
        .par_iter()
        .enumerate()
        .filter_map(|(n, k)| {
            project_gaussian(pose, geom, k, cfg).map(|mut s| {
                s.kernel = n;
                s
            })
        })
        .collect()
}

/// [`project_all`] with one frozen Jacobian per kernel.
pub fn project_all_with_jacobians(
    kernels: &[Kernel3],
    jacobians: &[Matrix3<f64>],
    pose: &ViewPose,
    geom: &ScanGeometry,
    cfg: &SplatConfig,
) -> Vec<Splat2D> {
    kernels
        .iter()
        .zip(jacobians)
        .enumerate()
        .filter_map(|(n, (k, j))| {
            project_gaussian_with_jacobian(pose, geom, k, j, cfg).map(|mut s| {
                s.kernel = n;
                s
            })
        })
        .collect()
}

#[inline]
fn splat_weight(s: &Splat2D, row: usize, col: usize) -> (f64, Vector2<f64>) {
    let d = Vector2::new(col as f64 - s.center.x, row as f64 - s.center.y);
    let m = s.conic[(0, 0)] * d.x * d.x + 2.0 * s.conic[(0, 1)] * d.x * d.y + s.conic[(1, 1)] * d.y * d.y;
    ((-0.5 * m).exp(), d)
}

struct TileBins {
    tiles_x: usize,
    tiles_y: usize,
    tile: usize,
    lists: Vec<Vec<u32>>,
}

fn bin_splats(splats: &[Splat2D], rows: usize, cols: usize, tile: usize) -> TileBins {
    let tiles_x = cols.div_ceil(tile);
    let tiles_y = rows.div_ceil(tile);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (i, s) in splats.iter().enumerate() {
        for ty in s.bbox.row0 / tile..=s.bbox.row1 / tile {
            for tx in s.bbox.col0 / tile..=s.bbox.col1 / tile {
                lists[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    TileBins {
        tiles_x,
        tiles_y,
        tile,
        lists,
    }
}

/// Tiled forward rasterization of prepared splats.
pub fn render_splats(splats: &[Splat2D], rows: usize, cols: usize, cfg: &SplatConfig) -> DetectorImage {
    let bins = bin_splats(splats, rows, cols, cfg.tile_size);
    let tile = bins.tile;
    let mut image = DetectorImage::zeros(rows, cols);
    image
        .data
        .par_chunks_mut(tile * cols)
        .enumerate()
        .for_each(|(ty, band)| {
            let row_base = ty * tile;
            let band_rows = band.len() / cols;
            for tx in 0..bins.tiles_x {
                let col_base = tx * tile;
                let tile_cols = tile.min(cols - col_base);
                let mut acc = vec![0.0f64; tile * tile];
                for &si in &bins.lists[ty * bins.tiles_x + tx] {
                    let s = &splats[si as usize];
                    let r0 = s.bbox.row0.max(row_base);
                    let r1 = s.bbox.row1.min(row_base + band_rows - 1);
                    let c0 = s.bbox.col0.max(col_base);
                    let c1 = s.bbox.col1.min(col_base + tile_cols - 1);
                    for row in r0..=r1 {
                        for col in c0..=c1 {
                            let (w, _) = splat_weight(s, row, col);
                            acc[(row - row_base) * tile + (col - col_base)] += s.amplitude * w;
                        }
                    }
                }
                for lr in 0..band_rows {
                    for lc in 0..tile_cols {
                        band[lr * cols + col_base + lc] = acc[lr * tile + lc];
                    }
                }
            }
        });
    image
}

/// Reference rasterizer: every pixel visits every splat in index order.
pub fn render_splats_naive(splats: &[Splat2D], rows: usize, cols: usize) -> DetectorImage {
    let mut image = DetectorImage::zeros(rows, cols);
    for row in 0..rows {
        for col in 0..cols {
            let mut acc = 0.0f64;
            for s in splats {
                if s.bbox.contains(row, col) {
                    let (w, _) = splat_weight(s, row, col);
                    acc += s.amplitude * w;
                }
            }
            image.data[row * cols + col] = acc;
        }
    }
    image
}

/// Renders the line-integral image of a set of (already warped) kernels.
pub fn render(kernels: &[Kernel3], pose: &ViewPose, geom: &ScanGeometry, cfg: &SplatConfig) -> DetectorImage {
    let splats = project_all(kernels, pose, geom, cfg);
    render_splats(&splats, geom.detector.rows, geom.detector.cols, cfg)
}

/// Gradients of a scalar loss with respect to the kernels that were rendered.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrad {
    /// With respect to the activated density `ρ`.
    pub density: Vec<f64>,
    pub mean: Vec<Vector3<f64>>,
    /// Symmetric: `dL = Σ_ij G_ij dΣ_ij` for symmetric perturbations.
    pub cov: Vec<Matrix3<f64>>,
    /// Norm of the gradient with respect to the projected center, in pixels.
    pub image_mean_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

impl RenderGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            density: vec![0.0; n],
            mean: vec![Vector3::zeros(); n],
            cov: vec![Matrix3::zeros(); n],
            image_mean_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }
}

/// Per-splat image-space partials: amplitude, center (2), covariance (xx, xy, yy).
type Partial = [f64; 6];

fn tile_partials(splats: &[Splat2D], bins: &TileBins, tile_index: usize, grad: &DetectorImage) -> Vec<Partial> {
    let tile = bins.tile;
    let ty = tile_index / bins.tiles_x;
    let tx = tile_index % bins.tiles_x;
    let row_base = ty * tile;
    let col_base = tx * tile;
    let row_last = (row_base + tile).min(grad.rows) - 1;
    let col_last = (col_base + tile).min(grad.cols) - 1;
    bins.lists[tile_index]
        .iter()
        .map(|&si| {
            let s = &splats[si as usize];
            let mut p = [0.0; 6];
            for row in s.bbox.row0.max(row_base)..=s.bbox.row1.min(row_last) {
                for col in s.bbox.col0.max(col_base)..=s.bbox.col1.min(col_last) {
                    let g = grad.data[row * grad.cols + col];
                    if g == 0.0 {
                        continue;
                    }
                    let (w, d) = splat_weight(s, row, col);
                    let cd = s.conic * d;
                    let gw = g * w;
                    let ga = gw * s.amplitude;
                    p[0] += gw;
                    p[1] += ga * cd.x;
                    p[2] += ga * cd.y;
                    p[3] += 0.5 * ga * cd.x * cd.x;
                    p[4] += 0.5 * ga * cd.x * cd.y;
                    p[5] += 0.5 * ga * cd.y * cd.y;
                }
            }
            p
        })
        .collect()
}

fn image_space_partials(splats: &[Splat2D], grad: &DetectorImage, cfg: &SplatConfig) -> Vec<Partial> {
    let bins = bin_splats(splats, grad.rows, grad.cols, cfg.tile_size);
    let n_tiles = bins.tiles_x * bins.tiles_y;
    if cfg.deterministic {
        let per_tile: Vec<Vec<Partial>> = (0..n_tiles)
            .into_par_iter()
            .map(|t| tile_partials(splats, &bins, t, grad))
            .collect();
        let mut out = vec![[0.0; 6]; splats.len()];
        for (t, parts) in per_tile.iter().enumerate() {
            for (&si, p) in bins.lists[t].iter().zip(parts) {
                let o = &mut out[si as usize];
                for c in 0..6 {
                    o[c] += p[c];
                }
            }
        }
        out
    } else {
        (0..n_tiles)
            .into_par_iter()
            .fold(
                || vec![[0.0; 6]; splats.len()],
                |mut acc, t| {
                    for (&si, p) in bins.lists[t].iter().zip(tile_partials(splats, &bins, t, grad)) {
                        for c in 0..6 {
                            acc[si as usize][c] += p[c];
                        }
                    }
                    acc
                },
            )
            .reduce(
                || vec![[0.0; 6]; splats.len()],
                |mut a, b| {
                    for (x, y) in a.iter_mut().zip(b) {
                        for c in 0..6 {
                            x[c] += y[c];
                        }
                    }
                    a
                },
            )
    }
}

/// Backward pass of [`render_splats`] chained to the 3D kernel parameters.
pub fn splats_backward(
    splats: &[Splat2D],
    kernels: &[Kernel3],
    pose: &ViewPose,
    grad: &DetectorImage,
    cfg: &SplatConfig,
) -> RenderGrad {
    let partials = image_space_partials(splats, grad, cfg);
    let mut out = RenderGrad::zeros(kernels.len());
    let rot = pose.rotation;
    for (s, p) in splats.iter().zip(&partials) {
        let n = s.kernel;
        let k = &kernels[n];
        let g_amp = p[0];
        let g_center = Vector2::new(p[1], p[2]);

        let j = &s.jacobian;
        let g_t = Vector3::new(
            j[(0, 0)] * g_center.x + j[(1, 0)] * g_center.y,
            j[(0, 1)] * g_center.x + j[(1, 1)] * g_center.y,
            j[(0, 2)] * g_center.x + j[(1, 2)] * g_center.y,
        );
        let g_mean = rot.transpose() * g_t;

        let mut g_ray = Matrix3::new(p[3], p[4], 0.0, p[4], p[5], 0.0, 0.0, 0.0, 0.0);
        if let (Some(inv3), Some(inv2)) = (
            s.cov_ray.try_inverse(),
            Matrix2::new(s.cov_ray[(0, 0)], s.cov_ray[(0, 1)], s.cov_ray[(1, 0)], s.cov_ray[(1, 1)]).try_inverse(),
        ) {
            let mut d = inv3;
            d[(0, 0)] -= inv2[(0, 0)];
            d[(0, 1)] -= inv2[(0, 1)];
            d[(1, 0)] -= inv2[(1, 0)];
            d[(1, 1)] -= inv2[(1, 1)];
            g_ray += d * (0.5 * g_amp * k.density * s.factor);
        }
        let g_cam = j.transpose() * g_ray * j;
        let g_cov = rot.transpose() * g_cam * rot;

        out.density[n] = g_amp * s.factor;
        out.mean[n] = g_mean;
        out.cov[n] = (g_cov + g_cov.transpose()) * 0.5;
        out.image_mean_norm[n] = g_center.norm();
        out.visible[n] = true;
    }
    out
}

/// Gradient of a loss with image gradient `grad` with respect to the kernels.
pub fn render_backward(
    kernels: &[Kernel3],
    pose: &ViewPose,
    geom: &ScanGeometry,
    grad: &DetectorImage,
    cfg: &SplatConfig,
) -> RenderGrad {
    let splats = project_all(kernels, pose, geom, cfg);
    splats_backward(&splats, kernels, pose, grad, cfg)
}
