//! Masked volume metrics and motion-field accuracy.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{rasterize_to_volume, GaussianCloud, GridSpec, Volume};
use crate::engine::MotionState;
use crate::error::{Error, Result};
use crate::ffd::FfdMotionModel;
use crate::geometry::ScanGeometry;
use crate::phantom::TruthBundle;

/// Voxels inside the cylinder (about the z axis) seen by every view.
#[derive(Clone, Debug, PartialEq)]
pub struct FovMask {
    pub grid: GridSpec,
    pub radius: f64,
    pub inside: Vec<bool>,
}

impl FovMask {
    pub fn count(&self) -> usize {
        self.inside.iter().filter(|&&m| m).count()
    }
}

/// Half-fan FOV radius: detector half-width plus offset, scaled to the isocenter.
pub fn fov_radius(geom: &ScanGeometry) -> f64 {
    geom.fov_radius()
}

pub fn fov_mask(geom: &ScanGeometry, grid: &GridSpec) -> Result<FovMask> {
    geom.validate()?;
    grid.validate()?;
    let radius = fov_radius(geom);
    let inside: Vec<bool> = (0..grid.n_voxels())
        .map(|i| {
            let c = grid.center_of(i);
            c.x * c.x + c.y * c.y <= radius * radius
        })
        .collect();
    if !inside.iter().any(|&m| m) {
        return Err(Error::EmptyMask);
    }
    Ok(FovMask {
        grid: *grid,
        radius,
        inside,
    })
}

fn check(volume: &Volume, reference: &Volume, mask: &FovMask) -> Result<()> {
    if volume.grid != reference.grid || volume.grid != mask.grid {
        return Err(Error::DimensionMismatch("volume, reference and mask grids differ".into()));
    }
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

/// Root mean squared difference over masked voxels (mm⁻¹).
pub fn rmse(volume: &Volume, reference: &Volume, mask: &FovMask) -> Result<f64> {
    check(volume, reference, mask)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((a, b), &m) in volume.data.iter().zip(&reference.data).zip(&mask.inside) {
        if m {
            let d = *a as f64 - *b as f64;
            sum += d * d;
            n += 1;
        }
    }
    Ok((sum / n as f64).sqrt())
}

/// `20 log10(max reference in mask / rmse)`; `+∞` when the volumes agree.
pub fn psnr(volume: &Volume, reference: &Volume, mask: &FovMask) -> Result<f64> {
    let e = rmse(volume, reference, mask)?;
    let peak = reference
        .data
        .iter()
        .zip(&mask.inside)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / e).log10())
}

/// `‖D_fit(x,t) − D_truth(x,t)‖` per probe, where both are positions at `t`.
pub fn dvf_error(
    fitted: &FfdMotionModel,
    truth: impl Fn(&Vector3<f64>) -> Result<Vector3<f64>>,
    probes: &[Vector3<f64>],
    t: f64,
) -> Result<Vec<f64>> {
    probes
        .iter()
        .map(|x| Ok((fitted.displacement(x, t)? - truth(x)?).norm()))
        .collect()
}

/// Reference point `y` minimizing `Σ_t ‖D_fit(y, t) − target_t‖²` (Gauss-Newton).
pub fn align_reference(fitted: &FfdMotionModel, targets: &[Vector3<f64>], times: &[f64]) -> Result<Vector3<f64>> {
    let mut y = targets.iter().sum::<Vector3<f64>>() / targets.len().max(1) as f64;
    for _ in 0..30 {
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for (p, &t) in targets.iter().zip(times) {
            let k = fitted.jacobian(&y, t)?;
            let r = fitted.displacement(&y, t)? - p;
            h += k.transpose() * k;
            g += k.transpose() * r;
        }
        let Some(step) = h.lu().solve(&g) else { break };
        y -= step;
        if step.norm() < 1e-10 {
            break;
        }
    }
    Ok(y)
}

/// Endpoint errors after aligning each probe's fitted reference point to its
/// true trajectory. `trajectories[p][i]` is probe `p`'s true position at `times[i]`.
/// Returns errors laid out `[probe][time]`.
pub fn trajectory_error(fitted: &FfdMotionModel, trajectories: &[Vec<Vector3<f64>>], times: &[f64]) -> Result<Vec<Vec<f64>>> {
    trajectories
        .par_iter()
        .map(|traj| {
            let y = align_reference(fitted, traj, times)?;
            traj.iter()
                .zip(times)
                .map(|(p, &t)| Ok((fitted.displacement(&y, t)? - p).norm()))
                .collect()
        })
        .collect()
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeMetrics {
    pub time: f64,
    pub psnr: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DvfSummary {
    /// Aligned trajectory error at blob centers (mm).
    pub median: f64,
    pub mean: f64,
    pub max: f64,
    /// Unaligned `‖D_fit − D_truth‖` at blob centers; `None` when the truth
    /// is not a dense field.
    pub raw_median: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub peak_convention: String,
    pub mask_radius: f64,
    pub per_time: Vec<TimeMetrics>,
    pub mean_psnr: f64,
    pub mean_rmse: f64,
    pub dvf: Option<DvfSummary>,
}

/// `n` uniformly spaced time indices over `[0, n_times − 1]`.
pub fn uniform_times(n_times: usize, n: usize) -> Vec<f64> {
    if n_times <= 1 || n <= 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|i| (i as f64 * (n_times - 1) as f64 / (n - 1) as f64).round())
        .collect()
}

/// Time index whose blob positions are closest to their time average.
pub fn mean_position_time(truth: &TruthBundle) -> Result<f64> {
    let per: Vec<Vec<Vector3<f64>>> = (0..truth.n_times).map(|t| truth.blob_centers(t as f64)).collect::<Result<_>>()?;
    let nb = truth.phantom.blobs.len();
    let avg: Vec<Vector3<f64>> = (0..nb)
        .map(|b| per.iter().map(|c| c[b]).sum::<Vector3<f64>>() / per.len() as f64)
        .collect();
    let mut best = (0.0, f64::INFINITY);
    for (t, c) in per.iter().enumerate() {
        let d: f64 = c.iter().zip(&avg).map(|(a, b)| (a - b).norm_squared()).sum();
        if d < best.1 {
            best = (t as f64, d);
        }
    }
    Ok(best.0)
}

/// Fitted volume at time `t`.
pub fn fitted_volume(cloud: &GaussianCloud, motion: &MotionState, frozen: bool, t: f64, grid: &GridSpec) -> Result<Volume> {
    let snap = motion.snapshot(cloud, t, frozen)?;
    Ok(rasterize_to_volume(&snap.kernels, grid))
}

/// Masked PSNR/RMSE at `times` and the DVF summary at blob centers.
pub fn evaluate_run(
    cloud: &GaussianCloud,
    motion: &MotionState,
    frozen: bool,
    truth: &TruthBundle,
    geom: &ScanGeometry,
    grid: &GridSpec,
    times: &[f64],
) -> Result<Report> {
    if times.is_empty() {
        return Err(Error::Config("no evaluation times".into()));
    }
    let mask = fov_mask(geom, grid)?;
    let per_time: Vec<TimeMetrics> = times
        .par_iter()
        .map(|&t| {
            let fit = fitted_volume(cloud, motion, frozen, t, grid)?;
            let reference = truth.volume(t, grid)?;
            Ok(TimeMetrics {
                time: t,
                psnr: psnr(&fit, &reference, &mask)?,
                rmse: rmse(&fit, &reference, &mask)?,
            })
        })
        .collect::<Result<_>>()?;
    let n = per_time.len() as f64;
    let mean_psnr = per_time.iter().map(|m| m.psnr).sum::<f64>() / n;
    let mean_rmse = per_time.iter().map(|m| m.rmse).sum::<f64>() / n;

    let dvf = if motion.mode == crate::warp::MotionMode::PerGaussian {
        None
    } else {
        let identity;
        let model = if frozen {
            identity = FfdMotionModel::zeros(
                motion.model.lattice.spec,
                motion.model.rank(),
                motion.model.lattice.channels,
                motion.model.temporal.n_times,
                motion.model.temporal.spacing,
            )?;
            &identity
        } else {
            &motion.model
        };
        let centers: Vec<Vec<Vector3<f64>>> = times.iter().map(|&t| truth.blob_centers(t)).collect::<Result<_>>()?;
        let nb = truth.phantom.blobs.len();
        let trajectories: Vec<Vec<Vector3<f64>>> = (0..nb).map(|b| centers.iter().map(|c| c[b]).collect()).collect();
        let mut errs: Vec<f64> = trajectory_error(model, &trajectories, times)?.into_iter().flatten().collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let max = errs.iter().cloned().fold(0.0, f64::max);
        let raw_median = match truth.motion.transform(&Vector3::zeros(), 0.0)? {
            None => None,
            Some(_) => {
                let probes: Vec<Vector3<f64>> = truth.phantom.blobs.iter().map(|b| b.mean).collect();
                let mut raw = Vec::new();
                for &t in times {
                    let truth_at = |x: &Vector3<f64>| Ok(truth.motion.transform(x, t)?.unwrap_or(*x));
                    raw.extend(dvf_error(model, truth_at, &probes, t)?);
                }
                Some(median(&mut raw))
            }
        };
        Some(DvfSummary {
            median: median(&mut errs),
            mean,
            max,
            raw_median,
        })
    };
    Ok(Report {
        peak_convention: "max of the ground-truth volume inside the FOV mask, per time point".into(),
        mask_radius: mask.radius,
        per_time,
        mean_psnr,
        mean_rmse,
        dvf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ffd::LatticeSpec;
    use crate::geometry::DetectorSpec;
    use approx::assert_relative_eq;

    fn grid() -> GridSpec {
        GridSpec::centered([12, 12, 6], 2.0)
    }

    fn vol(f: impl Fn(usize) -> f32) -> Volume {
        let g = grid();
        Volume {
            grid: g,
            data: (0..g.n_voxels()).map(f).collect(),
        }
    }

    fn mask() -> FovMask {
        let geom = ScanGeometry::circular(1000.0, 1536.0, 4, DetectorSpec::new(16, 16, 1.6), 0.0).unwrap();
        fov_mask(&geom, &grid()).unwrap()
    }

    #[test]
    fn fov_radius_formulas() {
        let g = ScanGeometry::circular(1000.0, 1536.0, 4, DetectorSpec::new(512, 512, 0.8), 116.0).unwrap();
        assert_relative_eq!(fov_radius(&g), (204.8 + 116.0) * 1000.0 / 1536.0, epsilon = 1e-12);
        let g = ScanGeometry::circular(1000.0, 1536.0, 4, DetectorSpec::new(128, 128, 1.6), 0.0).unwrap();
        assert_relative_eq!(fov_radius(&g), 102.4 * 1000.0 / 1536.0, epsilon = 1e-12);
    }

    #[test]
    fn rmse_and_psnr_closed_forms() {
        let m = mask();
        let r = vol(|i| (i % 7) as f32 * 0.01);
        assert_eq!(rmse(&r, &r, &m).unwrap(), 0.0);
        assert_eq!(psnr(&r, &r, &m).unwrap(), f64::INFINITY);
        let shifted = vol(|i| (i % 7) as f32 * 0.01 + 0.25);
        assert_relative_eq!(rmse(&shifted, &r, &m).unwrap(), 0.25, max_relative = 1e-6);
        let peak = 0.06f32 as f64;
        let tenth = vol(|i| ((i % 7) as f32 * 0.01) + (peak / 10.0) as f32);
        assert_relative_eq!(psnr(&tenth, &r, &m).unwrap(), 20.0, epsilon = 1e-4);
    }

    #[test]
    fn outside_mask_is_ignored() {
        let m = mask();
        let r = vol(|i| (i % 5) as f32);
        let mut p = r.clone();
        let outside = m.inside.iter().position(|&x| !x).unwrap();
        p.data[outside] += 100.0;
        assert_eq!(rmse(&p, &r, &m).unwrap(), 0.0);
    }

    #[test]
    fn identity_fit_against_translation_truth() {
        let g = grid();
        let model = FfdMotionModel::zeros(LatticeSpec::covering(&g, 2.0), 1, 3, 5, 1.0).unwrap();
        let probes = vec![Vector3::new(1.0, 2.0, 0.0), Vector3::new(-3.0, 0.0, 1.0)];
        let e = dvf_error(&model, |x| Ok(x + Vector3::new(0.0, 0.0, 2.5)), &probes, 2.0).unwrap();
        assert_eq!(e, vec![2.5, 2.5]);
        let e = dvf_error(&model, |x| Ok(*x), &probes, 2.0).unwrap();
        assert_eq!(e, vec![0.0, 0.0]);
    }

    #[test]
    fn alignment_removes_constant_offset() {
        let g = grid();
        let mut model = FfdMotionModel::zeros(LatticeSpec::covering(&g, 2.0), 1, 3, 5, 1.0).unwrap();
        model.lattice.fill_vector_channels(0, 0, |_| Vector3::new(0.0, 0.0, 1.0));
        for (j, c) in model.temporal.controls.iter_mut().enumerate() {
            *c = j as f64;
        }
        let times = [0.0, 1.0, 2.0, 3.0, 4.0];
        let x = Vector3::new(1.0, -1.0, 0.5);
        // Truth equals the fit seen from a reference shifted by 0.7 in z.
        let traj: Vec<Vector3<f64>> = times
            .iter()
            .map(|&t| model.displacement(&(x + Vector3::new(0.0, 0.0, 0.7)), t).unwrap())
            .collect();
        let e = trajectory_error(&model, &[traj], &times).unwrap();
        assert!(e[0].iter().all(|&v| v < 1e-9));
    }

    #[test]
    fn uniform_times_cover_range() {
        assert_eq!(uniform_times(60, 10), vec![0.0, 7.0, 13.0, 20.0, 26.0, 33.0, 39.0, 46.0, 52.0, 59.0]);
        assert_eq!(uniform_times(1, 10), vec![0.0]);
    }
}
