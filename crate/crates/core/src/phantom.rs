//! Synthetic dynamic data: Gaussian-blob phantoms, breathing traces,
//! exact cone-beam line integrals and the detector noise model.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{quat_to_rotation, rasterize_to_volume, GridSpec, Kernel3, Volume};
use crate::error::{Error, Result};
use crate::ffd::{FfdMotionModel, LatticeSpec, POSITION_CHANNELS};
use crate::geometry::{DetectorSpec, ScanGeometry, ViewPose};
use crate::rng::{named_rng, Stream};
use crate::splat::DetectorImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobPhantom {
    pub blobs: Vec<Kernel3>,
}

impl BlobPhantom {
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.blobs.iter().enumerate() {
            if !(b.density >= 0.0) || b.cov.cholesky().is_none() {
                return Err(Error::Config(format!("blob {i} needs ρ >= 0 and an SPD covariance")));
            }
        }
        Ok(())
    }
}

/// Exact line integral of one blob along the ray `source + s·dir` (unit `dir`).
pub fn blob_line_integral(blob: &Kernel3, precision: &Matrix3<f64>, source: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
    let v = source - blob.mean;
    let ad = precision * dir;
    let dad = dir.dot(&ad);
    let dav = v.dot(&ad);
    let vav = v.dot(&(precision * v));
    blob.density * (2.0 * PI / dad).sqrt() * (-0.5 * (vav - dav * dav / dad)).exp()
}

/// Cone-beam projection of the blobs computed in closed form per pixel.
pub fn analytic_project(blobs: &[Kernel3], pose: &ViewPose, geom: &ScanGeometry) -> DetectorImage {
    let (rows, cols) = (geom.detector.rows, geom.detector.cols);
    let precisions: Vec<Matrix3<f64>> = blobs
        .iter()
        .map(|b| b.cov.try_inverse().unwrap_or_else(Matrix3::zeros))
        .collect();
    let source = pose.source_position();
    let mut image = DetectorImage::zeros(rows, cols);
    image.data.par_chunks_mut(cols).enumerate().for_each(|(row, line)| {
        for (col, px) in line.iter_mut().enumerate() {
            let dir = pose.pixel_ray(geom, col as f64, row as f64);
            *px = blobs
                .iter()
                .zip(&precisions)
                .map(|(b, a)| blob_line_integral(b, a, &source, &dir))
                .sum();
        }
    });
    image
}

/// Per-cycle amplitude-scaled `(1 − cos)/2` breathing trace with linear drift.
///
/// `phase_shift` (in cycles) delays the waveform without changing the
/// per-cycle scale draws.
pub fn breathing_trace(
    n_times: usize,
    n_cycles: usize,
    amp_range: [f64; 2],
    drift: f64,
    phase_shift: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_cycles == 0 || amp_range[0] > amp_range[1] {
        return Err(Error::Config("breathing trace needs n_cycles >= 1 and amp_range[0] <= amp_range[1]".into()));
    }
    let mut rng = named_rng(seed, Stream::Simulate, 0);
    let scales: Vec<f64> = (0..n_cycles + 1)
        .map(|_| {
            if amp_range[0] == amp_range[1] {
                amp_range[0]
            } else {
                rng.random_range(amp_range[0]..=amp_range[1])
            }
        })
        .collect();
    let per_cycle = n_times as f64 / n_cycles as f64;
    Ok((0..n_times)
        .map(|t| {
            let phase = t as f64 / per_cycle - phase_shift;
            let cycle = phase.floor().clamp(0.0, n_cycles as f64) as usize;
            scales[cycle] * (1.0 - (2.0 * PI * phase).cos()) / 2.0 + drift * t as f64 / n_times as f64
        })
        .collect())
}

/// Per-blob rigid-body-free trajectory: `μ + a₁ v + a₂ w`, covariance rotated
/// about z by `a₁ · spin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobTrajectory {
    pub primary: [f64; 3],
    pub secondary: [f64; 3],
    pub spin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruthMotion {
    Static,
    Ffd { model: FfdMotionModel },
    /// Two traces drive independent per-blob trajectories; not representable by a smooth lattice.
    Analytic {
        traces: [Vec<f64>; 2],
        trajectories: Vec<BlobTrajectory>,
    },
}

impl TruthMotion {
    /// Position at time `t` of reference point `x`, when defined everywhere.
    pub fn transform(&self, x: &Vector3<f64>, t: f64) -> Result<Option<Vector3<f64>>> {
        match self {
            TruthMotion::Static => Ok(Some(*x)),
            TruthMotion::Ffd { model } => model.displacement(x, t).map(Some),
            TruthMotion::Analytic { .. } => Ok(None),
        }
    }
}

/// Blobs transported to time index `t`.
pub fn phantom_at(phantom: &BlobPhantom, motion: &TruthMotion, t: f64) -> Result<BlobPhantom> {
    let blobs = match motion {
        TruthMotion::Static => phantom.blobs.clone(),
        TruthMotion::Ffd { model } => phantom
            .blobs
            .iter()
            .map(|b| {
                let k = model.jacobian(&b.mean, t)?;
                let cov = k * b.cov * k.transpose();
                Ok(Kernel3 {
                    density: b.density,
                    mean: model.displacement(&b.mean, t)?,
                    cov: (cov + cov.transpose()) * 0.5,
                })
            })
            .collect::<Result<_>>()?,
        TruthMotion::Analytic { traces, trajectories } => {
            if trajectories.len() != phantom.blobs.len() {
                return Err(Error::DimensionMismatch("one trajectory per blob".into()));
            }
            let i = t.round();
            if i < 0.0 || i as usize >= traces[0].len() || i != t {
                return Err(Error::OutOfDomain {
                    value: t,
                    lo: 0.0,
                    hi: traces[0].len() as f64 - 1.0,
                });
            }
            let (a1, a2) = (traces[0][i as usize], traces[1][i as usize]);
            phantom
                .blobs
                .iter()
                .zip(trajectories)
                .map(|(b, tr)| {
                    let r = crate::geometry::rotation_z(a1 * tr.spin);
                    Kernel3 {
                        density: b.density,
                        mean: b.mean + a1 * Vector3::from(tr.primary) + a2 * Vector3::from(tr.secondary),
                        cov: r * b.cov * r.transpose(),
                    }
                })
                .collect()
        }
    };
    Ok(BlobPhantom { blobs })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Unattenuated photon count per pixel.
    pub fluence: f64,
    /// Electronic noise std, in counts.
    pub sigma: f64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fluence > 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::Config("noise needs fluence > 0 and sigma >= 0".into()));
        }
        Ok(())
    }
}

/// Count-domain noise: `I = Poisson(λ e^{−p}) + N(0, σ²)`, clamped to ≥ 1,
/// returned as `−ln(I/λ)`.
pub fn add_noise(image: &DetectorImage, noise: &NoiseSpec, rng: &mut impl Rng) -> Result<DetectorImage> {
    noise.validate()?;
    let electronic = Normal::new(0.0, noise.sigma).map_err(|e| Error::NumericDomain(e.to_string()))?;
    let mut out = image.clone();
    for p in &mut out.data {
        let mean = noise.fluence * (-*p).exp();
        let counts = if mean > 0.0 {
            Poisson::new(mean).map_err(|e| Error::NumericDomain(e.to_string()))?.sample(rng)
        } else {
            0.0
        };
        let i = (counts + electronic.sample(rng)).max(1.0);
        *p = -(i / noise.fluence).ln();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Static,
    Ffd,
    Analytic,
}

/// Everything needed to regenerate a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub views: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixel_pitch: f64,
    pub sid: f64,
    pub sdd: f64,
    pub detector_offset: f64,
    pub grid_dims: usize,
    pub voxel: f64,
    pub n_blobs: usize,
    /// Feature blobs lie within this distance of the isocenter (mm).
    pub feature_radius: f64,
    pub motion: MotionKind,
    pub n_cycles: usize,
    pub amp_range: [f64; 2],
    pub drift: f64,
    /// Peak superior-inferior displacement (mm).
    pub si_amplitude: f64,
    /// Peak anterior-posterior displacement (mm) of the second motion component.
    pub ap_amplitude: f64,
    pub lattice_spacing_voxels: f64,
    pub noise: Option<NoiseSpec>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            views: 60,
            rows: 128,
            cols: 128,
            pixel_pitch: 1.6,
            sid: 1000.0,
            sdd: 1536.0,
            detector_offset: 0.0,
            grid_dims: 64,
            voxel: 1.6,
            n_blobs: 20,
            feature_radius: 35.0,
            motion: MotionKind::Ffd,
            n_cycles: 4,
            amp_range: [0.8, 1.2],
            drift: 0.1,
            si_amplitude: 6.0,
            ap_amplitude: 2.5,
            lattice_spacing_voxels: 8.0,
            noise: None,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.rows == 0 || self.cols == 0 || self.grid_dims == 0 || self.n_blobs == 0 {
            return Err(Error::Config("views, detector size, grid and blob count must be >= 1".into()));
        }
        if !(self.voxel > 0.0 && self.feature_radius > 0.0) {
            return Err(Error::Config("voxel and feature_radius must be positive".into()));
        }
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        self.geometry()?.validate()
    }

    pub fn geometry(&self) -> Result<ScanGeometry> {
        ScanGeometry::circular(
            self.sid,
            self.sdd,
            self.views,
            DetectorSpec::new(self.rows, self.cols, self.pixel_pitch),
            self.detector_offset,
        )
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::centered([self.grid_dims; 3], self.voxel)
    }
}

/// One broad body blob plus compact feature blobs near the isocenter.
pub fn desk_phantom(n_blobs: usize, feature_radius: f64, seed: u64) -> Result<BlobPhantom> {
    let mut rng = named_rng(seed, Stream::Simulate, 1);
    let mut blobs = vec![Kernel3 {
        density: 0.008,
        mean: Vector3::zeros(),
        cov: Matrix3::from_diagonal(&Vector3::new(16.0f64.powi(2), 13.0f64.powi(2), 14.0f64.powi(2))),
    }];
    while blobs.len() < n_blobs {
        let p = Vector3::from_fn(|_, _| rng.random_range(-feature_radius..feature_radius));
        if p.norm() > feature_radius {
            continue;
        }
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let Ok(r) = quat_to_rotation(&q) else { continue };
        let s = Vector3::from_fn(|_, _| rng.random_range(2.5f64..5.0));
        blobs.push(Kernel3 {
            density: rng.random_range(0.01..0.03),
            mean: p,
            cov: r * Matrix3::from_diagonal(&s.map(|v| v * v)) * r.transpose(),
        });
    }
    Ok(BlobPhantom { blobs })
}

/// Rank-2 truth: rank 0 moves tissue superior-inferior, rank 1 anterior-
/// posterior, both tapering smoothly away from the center.
pub fn desk_truth_model(spec: &DatasetSpec, traces: &[Vec<f64>; 2]) -> Result<FfdMotionModel> {
    let n_times = spec.views;
    let lattice = LatticeSpec::covering(&spec.grid(), spec.lattice_spacing_voxels);
    let mut model = FfdMotionModel::zeros(lattice, 2, POSITION_CHANNELS, n_times, 1.0)?;
    let width = 0.45 * spec.grid_dims as f64 * spec.voxel;
    let si = spec.si_amplitude;
    let ap = spec.ap_amplitude;
    model.lattice.fill_vector_channels(0, 0, |x| {
        let g = (-(x.x * x.x + x.y * x.y) / (2.0 * width * width)).exp();
        Vector3::new(0.0, 0.0, si * g * (1.0 + 0.2 * x.z / width))
    });
    model.lattice.fill_vector_channels(1, 0, |x| {
        let g = (-(x.norm_squared()) / (2.0 * width * width)).exp();
        Vector3::new(0.15 * ap * x.x / width, ap * g, 0.0)
    });
    // Control j sits at time j − 1; ends repeat the first/last sample.
    let nc = model.temporal.n_control;
    for (r, trace) in traces.iter().enumerate() {
        for j in 0..nc {
            let t = (j as isize - 1).clamp(0, n_times as isize - 1) as usize;
            model.temporal.controls[r * nc + j] = trace[t];
        }
    }
    Ok(model)
}

/// Ground truth of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthBundle {
    pub phantom: BlobPhantom,
    pub motion: TruthMotion,
    pub grid: GridSpec,
    pub n_times: usize,
}

impl TruthBundle {
    pub fn at(&self, t: f64) -> Result<BlobPhantom> {
        phantom_at(&self.phantom, &self.motion, t)
    }

    pub fn volume(&self, t: f64, grid: &GridSpec) -> Result<Volume> {
        Ok(rasterize_to_volume(&self.at(t)?.blobs, grid))
    }

    /// Average of the ground-truth volumes over every time index.
    pub fn time_averaged_volume(&self, grid: &GridSpec) -> Result<Volume> {
        let mut acc = vec![0.0f64; grid.n_voxels()];
        for t in 0..self.n_times {
            let v = self.volume(t as f64, grid)?;
            for (a, x) in acc.iter_mut().zip(&v.data) {
                *a += *x as f64;
            }
        }
        let n = self.n_times.max(1) as f64;
        Ok(Volume {
            grid: *grid,
            data: acc.into_iter().map(|a| (a / n) as f32).collect(),
        })
    }

    /// Blob centers at time `t`.
    pub fn blob_centers(&self, t: f64) -> Result<Vec<Vector3<f64>>> {
        Ok(self.at(t)?.blobs.into_iter().map(|b| b.mean).collect())
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub geometry: ScanGeometry,
    /// Line-integral images, quantized to f32 precision.
    pub projections: Vec<DetectorImage>,
    pub truth: TruthBundle,
    pub spec: DatasetSpec,
}

/// Simulates view `i` at time index `i` for every view of `spec`.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let geometry = spec.geometry()?;
    let phantom = desk_phantom(spec.n_blobs, spec.feature_radius, spec.seed)?;
    phantom.validate()?;
    let n_times = spec.views;
    let trace = |shift: f64| breathing_trace(n_times, spec.n_cycles, spec.amp_range, spec.drift, shift, spec.seed);
    let motion = match spec.motion {
        MotionKind::Static => TruthMotion::Static,
        MotionKind::Ffd => TruthMotion::Ffd {
            model: desk_truth_model(spec, &[trace(0.0)?, trace(0.25)?])?,
        },
        MotionKind::Analytic => {
            let mut rng = named_rng(spec.seed, Stream::Simulate, 2);
            let trajectories = phantom
                .blobs
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                    BlobTrajectory {
                        primary: [0.0, 0.0, sign * spec.si_amplitude * rng.random_range(0.5..1.0)],
                        secondary: [
                            spec.ap_amplitude * rng.random_range(-0.5..0.5),
                            sign * spec.ap_amplitude,
                            0.0,
                        ],
                        spin: rng.random_range(-0.3..0.3),
                    }
                })
                .collect();
            TruthMotion::Analytic {
                traces: [trace(0.0)?, trace(0.25)?],
                trajectories,
            }
        }
    };
    let truth = TruthBundle {
        phantom,
        motion,
        grid: spec.grid(),
        n_times,
    };
    let projections = (0..geometry.n_views())
        .into_par_iter()
        .map(|v| {
            let pose = geometry.view_pose(v)?;
            let snap = truth.at(pose.time_index as f64)?;
            let mut image = analytic_project(&snap.blobs, &pose, &geometry);
            if let Some(noise) = &spec.noise {
                image = add_noise(&image, noise, &mut named_rng(spec.seed, Stream::Noise, v as u64))?;
            }
            image.quantize_f32();
            Ok(image)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        geometry,
        projections,
        truth,
        spec: spec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn geom() -> ScanGeometry {
        ScanGeometry::circular(1000.0, 1536.0, 8, DetectorSpec::new(33, 33, 1.6), 0.0).unwrap()
    }

    #[test]
    fn empty_phantom_projects_to_zero() {
        let g = geom();
        let img = analytic_project(&[], &g.view_pose(0).unwrap(), &g);
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn central_ray_through_isotropic_blob() {
        let g = geom();
        let b = Kernel3 {
            density: 0.02,
            mean: Vector3::zeros(),
            cov: Matrix3::identity() * 9.0,
        };
        let img = analytic_project(&[b], &g.view_pose(3).unwrap(), &g);
        assert_relative_eq!(img.at(16, 16), 0.02 * 3.0 * (2.0 * PI).sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn line_integral_matches_quadrature() {
        let b = Kernel3 {
            density: 0.015,
            mean: Vector3::new(3.0, -2.0, 5.0),
            cov: Matrix3::new(16.0, 3.0, 1.0, 3.0, 9.0, -2.0, 1.0, -2.0, 6.0),
        };
        let a = b.cov.try_inverse().unwrap();
        let src = Vector3::new(-1000.0, 10.0, -4.0);
        let dir = (Vector3::new(0.0, -1.0, 6.0) - src).normalize();
        let exact = blob_line_integral(&b, &a, &src, &dir);
        // Composite Simpson over ±12σ around the closest approach.
        let s0 = (b.mean - src).dot(&dir);
        let (lo, hi, n) = (s0 - 60.0, s0 + 60.0, 20_000);
        let h = (hi - lo) / n as f64;
        let f = |s: f64| {
            let d = src + dir * s - b.mean;
            b.density * (-0.5 * d.dot(&(a * d))).exp()
        };
        let mut sum = f(lo) + f(hi);
        for i in 1..n {
            sum += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        assert_relative_eq!(exact, sum * h / 3.0, max_relative = 1e-8);
    }

    #[test]
    fn projection_is_additive_and_linear() {
        let g = geom();
        let pose = g.view_pose(2).unwrap();
        let a = Kernel3 {
            density: 0.01,
            mean: Vector3::new(4.0, 0.0, 1.0),
            cov: Matrix3::identity() * 16.0,
        };
        let mut b = a;
        b.mean = Vector3::new(-6.0, 3.0, 0.0);
        b.density = 0.03;
        let both = analytic_project(&[a, b], &pose, &g);
        let ia = analytic_project(&[a], &pose, &g);
        let mut a2 = a;
        a2.density *= 2.0;
        let ia2 = analytic_project(&[a2], &pose, &g);
        let ib = analytic_project(&[b], &pose, &g);
        for i in 0..both.data.len() {
            assert_relative_eq!(both.data[i], ia.data[i] + ib.data[i], epsilon = 1e-15);
            assert_relative_eq!(ia2.data[i], 2.0 * ia.data[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn periodic_trace_without_variability() {
        let tr = breathing_trace(60, 4, [1.0, 1.0], 0.0, 0.0, 1).unwrap();
        for t in 0..45 {
            assert_relative_eq!(tr[t], tr[t + 15], epsilon = 1e-12);
        }
        assert_eq!(tr[0], 0.0);
        assert_relative_eq!(tr[7], (1.0 - (2.0 * PI * 7.0 / 15.0).cos()) / 2.0, epsilon = 1e-15);
        let a = breathing_trace(60, 4, [0.8, 1.2], 0.1, 0.0, 5).unwrap();
        assert_eq!(a, breathing_trace(60, 4, [0.8, 1.2], 0.1, 0.0, 5).unwrap());
        assert!(a.iter().all(|&v| (0.0..=1.3).contains(&v)));
        assert!(breathing_trace(60, 0, [1.0, 1.0], 0.0, 0.0, 1).is_err());
    }

    #[test]
    fn noise_limits() {
        let img = DetectorImage {
            rows: 1,
            cols: 6,
            data: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
        };
        let mut rng = named_rng(1, Stream::Noise, 0);
        let n = add_noise(&img, &NoiseSpec { fluence: 1e12, sigma: 0.0 }, &mut rng).unwrap();
        for (a, b) in n.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 1e-3);
        }
        let spec = NoiseSpec { fluence: 1e8, sigma: 4.0 };
        let a = add_noise(&img, &spec, &mut named_rng(1, Stream::Noise, 3)).unwrap();
        let b = add_noise(&img, &spec, &mut named_rng(1, Stream::Noise, 3)).unwrap();
        assert_eq!(a, b);
        assert!(add_noise(&img, &NoiseSpec { fluence: 0.0, sigma: 1.0 }, &mut rng).is_err());
    }

    #[test]
    fn translation_truth_shifts_every_blob() {
        let spec = DatasetSpec {
            grid_dims: 32,
            views: 12,
            ..Default::default()
        };
        let lattice = LatticeSpec::covering(&spec.grid(), 8.0);
        let mut model = FfdMotionModel::zeros(lattice, 1, 3, 12, 1.0).unwrap();
        model.lattice.fill_vector_channels(0, 0, |_| Vector3::new(0.0, 0.0, 1.0));
        model.temporal.controls.fill(2.5);
        let ph = desk_phantom(5, 20.0, 3).unwrap();
        let moved = phantom_at(&ph, &TruthMotion::Ffd { model }, 4.0).unwrap();
        for (a, b) in moved.blobs.iter().zip(&ph.blobs) {
            assert_relative_eq!(a.mean - b.mean, Vector3::new(0.0, 0.0, 2.5), epsilon = 1e-12);
            assert_relative_eq!(a.cov, b.cov, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_amplitude_time_equals_reference() {
        let spec = DatasetSpec {
            grid_dims: 32,
            views: 12,
            n_cycles: 2,
            drift: 0.0,
            amp_range: [1.0, 1.0],
            ..Default::default()
        };
        let ph = desk_phantom(6, 20.0, 3).unwrap();
        let tr = [
            breathing_trace(12, 2, [1.0, 1.0], 0.0, 0.0, 1).unwrap(),
            vec![0.0; 12],
        ];
        assert_eq!(tr[0][0], 0.0);
        let model = desk_truth_model(&spec, &tr).unwrap();
        // The spline at t=0 blends controls at t = −1, 0, 1; the first two repeat 0.
        let moved = phantom_at(&ph, &TruthMotion::Ffd { model }, 0.0).unwrap();
        let d = (moved.blobs[1].mean - ph.blobs[1].mean).norm();
        assert!(d < spec.si_amplitude * 0.1);
        let analytic = TruthMotion::Analytic {
            traces: [tr[0].clone(), vec![0.0; 12]],
            trajectories: vec![
                BlobTrajectory {
                    primary: [0.0, 0.0, 3.0],
                    secondary: [0.0; 3],
                    spin: 0.2
                };
                6
            ],
        };
        assert_eq!(phantom_at(&ph, &analytic, 0.0).unwrap(), ph);
        assert!(phantom_at(&ph, &analytic, 0.5).is_err());
    }

    #[test]
    fn small_dataset_is_reproducible() {
        let spec = DatasetSpec {
            views: 3,
            rows: 24,
            cols: 24,
            pixel_pitch: 6.0,
            grid_dims: 16,
            voxel: 6.0,
            n_blobs: 4,
            n_cycles: 1,
            noise: Some(NoiseSpec { fluence: 1e8, sigma: 4.0 }),
            ..Default::default()
        };
        let a = make_dataset(&spec).unwrap();
        let b = make_dataset(&spec).unwrap();
        assert_eq!(a.projections, b.projections);
        assert_eq!(a.projections.len(), 3);
        assert!(a.projections[0].max_value() > 0.1);
    }
}
