//! Fast built-in checks: finite-difference gradients, the analytic
//! projection oracle, B-spline invariants, noise limits and format round-trips.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cloud::{GaussianCloud, Kernel3};
use crate::engine::MotionState;
use crate::error::Result;
use crate::ffd::{bspline_weights, FfdMotionModel, LatticeSpec, MotionGrad, DECOUPLED_CHANNELS};
use crate::geometry::{perspective_jacobian, DetectorSpec, ScanGeometry};
use crate::phantom::{add_noise, analytic_project, NoiseSpec};
use crate::splat::{project_all_with_jacobians, render, render_splats, splats_backward, DetectorImage, SplatConfig};
use crate::warp::{warp, warp_backward, KernelGradRef, MotionMode, PerGaussianWeights};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
}

fn result(name: &str, value: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: value <= tolerance,
        value,
        tolerance,
    }
}

/// Worst `|a − n| / max(|a|, |n|, floor)` over components, with the floor
/// at `1e-6` of the largest magnitude so exact zeros do not divide by zero.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-6 * scale.max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn central(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

fn small_geometry() -> Result<ScanGeometry> {
    ScanGeometry::circular(1000.0, 1536.0, 8, DetectorSpec::new(32, 32, 3.2), 8.0)
}

fn random_kernel(rng: &mut ChaCha8Rng, spread: f64) -> Kernel3 {
    let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let cov = a * a.transpose() * 6.0 + Matrix3::identity() * 4.0;
    Kernel3 {
        density: rng.random_range(0.01..0.05),
        mean: Vector3::from_fn(|_, _| rng.random_range(-spread..spread)),
        cov,
    }
}

/// Render backward vs central differences (perspective Jacobian frozen).
pub fn check_render_gradient(seed: u64) -> Result<f64> {
    let geom = small_geometry()?;
    let pose = geom.view_pose(3)?;
    let cfg = SplatConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernels: Vec<Kernel3> = (0..4).map(|_| random_kernel(&mut rng, 12.0)).collect();
    let jac: Vec<Matrix3<f64>> = kernels
        .iter()
        .map(|k| perspective_jacobian(&geom, &pose.to_camera(&k.mean)))
        .collect::<Result<_>>()?;
    let target: Vec<f64> = (0..32 * 32).map(|_| rng.random_range(0.0..0.2)).collect();
    let loss = |ks: &[Kernel3]| {
        let img = render_splats(&project_all_with_jacobians(ks, &jac, &pose, &geom, &cfg), 32, 32, &cfg);
        0.5 * img.data.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    };
    let splats = project_all_with_jacobians(&kernels, &jac, &pose, &geom, &cfg);
    let img = render_splats(&splats, 32, 32, &cfg);
    let grad_img = DetectorImage {
        rows: 32,
        cols: 32,
        data: img.data.iter().zip(&target).map(|(a, b)| a - b).collect(),
    };
    let g = splats_backward(&splats, &kernels, &pose, &grad_img, &cfg);

    let (mut an, mut nu) = (Vec::new(), Vec::new());
    for n in 0..kernels.len() {
        let perturbed = |f: &dyn Fn(&mut Kernel3, f64), e: f64| {
            let mut ks = kernels.clone();
            f(&mut ks[n], e);
            loss(&ks)
        };
        an.push(g.density[n]);
        nu.push(central(|e| perturbed(&|k, e| k.density += e, e), 1e-6));
        for a in 0..3 {
            an.push(g.mean[n][a]);
            nu.push(central(|e| perturbed(&|k, e| k.mean[a] += e, e), 1e-4));
        }
        for a in 0..3 {
            for b in a..3 {
                let factor = if a == b { 1.0 } else { 2.0 };
                an.push(factor * g.cov[n][(a, b)]);
                nu.push(central(
                    |e| {
                        perturbed(
                            &|k, e| {
                                k.cov[(a, b)] += e;
                                if a != b {
                                    k.cov[(b, a)] += e;
                                }
                            },
                            e,
                        )
                    },
                    1e-4,
                ));
            }
        }
    }
    Ok(max_rel_error(&an, &nu))
}

/// Scene for warp gradient checks: a few kernels, a small lattice and
/// random motion coefficients.
pub struct WarpScene {
    pub cloud: GaussianCloud,
    pub motion: MotionState,
    pub time: f64,
    pub upstream_density: Vec<f64>,
    pub upstream_mean: Vec<Vector3<f64>>,
    pub upstream_cov: Vec<Matrix3<f64>>,
}

impl WarpScene {
    pub fn new(mode: MotionMode, n_kernels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = LatticeSpec {
            dims: [7, 7, 7],
            spacing: [10.0; 3],
            origin: [-30.0; 3],
        };
        let mut model = FfdMotionModel::zeros(spec, 2, mode.lattice_channels(), 12, 4.0)?;
        for (i, c) in model.lattice.coeffs.iter_mut().enumerate() {
            let position = i % model.lattice.channels < 3;
            *c = rng.random_range(-1.0..1.0) * if position { 0.8 } else { 0.05 };
        }
        for c in &mut model.temporal.controls {
            *c = rng.random_range(-1.0..1.0);
        }
        let mut cloud = GaussianCloud::new();
        for _ in 0..n_kernels {
            cloud.push(
                rng.random_range(0.01..0.05),
                std::array::from_fn(|_| rng.random_range(-12.0..12.0)),
                std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                std::array::from_fn(|_| rng.random_range(0.3..1.5)),
            );
        }
        let per_gaussian = if mode == MotionMode::PerGaussian {
            let mut w = PerGaussianWeights::zeros(n_kernels, 2);
            for (i, v) in w.values.iter_mut().enumerate() {
                *v = rng.random_range(-1.0..1.0) * if i % DECOUPLED_CHANNELS < 3 { 1.0 } else { 0.05 };
            }
            Some(w)
        } else {
            None
        };
        let upstream_density = (0..n_kernels).map(|_| rng.random_range(-1.0..1.0)).collect();
        let upstream_mean = (0..n_kernels)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let upstream_cov = (0..n_kernels)
            .map(|_| {
                let a = Matrix3::from_fn(|_, _| rng.random_range(-0.1..0.1));
                a + a.transpose()
            })
            .collect();
        Ok(Self {
            cloud,
            motion: MotionState { mode, model, per_gaussian },
            time: 5.3,
            upstream_density,
            upstream_mean,
            upstream_cov,
        })
    }

    /// Linear functional of the warped kernels whose gradient is the upstream.
    pub fn loss(&self, cloud: &GaussianCloud, motion: &MotionState) -> Result<f64> {
        let snap = warp(Some(motion.mode), cloud, &motion.model, motion.per_gaussian.as_ref(), self.time)?;
        let mut l = 0.0;
        for (n, k) in snap.kernels.iter().enumerate() {
            l += self.upstream_density[n] * k.density;
            l += self.upstream_mean[n].dot(&k.mean);
            l += self.upstream_cov[n].component_mul(&k.cov).sum();
        }
        Ok(l)
    }

    /// Analytic and numerical gradients over every cloud parameter and a
    /// sample of motion coefficients.
    pub fn gradients(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let m = &self.motion;
        let snap = warp(Some(m.mode), &self.cloud, &m.model, m.per_gaussian.as_ref(), self.time)?;
        let g = warp_backward(
            &snap,
            &self.cloud,
            &m.model,
            m.per_gaussian.as_ref(),
            KernelGradRef {
                density: &self.upstream_density,
                mean: &self.upstream_mean,
                cov: &self.upstream_cov,
            },
        )?;
        let motion_grad = g.motion.clone().unwrap_or_else(|| MotionGrad::zeros_like(&m.model));
        let (mut an, mut nu) = (Vec::new(), Vec::new());
        let h = 1e-4;
        let fd = |edit: &dyn Fn(&mut GaussianCloud, &mut MotionState, f64)| -> Result<f64> {
            let eval = |e: f64| -> Result<f64> {
                let mut c = self.cloud.clone();
                let mut mm = self.motion.clone();
                edit(&mut c, &mut mm, e);
                self.loss(&c, &mm)
            };
            // Richardson-extrapolated central difference.
            let d1 = (eval(h)? - eval(-h)?) / (2.0 * h);
            let d2 = (eval(h / 2.0)? - eval(-h / 2.0)?) / h;
            Ok((4.0 * d2 - d1) / 3.0)
        };
        for n in 0..self.cloud.len() {
            an.push(g.density_raw[n]);
            nu.push(fd(&|c, _, e| c.density_raw[n] += e)?);
            for a in 0..3 {
                an.push(g.means[n][a]);
                nu.push(fd(&|c, _, e| c.means[n][a] += e)?);
                an.push(g.log_scales[n][a]);
                nu.push(fd(&|c, _, e| c.log_scales[n][a] += e)?);
            }
            for a in 0..4 {
                an.push(g.rotations[n][a]);
                nu.push(fd(&|c, _, e| c.rotations[n][a] += e)?);
            }
        }
        for i in 0..m.model.temporal.controls.len() {
            an.push(motion_grad.temporal[i]);
            nu.push(fd(&|_, mm, e| mm.model.temporal.controls[i] += e)?);
        }
        if m.mode == MotionMode::PerGaussian {
            let gw = g.per_gaussian.clone().unwrap_or_default();
            for i in 0..gw.len() {
                an.push(gw[i]);
                nu.push(fd(&|_, mm, e| mm.per_gaussian.as_mut().unwrap().values[i] += e)?);
            }
        } else {
            // Every coefficient with a nonzero analytic gradient plus a few zeros.
            let nz: Vec<usize> = (0..motion_grad.lattice.len())
                .filter(|&i| motion_grad.lattice[i] != 0.0)
                .step_by(7)
                .chain([0, motion_grad.lattice.len() - 1])
                .collect();
            for i in nz {
                an.push(motion_grad.lattice[i]);
                nu.push(fd(&|_, mm, e| mm.model.lattice.coeffs[i] += e)?);
            }
        }
        Ok((an, nu))
    }
}

pub fn check_warp_gradient(mode: MotionMode, seed: u64) -> Result<f64> {
    let (an, nu) = WarpScene::new(mode, 3, seed)?.gradients()?;
    Ok(max_rel_error(&an, &nu))
}

/// Largest relative error of the splat render against the analytic line
/// integral, as a fraction of the peak, over `scenes` random single kernels.
pub fn check_splat_oracle(scenes: usize, seed: u64) -> Result<f64> {
    let geom = ScanGeometry::circular(1000.0, 1536.0, 16, DetectorSpec::new(128, 128, 3.2), 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SplatConfig {
        low_pass: 0.0,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..scenes {
        let k = random_kernel(&mut rng, 30.0);
        let pose = geom.view_pose(rng.random_range(0..16))?;
        let a = render(&[k], &pose, &geom, &cfg);
        let b = analytic_project(&[k], &pose, &geom);
        let peak = b.max_value();
        let err = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst = worst.max(err / peak);
    }
    Ok(worst)
}

pub fn check_partition_of_unity(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let w = bspline_weights(rng.random_range(0.0..1.0))?;
        worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    Ok(worst)
}

/// Affine lattice: displacement and Jacobian reproduced in the interior.
pub fn check_linear_precision(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = LatticeSpec {
        dims: [8, 8, 8],
        spacing: [5.0, 6.0, 7.0],
        origin: [-15.0, -20.0, -25.0],
    };
    let mut model = FfdMotionModel::zeros(spec, 1, 3, 4, 1.0)?;
    let m = Matrix3::from_fn(|_, _| rng.random_range(-0.2..0.2));
    let b = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
    model.lattice.fill_vector_channels(0, 0, |x| m * x + b);
    model.temporal.controls.fill(1.0);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let x = Vector3::from_fn(|a, _| rng.random_range(-8.0..8.0) + [0.0, 0.0, 0.0][a]);
        let d = model.displacement(&x, 1.5)?;
        let k = model.jacobian(&x, 1.5)?;
        worst = worst.max((d - (x + m * x + b)).amax()).max((k - (Matrix3::identity() + m)).amax());
    }
    Ok(worst)
}

pub fn check_noise_limit() -> Result<f64> {
    let img = DetectorImage {
        rows: 1,
        cols: 51,
        data: (0..51).map(|i| i as f64 * 0.1).collect(),
    };
    let mut rng = crate::rng::named_rng(0, crate::rng::Stream::Noise, 0);
    let noisy = add_noise(&img, &NoiseSpec { fluence: 1e12, sigma: 0.0 }, &mut rng)?;
    Ok(noisy.data.iter().zip(&img.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

pub fn check_checkpoint_round_trip(seed: u64) -> Result<f64> {
    let scene = WarpScene::new(MotionMode::PerGaussian, 5, seed)?;
    let path = std::path::Path::new("<memory>");
    let c = crate::io::cloud_from_bytes(path, &crate::io::cloud_to_bytes(&scene.cloud))?;
    let m = crate::io::motion_from_bytes(path, &crate::io::motion_to_bytes(&scene.motion))?;
    Ok(if c == scene.cloud && m == scene.motion { 0.0 } else { 1.0 })
}

/// Runs every check; a check that errors counts as failed.
pub fn run_all() -> Vec<CheckResult> {
    let checks: Vec<(&str, f64, Box<dyn Fn() -> Result<f64>>)> = vec![
        ("render gradient", 1e-4, Box::new(|| check_render_gradient(1))),
        ("warp gradient (di)", 1e-4, Box::new(|| check_warp_gradient(MotionMode::Di, 2))),
        ("warp gradient (decoupled)", 1e-4, Box::new(|| check_warp_gradient(MotionMode::DecoupledFfd, 3))),
        ("warp gradient (per-gaussian)", 1e-4, Box::new(|| check_warp_gradient(MotionMode::PerGaussian, 4))),
        ("splat vs analytic projection", 0.02, Box::new(|| check_splat_oracle(5, 5))),
        ("b-spline partition of unity", 1e-14, Box::new(|| check_partition_of_unity(6))),
        ("ffd linear precision", 1e-10, Box::new(|| check_linear_precision(7))),
        ("noise high-fluence limit", 1e-3, Box::new(check_noise_limit)),
        ("checkpoint round trip", 0.0, Box::new(|| check_checkpoint_round_trip(8))),
    ];
    checks
        .into_iter()
        .map(|(name, tol, f)| match f() {
            Ok(v) => result(name, v, tol),
            Err(_) => CheckResult {
                name: name.into(),
                passed: false,
                value: f64::NAN,
                tolerance: tol,
            },
        })
        .collect()
}
