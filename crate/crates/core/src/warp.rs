//! Transport of the reference cloud to an acquisition time.
//!
//! * [`MotionMode::Di`]: means follow `D(μ₀, t)` and covariances the
//!   congruence `K Σ₀ Kᵀ` with `K = ∇D(μ₀, t)`.
//! * [`MotionMode::DecoupledFfd`]: the lattice carries separate position,
//!   log-scale and quaternion channels that evolve independently.
//! * [`MotionMode::PerGaussian`]: the same channels stored per kernel,
//!   without a lattice; only the temporal spline is shared.
//!
//! Density is never time-dependent.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{assemble_covariance, assemble_covariance_backward, softplus_grad, GaussianCloud, Kernel3};
use crate::error::{Error, Result};
use crate::ffd::{FfdMotionModel, MotionGrad, TemporalSpline, DECOUPLED_CHANNELS};

/// `K` with `det K` at or below this is regularized before the congruence.
pub const DET_FLOOR: f64 = 1e-3;
/// Singular values of a regularized `K` are raised to at least this.
pub const SINGULAR_FLOOR: f64 = 0.05;

const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionMode {
    /// Deformation-informed: one DVF drives mean, scale and rotation.
    Di,
    /// Ablation 1: independent lattice channels per attribute.
    #[serde(alias = "decoupled")]
    DecoupledFfd,
    /// Ablation 2: per-kernel basis weights, no lattice.
    #[serde(alias = "pergaussian")]
    PerGaussian,
}

impl MotionMode {
    pub fn lattice_channels(self) -> usize {
        match self {
            MotionMode::Di => crate::ffd::POSITION_CHANNELS,
            MotionMode::DecoupledFfd | MotionMode::PerGaussian => DECOUPLED_CHANNELS,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MotionMode::Di => "di",
            MotionMode::DecoupledFfd => "decoupled",
            MotionMode::PerGaussian => "pergaussian",
        }
    }
}

impl std::str::FromStr for MotionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "di" => Ok(MotionMode::Di),
            "decoupled" | "decoupled-ffd" => Ok(MotionMode::DecoupledFfd),
            "pergaussian" | "per-gaussian" => Ok(MotionMode::PerGaussian),
            other => Err(Error::Config(format!("unknown motion mode '{other}'"))),
        }
    }
}

/// Per-kernel motion weights for [`MotionMode::PerGaussian`]: 10 channels
/// (position 3, log-scale 3, quaternion 4) per rank.
#[derive(Clone, Debug, PartialEq)]
pub struct PerGaussianWeights {
    pub rank: usize,
    /// Layout `[kernel][rank][channel]`.
    pub values: Vec<f64>,
}

impl PerGaussianWeights {
    pub fn zeros(n_kernels: usize, rank: usize) -> Self {
        Self {
            rank,
            values: vec![0.0; n_kernels * rank * DECOUPLED_CHANNELS],
        }
    }

    pub fn stride(&self) -> usize {
        self.rank * DECOUPLED_CHANNELS
    }

    pub fn n_kernels(&self) -> usize {
        self.values.len() / self.stride()
    }

    pub fn kernel(&self, n: usize) -> &[f64] {
        &self.values[n * self.stride()..(n + 1) * self.stride()]
    }

    /// Weights equal to the lattice interpolation at each reference mean.
    pub fn from_lattice(cloud: &GaussianCloud, model: &FfdMotionModel) -> Result<Self> {
        if model.lattice.channels != DECOUPLED_CHANNELS {
            return Err(Error::Config("lattice lacks the decoupled channels".into()));
        }
        let mut w = Self::zeros(cloud.len(), model.rank());
        let stride = w.stride();
        for (n, chunk) in w.values.chunks_mut(stride).enumerate() {
            let st = model.lattice.stencil(&cloud.mean(n));
            model.lattice.interpolate(&st, chunk);
        }
        Ok(w)
    }
}

#[derive(Clone, Debug)]
struct WarpCache {
    omega: Vec<f64>,
    means0: Vec<[f64; 3]>,
    /// K (regularized when folded); DI only.
    jac: Vec<Matrix3<f64>>,
    cov0: Vec<Matrix3<f64>>,
    /// Warped raw quaternion and log-scale; decoupled modes only.
    q_t: Vec<[f64; 4]>,
    s_t: Vec<[f64; 3]>,
}

/// Kernels at one time index plus what the backward pass needs.
#[derive(Clone, Debug)]
pub struct CloudSnapshot {
    pub time: f64,
    /// `None` for the identity warp (motion bypassed).
    pub mode: Option<MotionMode>,
    pub kernels: Vec<Kernel3>,
    /// Kernels whose `K` had to be regularized.
    pub fold_incidents: usize,
    /// Kernels whose mean was outside the lattice interior.
    pub clamped: usize,
    cache: WarpCache,
}

/// Gradients with respect to the reference cloud and motion parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpGrad {
    pub density_raw: Vec<f64>,
    pub means: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub motion: Option<MotionGrad>,
    pub per_gaussian: Option<Vec<f64>>,
}

/// Upstream gradients with respect to the warped kernels.
#[derive(Clone, Copy, Debug)]
pub struct KernelGradRef<'a> {
    pub density: &'a [f64],
    pub mean: &'a [Vector3<f64>],
    pub cov: &'a [Matrix3<f64>],
}

fn regularize(k: &Matrix3<f64>) -> (Matrix3<f64>, bool) {
    if k.determinant() > DET_FLOOR {
        return (*k, false);
    }
    let svd = k.svd(true, true);
    let s = svd.singular_values.map(|v| v.max(SINGULAR_FLOOR));
    let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
        return (Matrix3::identity(), true);
    };
    (u * Matrix3::from_diagonal(&s) * vt, true)
}

fn sym(m: Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// Reference kernels unchanged; `K = I`.
pub fn warp_identity(cloud: &GaussianCloud, t: f64) -> Result<CloudSnapshot> {
    let kernels = cloud.kernels()?;
    let cov0 = kernels.iter().map(|k| k.cov).collect();
    Ok(CloudSnapshot {
        time: t,
        mode: None,
        fold_incidents: 0,
        clamped: 0,
        cache: WarpCache {
            omega: Vec::new(),
            means0: cloud.means.clone(),
            jac: vec![Matrix3::identity(); cloud.len()],
            cov0,
            q_t: Vec::new(),
            s_t: Vec::new(),
        },
        kernels,
    })
}

/// Deformation-informed warp.
pub fn warp_di(cloud: &GaussianCloud, model: &FfdMotionModel, t: f64) -> Result<CloudSnapshot> {
    let omega = model.temporal_weights(t)?;
    let per: Vec<(Kernel3, Matrix3<f64>, Matrix3<f64>, bool, bool)> = (0..cloud.len())
        .into_par_iter()
        .map(|n| {
            let mu0 = cloud.mean(n);
            let cov0 = cloud.covariance(n)?;
            let st = model.lattice.stencil(&mu0);
            let mean = mu0 + model.displacement_with(&st, &omega);
            let (k, folded) = regularize(&model.jacobian_with(&st, &omega));
            let cov = sym(k * cov0 * k.transpose());
            Ok((
                Kernel3 {
                    density: cloud.density(n),
                    mean,
                    cov,
                },
                k,
                cov0,
                folded,
                st.clamped,
            ))
        })
        .collect::<Result<_>>()?;
    let fold_incidents = per.iter().filter(|p| p.3).count();
    let clamped = per.iter().filter(|p| p.4).count();
    let mut kernels = Vec::with_capacity(per.len());
    let mut jac = Vec::with_capacity(per.len());
    let mut cov0 = Vec::with_capacity(per.len());
    for (kern, k, c0, _, _) in per {
        kernels.push(kern);
        jac.push(k);
        cov0.push(c0);
    }
    Ok(CloudSnapshot {
        time: t,
        mode: Some(MotionMode::Di),
        kernels,
        fold_incidents,
        clamped,
        cache: WarpCache {
            omega,
            means0: cloud.means.clone(),
            jac,
            cov0,
            q_t: Vec::new(),
            s_t: Vec::new(),
        },
    })
}

fn channel_warp(
    cloud: &GaussianCloud,
    t: f64,
    mode: MotionMode,
    omega: Vec<f64>,
    values: impl Fn(usize) -> (Vec<f64>, bool) + Sync,
) -> Result<CloudSnapshot> {
    let ch = DECOUPLED_CHANNELS;
    let per: Vec<(Kernel3, [f64; 4], [f64; 3], bool)> = (0..cloud.len())
        .into_par_iter()
        .map(|n| {
            let (v, clamped) = values(n);
            let mut acc = [0.0; DECOUPLED_CHANNELS];
            for (r, w) in omega.iter().enumerate() {
                for c in 0..ch {
                    acc[c] += w * v[r * ch + c];
                }
            }
            let mu0 = cloud.means[n];
            let s0 = cloud.log_scales[n];
            let q0 = cloud.rotations[n];
            let mean = Vector3::new(mu0[0] + acc[0], mu0[1] + acc[1], mu0[2] + acc[2]);
            let s_t = [s0[0] + acc[3], s0[1] + acc[4], s0[2] + acc[5]];
            let q_t = [q0[0] + acc[6], q0[1] + acc[7], q0[2] + acc[8], q0[3] + acc[9]];
            let cov = assemble_covariance(&q_t, &s_t)?;
            Ok((
                Kernel3 {
                    density: cloud.density(n),
                    mean,
                    cov,
                },
                q_t,
                s_t,
                clamped,
            ))
        })
        .collect::<Result<_>>()?;
    let clamped = per.iter().filter(|p| p.3).count();
    let mut kernels = Vec::with_capacity(per.len());
    let mut q_t = Vec::with_capacity(per.len());
    let mut s_t = Vec::with_capacity(per.len());
    for (k, q, s, _) in per {
        kernels.push(k);
        q_t.push(q);
        s_t.push(s);
    }
    Ok(CloudSnapshot {
        time: t,
        mode: Some(mode),
        kernels,
        fold_incidents: 0,
        clamped,
        cache: WarpCache {
            omega,
            means0: cloud.means.clone(),
            jac: Vec::new(),
            cov0: Vec::new(),
            q_t,
            s_t,
        },
    })
}

/// Ablation 1: per-attribute lattice channels.
pub fn warp_decoupled(cloud: &GaussianCloud, model: &FfdMotionModel, t: f64) -> Result<CloudSnapshot> {
    if model.lattice.channels != DECOUPLED_CHANNELS {
        return Err(Error::Config("decoupled warp needs a 10-channel lattice".into()));
    }
    let omega = model.temporal_weights(t)?;
    let stride = model.rank() * DECOUPLED_CHANNELS;
    channel_warp(cloud, t, MotionMode::DecoupledFfd, omega, |n| {
        let st = model.lattice.stencil(&cloud.mean(n));
        let mut v = vec![0.0; stride];
        model.lattice.interpolate(&st, &mut v);
        (v, st.clamped)
    })
}

/// Ablation 2: per-kernel weights with a shared temporal spline.
pub fn warp_per_gaussian(
    cloud: &GaussianCloud,
    temporal: &TemporalSpline,
    weights: &PerGaussianWeights,
    t: f64,
) -> Result<CloudSnapshot> {
    if weights.n_kernels() != cloud.len() || weights.rank != temporal.rank {
        return Err(Error::Config(format!(
            "per-kernel weights cover {} kernels at rank {}, cloud has {} kernels and temporal rank {}",
            weights.n_kernels(),
            weights.rank,
            cloud.len(),
            temporal.rank
        )));
    }
    let omega = temporal.weights(t)?;
    channel_warp(cloud, t, MotionMode::PerGaussian, omega, |n| (weights.kernel(n).to_vec(), false))
}

/// Warp according to `mode`; `None` bypasses motion entirely.
pub fn warp(
    mode: Option<MotionMode>,
    cloud: &GaussianCloud,
    model: &FfdMotionModel,
    weights: Option<&PerGaussianWeights>,
    t: f64,
) -> Result<CloudSnapshot> {
    match mode {
        None => warp_identity(cloud, t),
        Some(MotionMode::Di) => warp_di(cloud, model, t),
        Some(MotionMode::DecoupledFfd) => warp_decoupled(cloud, model, t),
        Some(MotionMode::PerGaussian) => {
            let w = weights.ok_or_else(|| Error::Config("per-Gaussian mode needs per-kernel weights".into()))?;
            warp_per_gaussian(cloud, &model.temporal, w, t)
        }
    }
}

struct KernelOut {
    density_raw: f64,
    mean: [f64; 3],
    rotation: [f64; 4],
    log_scale: [f64; 3],
}

/// Adjoint of the warp that produced `snapshot`.
pub fn warp_backward(
    snapshot: &CloudSnapshot,
    cloud: &GaussianCloud,
    model: &FfdMotionModel,
    weights: Option<&PerGaussianWeights>,
    upstream: KernelGradRef<'_>,
) -> Result<WarpGrad> {
    let n_k = cloud.len();
    let cache = &snapshot.cache;
    if cache.means0.len() != n_k || cache.means0 != cloud.means {
        return Err(Error::StaleCache("reference cloud changed since the forward warp".into()));
    }
    if snapshot.mode.is_some() && model.temporal_weights(snapshot.time)? != cache.omega {
        return Err(Error::StaleCache("temporal weights changed since the forward warp".into()));
    }
    if upstream.density.len() != n_k || upstream.mean.len() != n_k || upstream.cov.len() != n_k {
        return Err(Error::DimensionMismatch("upstream gradient length".into()));
    }
    let t = snapshot.time;

    let chunks: Vec<(Vec<KernelOut>, Option<MotionGrad>, Option<Vec<f64>>)> = (0..n_k)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|idx| -> Result<_> {
            let mut motion = match snapshot.mode {
                Some(MotionMode::Di) | Some(MotionMode::DecoupledFfd) | Some(MotionMode::PerGaussian) => {
                    Some(MotionGrad::zeros_like(model))
                }
                None => None,
            };
            let mut pg = match snapshot.mode {
                Some(MotionMode::PerGaussian) => Some(vec![0.0; idx.len() * model.rank() * DECOUPLED_CHANNELS]),
                _ => None,
            };
            let mut outs = Vec::with_capacity(idx.len());
            for (local, &n) in idx.iter().enumerate() {
                let g_mu_t = upstream.mean[n];
                let g_cov_t = sym(upstream.cov[n]);
                let density_raw = upstream.density[n] * softplus_grad(cloud.density_raw[n]);
                let mu0 = cloud.mean(n);
                let out = match snapshot.mode {
                    None => {
                        let (gq, gs) =
                            assemble_covariance_backward(&cloud.rotations[n], &cloud.log_scales[n], &g_cov_t)?;
                        KernelOut {
                            density_raw,
                            mean: g_mu_t.into(),
                            rotation: gq,
                            log_scale: gs,
                        }
                    }
                    Some(MotionMode::Di) => {
                        let k = cache.jac[n];
                        let cov0 = cache.cov0[n];
                        let g_k = 2.0 * g_cov_t * k * cov0;
                        let g_cov0 = k.transpose() * g_cov_t * k;
                        let (gq, gs) =
                            assemble_covariance_backward(&cloud.rotations[n], &cloud.log_scales[n], &g_cov0)?;
                        let gv = [g_mu_t.x, g_mu_t.y, g_mu_t.z];
                        let gx = model.backward_channels(&mu0, t, &gv, Some(&g_k), motion.as_mut().unwrap())?;
                        KernelOut {
                            density_raw,
                            mean: (g_mu_t + gx).into(),
                            rotation: gq,
                            log_scale: gs,
                        }
                    }
                    Some(mode) => {
                        let (gq, gs) = assemble_covariance_backward(&cache.q_t[n], &cache.s_t[n], &g_cov_t)?;
                        let gv = [
                            g_mu_t.x, g_mu_t.y, g_mu_t.z, gs[0], gs[1], gs[2], gq[0], gq[1], gq[2], gq[3],
                        ];
                        let gx = if mode == MotionMode::DecoupledFfd {
                            model.backward_channels(&mu0, t, &gv, None, motion.as_mut().unwrap())?
                        } else {
                            let w = weights.ok_or_else(|| Error::Config("missing per-kernel weights".into()))?;
                            let wk = w.kernel(n);
                            let (tbase, tw) = model.temporal.stencil(t)?;
                            let nc = model.temporal.n_control;
                            let buf = pg.as_mut().unwrap();
                            let stride = w.stride();
                            let m = motion.as_mut().unwrap();
                            for r in 0..w.rank {
                                let mut g_omega = 0.0;
                                for c in 0..DECOUPLED_CHANNELS {
                                    buf[local * stride + r * DECOUPLED_CHANNELS + c] = cache.omega[r] * gv[c];
                                    g_omega += wk[r * DECOUPLED_CHANNELS + c] * gv[c];
                                }
                                for l in 0..4 {
                                    m.temporal[r * nc + tbase + l] += g_omega * tw[l];
                                }
                            }
                            Vector3::zeros()
                        };
                        KernelOut {
                            density_raw,
                            mean: (g_mu_t + gx).into(),
                            rotation: gq,
                            log_scale: gs,
                        }
                    }
                };
                outs.push(out);
            }
            Ok((outs, motion, pg))
        })
        .collect::<Result<_>>()?;

    let mut grad = WarpGrad {
        density_raw: Vec::with_capacity(n_k),
        means: Vec::with_capacity(n_k),
        rotations: Vec::with_capacity(n_k),
        log_scales: Vec::with_capacity(n_k),
        motion: snapshot.mode.map(|_| MotionGrad::zeros_like(model)),
        per_gaussian: (snapshot.mode == Some(MotionMode::PerGaussian)).then(Vec::new),
    };
    for (outs, motion, pg) in chunks {
        for o in outs {
            grad.density_raw.push(o.density_raw);
            grad.means.push(o.mean);
            grad.rotations.push(o.rotation);
            grad.log_scales.push(o.log_scale);
        }
        if let (Some(total), Some(m)) = (grad.motion.as_mut(), motion) {
            total.add_assign(&m);
        }
        if let (Some(total), Some(p)) = (grad.per_gaussian.as_mut(), pg) {
            total.extend(p);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ffd::LatticeSpec;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn spec() -> LatticeSpec {
        LatticeSpec {
            dims: [8, 8, 8],
            spacing: [10.0; 3],
            origin: [-35.0; 3],
        }
    }

    fn cloud(seed: u64, n: usize) -> GaussianCloud {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut c = GaussianCloud::new();
        for _ in 0..n {
            c.push(
                rng.random_range(0.01..0.05),
                std::array::from_fn(|_| rng.random_range(-15.0..15.0)),
                std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                std::array::from_fn(|_| rng.random_range(0.0..1.5)),
            );
        }
        c
    }

    #[test]
    fn zero_model_is_identity_and_density_is_preserved() {
        let c = cloud(1, 12);
        let m = FfdMotionModel::zeros(spec(), 2, 3, 10, 4.0).unwrap();
        let s = warp_di(&c, &m, 3.0).unwrap();
        for n in 0..c.len() {
            assert_eq!(s.kernels[n].mean, c.mean(n));
            assert_relative_eq!(s.kernels[n].cov, c.covariance(n).unwrap(), epsilon = 1e-12);
            assert_eq!(s.kernels[n].density.to_bits(), c.density(n).to_bits());
        }
    }

    #[test]
    fn isotropic_scaling_scales_determinant() {
        let c = cloud(2, 6);
        let mut m = FfdMotionModel::zeros(spec(), 1, 3, 10, 4.0).unwrap();
        m.lattice.fill_vector_channels(0, 0, |x| 0.2 * x);
        m.temporal.controls.fill(1.0);
        let s = warp_di(&c, &m, 5.0).unwrap();
        for n in 0..c.len() {
            let r = s.kernels[n].cov.determinant() / c.covariance(n).unwrap().determinant();
            assert_relative_eq!(r, 1.2f64.powi(6), max_relative = 1e-6);
            assert_relative_eq!(s.kernels[n].mean, 1.2 * c.mean(n), epsilon = 1e-10);
        }
    }

    #[test]
    fn folded_jacobian_is_regularized_and_counted() {
        let c = cloud(3, 4);
        let mut m = FfdMotionModel::zeros(spec(), 1, 3, 10, 4.0).unwrap();
        m.lattice.fill_vector_channels(0, 0, |x| Vector3::new(-2.0 * x.x, 0.0, 0.0));
        m.temporal.controls.fill(1.0);
        let s = warp_di(&c, &m, 5.0).unwrap();
        assert_eq!(s.fold_incidents, 4);
        for k in &s.kernels {
            assert!(k.cov.symmetric_eigenvalues().min() > 0.0);
        }
    }

    #[test]
    fn decoupled_channels_act_independently() {
        let c = cloud(4, 5);
        let mut m = FfdMotionModel::zeros(spec(), 1, DECOUPLED_CHANNELS, 10, 4.0).unwrap();
        m.temporal.controls.fill(1.0);
        m.lattice.fill_vector_channels(0, 0, |_| Vector3::new(1.0, 2.0, 3.0));
        let s = warp_decoupled(&c, &m, 2.0).unwrap();
        for n in 0..c.len() {
            assert_relative_eq!(s.kernels[n].cov, c.covariance(n).unwrap(), epsilon = 1e-12);
        }
        let mut m = FfdMotionModel::zeros(spec(), 1, DECOUPLED_CHANNELS, 10, 4.0).unwrap();
        m.temporal.controls.fill(1.0);
        m.lattice.fill_vector_channels(0, 3, |_| Vector3::new(0.1, -0.2, 0.3));
        let s = warp_decoupled(&c, &m, 2.0).unwrap();
        for n in 0..c.len() {
            assert_relative_eq!(s.kernels[n].mean, c.mean(n), epsilon = 1e-12);
            assert!((s.kernels[n].cov - c.covariance(n).unwrap()).norm() > 1e-3);
            let ev_t = s.kernels[n].cov.determinant().ln();
            let ev_0 = c.covariance(n).unwrap().determinant().ln();
            assert_relative_eq!(ev_t - ev_0, 2.0 * (0.1 - 0.2 + 0.3), epsilon = 1e-10);
        }
    }

    #[test]
    fn per_gaussian_shared_weights_move_identically() {
        let mut c = GaussianCloud::new();
        c.push(0.02, [1.0, 2.0, 3.0], [1.0, 0.0, 0.0, 0.0], [0.0; 3]);
        c.push(0.03, [-4.0, 0.0, 5.0], [1.0, 0.0, 0.0, 0.0], [0.5; 3]);
        let mut ts = TemporalSpline::zeros(1, 10, 4.0).unwrap();
        let mut w = PerGaussianWeights::zeros(2, 1);
        let s = warp_per_gaussian(&c, &ts, &w, 4.0).unwrap();
        assert_eq!(s.kernels[0].mean, c.mean(0));
        ts.controls.fill(0.5);
        for n in 0..2 {
            w.values[n * 10..n * 10 + 3].copy_from_slice(&[1.0, -1.0, 2.0]);
        }
        let s = warp_per_gaussian(&c, &ts, &w, 4.0).unwrap();
        let d0 = s.kernels[0].mean - c.mean(0);
        let d1 = s.kernels[1].mean - c.mean(1);
        assert_relative_eq!(d0, d1, epsilon = 1e-14);
        assert!(warp_per_gaussian(&c, &ts, &PerGaussianWeights::zeros(3, 1), 4.0).is_err());
    }

    #[test]
    fn identity_motion_passes_mean_gradient_through() {
        let c = cloud(6, 3);
        let m = FfdMotionModel::zeros(spec(), 2, 3, 10, 4.0).unwrap();
        let s = warp_di(&c, &m, 1.0).unwrap();
        let gm = vec![Vector3::new(1.0, -2.0, 0.5); 3];
        let gc = vec![Matrix3::zeros(); 3];
        let gd = vec![0.0; 3];
        let g = warp_backward(&s, &c, &m, None, KernelGradRef { density: &gd, mean: &gm, cov: &gc }).unwrap();
        for n in 0..3 {
            assert_eq!(g.means[n], [1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut c = cloud(7, 3);
        let m = FfdMotionModel::zeros(spec(), 1, 3, 10, 4.0).unwrap();
        let s = warp_di(&c, &m, 1.0).unwrap();
        c.means[1][0] += 1.0;
        let z = vec![0.0; 3];
        let gm = vec![Vector3::zeros(); 3];
        let gc = vec![Matrix3::zeros(); 3];
        assert!(matches!(
            warp_backward(&s, &c, &m, None, KernelGradRef { density: &z, mean: &gm, cov: &gc }),
            Err(Error::StaleCache(_))
        ));
    }
}
