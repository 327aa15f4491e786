//! Low-rank spatio-temporal free-form deformation.
//!
//! `D(x, t) = x + Σ_r ω_r(t) u_r(x)`, where each spatial basis `u_r` is a
//! uniform cubic B-spline over a control lattice and each temporal weight
//! `ω_r` is a uniform cubic B-spline over time indices. The lattice may carry
//! extra per-rank channels (log-scale and quaternion offsets) that are
//! interpolated with the same stencils.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::GridSpec;
use crate::error::{Error, Result};

/// Position channels only.
pub const POSITION_CHANNELS: usize = 3;
/// Position (3) + log-scale offset (3) + quaternion offset (4).
pub const DECOUPLED_CHANNELS: usize = 10;

/// Uniform cubic B-spline basis values at `u ∈ [0, 1)`.
pub fn bspline_weights(u: f64) -> Result<[f64; 4]> {
    check_unit(u)?;
    Ok(weights(u))
}

/// First derivatives of the basis at `u ∈ [0, 1)`.
pub fn bspline_dweights(u: f64) -> Result<[f64; 4]> {
    check_unit(u)?;
    Ok(dweights(u))
}

fn check_unit(u: f64) -> Result<()> {
    if (0.0..1.0).contains(&u) {
        Ok(())
    } else {
        Err(Error::OutOfDomain { value: u, lo: 0.0, hi: 1.0 })
    }
}

#[inline]
pub(crate) fn weights(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    let v = 1.0 - u;
    [
        v * v * v / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

#[inline]
pub(crate) fn dweights(u: f64) -> [f64; 4] {
    let v = 1.0 - u;
    [
        -0.5 * v * v,
        (3.0 * u * u - 4.0 * u) / 2.0,
        (-3.0 * u * u + 2.0 * u + 1.0) / 2.0,
        0.5 * u * u,
    ]
}

#[inline]
pub(crate) fn d2weights(u: f64) -> [f64; 4] {
    [1.0 - u, 3.0 * u - 2.0, 1.0 - 3.0 * u, u]
}

/// Splits a lattice coordinate into `(cell, fraction)` with the cell clamped
/// to `[1, n - 3]`; the flag reports whether clamping moved the point.
#[inline]
fn locate(p: f64, n: usize) -> (usize, f64, bool) {
    let lo = 1.0;
    let hi = (n - 2) as f64;
    let pc = p.clamp(lo, hi);
    let cell = (pc.floor() as usize).min(n - 3);
    (cell, pc - cell as f64, pc != p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// World position of control point `(0, 0, 0)`.
    pub origin: [f64; 3],
}

impl LatticeSpec {
    /// Lattice with `spacing_voxels` voxels between control points whose
    /// valid interior covers the grid plus one spacing on every side.
    pub fn covering(grid: &GridSpec, spacing_voxels: f64) -> Self {
        let (lo, hi) = grid.bounds();
        let spacing: [f64; 3] = std::array::from_fn(|a| spacing_voxels * grid.spacing[a]);
        let dims = std::array::from_fn(|a| ((hi[a] - lo[a]) / spacing[a] - 1e-9).ceil() as usize + 5);
        let origin = std::array::from_fn(|a| lo[a] - 2.0 * spacing[a]);
        Self { dims, spacing, origin }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 4) {
            return Err(Error::Config("lattice needs at least 4 control points per axis".into()));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("lattice spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn n_control(&self) -> usize {
        self.dims.iter().product()
    }

    /// Lattice index-space coordinates of a world point.
    pub fn to_index(&self, x: &Vector3<f64>) -> [f64; 3] {
        std::array::from_fn(|a| (x[a] - self.origin[a]) / self.spacing[a])
    }

    pub fn control_position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        )
    }

    /// Whether `x` lies in the region where no clamping is needed.
    pub fn is_interior(&self, x: &Vector3<f64>) -> bool {
        let p = self.to_index(x);
        (0..3).all(|a| p[a] >= 1.0 && p[a] <= (self.dims[a] - 2) as f64)
    }
}

/// The 4×4×4 interpolation stencil of one query point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil {
    /// Control index of the first stencil point along each axis (`⌊p⌋ - 1`).
    pub base: [usize; 3],
    pub w: [[f64; 4]; 3],
    /// Derivatives with respect to world coordinates (divided by spacing).
    pub dw: [[f64; 4]; 3],
    pub d2w: [[f64; 4]; 3],
    pub clamped: bool,
}

/// Spatial control lattice with `rank × channels` coefficients per control point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialLattice {
    pub spec: LatticeSpec,
    pub rank: usize,
    pub channels: usize,
    /// Layout `[rank][k][j][i][channel]`.
    pub coeffs: Vec<f64>,
}

impl SpatialLattice {
    pub fn zeros(spec: LatticeSpec, rank: usize, channels: usize) -> Result<Self> {
        spec.validate()?;
        if rank == 0 || !(channels == POSITION_CHANNELS || channels == DECOUPLED_CHANNELS) {
            return Err(Error::Config(format!("unsupported lattice rank {rank} / channels {channels}")));
        }
        Ok(Self {
            coeffs: vec![0.0; rank * spec.n_control() * channels],
            spec,
            rank,
            channels,
        })
    }

    #[inline]
    pub fn coeff_index(&self, r: usize, i: usize, j: usize, k: usize, c: usize) -> usize {
        let d = &self.spec.dims;
        ((r * d[2] + k) * d[1] * d[0] + j * d[0] + i) * self.channels + c
    }

    /// Sets channel values `f(control position)` for rank `r` over channels `c0..c0+3`.
    pub fn fill_vector_channels(&mut self, r: usize, c0: usize, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) {
        let [nx, ny, nz] = self.spec.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let v = f(&self.spec.control_position(i, j, k));
                    for a in 0..3 {
                        let idx = self.coeff_index(r, i, j, k, c0 + a);
                        self.coeffs[idx] = v[a];
                    }
                }
            }
        }
    }

    pub fn stencil(&self, x: &Vector3<f64>) -> Stencil {
        let p = self.spec.to_index(x);
        let mut st = Stencil {
            base: [0; 3],
            w: [[0.0; 4]; 3],
            dw: [[0.0; 4]; 3],
            d2w: [[0.0; 4]; 3],
            clamped: false,
        };
        for a in 0..3 {
            let (cell, u, clamped) = locate(p[a], self.spec.dims[a]);
            st.base[a] = cell - 1;
            st.w[a] = weights(u);
            let h = self.spec.spacing[a];
            st.dw[a] = dweights(u).map(|v| if clamped { 0.0 } else { v / h });
            st.d2w[a] = d2weights(u).map(|v| if clamped { 0.0 } else { v / (h * h) });
            st.clamped |= clamped;
        }
        st
    }

    /// Interpolated values `v_r(x)`, laid out `[rank][channel]`.
    pub fn interpolate(&self, st: &Stencil, out: &mut [f64]) {
        let ch = self.channels;
        out[..self.rank * ch].fill(0.0);
        for r in 0..self.rank {
            for n in 0..4 {
                for m in 0..4 {
                    let wmn = st.w[1][m] * st.w[2][n];
                    for l in 0..4 {
                        let w = st.w[0][l] * wmn;
                        let idx = self.coeff_index(r, st.base[0] + l, st.base[1] + m, st.base[2] + n, 0);
                        for c in 0..ch {
                            out[r * ch + c] += w * self.coeffs[idx + c];
                        }
                    }
                }
            }
        }
    }

    /// Spatial gradients `∂v_{r,c}/∂x_b`, laid out `[rank][channel] -> [b]`.
    pub fn interpolate_gradient(&self, st: &Stencil, out: &mut [[f64; 3]]) {
        let ch = self.channels;
        out[..self.rank * ch].fill([0.0; 3]);
        for r in 0..self.rank {
            for n in 0..4 {
                for m in 0..4 {
                    for l in 0..4 {
                        let g = [
                            st.dw[0][l] * st.w[1][m] * st.w[2][n],
                            st.w[0][l] * st.dw[1][m] * st.w[2][n],
                            st.w[0][l] * st.w[1][m] * st.dw[2][n],
                        ];
                        let idx = self.coeff_index(r, st.base[0] + l, st.base[1] + m, st.base[2] + n, 0);
                        for c in 0..ch {
                            let d = self.coeffs[idx + c];
                            for b in 0..3 {
                                out[r * ch + c][b] += g[b] * d;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-rank cubic B-spline over time indices.
///
/// Control `j` sits at time `(j - 1)·spacing`, so one control of padding
/// precedes `t = 0` and the last cell covers `t = n_times - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalSpline {
    pub rank: usize,
    pub n_times: usize,
    pub spacing: f64,
    pub n_control: usize,
    /// Layout `[rank][control]`.
    pub controls: Vec<f64>,
}

impl TemporalSpline {
    pub fn zeros(rank: usize, n_times: usize, spacing: f64) -> Result<Self> {
        if rank == 0 || n_times == 0 || !(spacing > 0.0) {
            return Err(Error::Config("temporal spline needs rank, n_times >= 1 and spacing > 0".into()));
        }
        let n_control = (((n_times - 1) as f64 / spacing - 1e-9).ceil().max(0.0) as usize + 3).max(4);
        Ok(Self {
            rank,
            n_times,
            spacing,
            n_control,
            controls: vec![0.0; rank * n_control],
        })
    }

    /// Stencil `(first control index, weights)` at time `t`.
    pub fn stencil(&self, t: f64) -> Result<(usize, [f64; 4])> {
        let t_max = (self.n_times - 1) as f64;
        if !(t >= 0.0 && t <= t_max) {
            return Err(Error::OutOfDomain { value: t, lo: 0.0, hi: t_max });
        }
        let (cell, u, _) = locate(t / self.spacing + 1.0, self.n_control);
        Ok((cell - 1, weights(u)))
    }

    pub fn weights(&self, t: f64) -> Result<Vec<f64>> {
        let (base, w) = self.stencil(t)?;
        Ok((0..self.rank)
            .map(|r| (0..4).map(|l| w[l] * self.controls[r * self.n_control + base + l]).sum())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfdMotionModel {
    pub lattice: SpatialLattice,
    pub temporal: TemporalSpline,
}

/// Gradients with respect to all motion coefficients (same layouts as the model).
#[derive(Clone, Debug, PartialEq)]
pub struct MotionGrad {
    pub lattice: Vec<f64>,
    pub temporal: Vec<f64>,
}

impl MotionGrad {
    pub fn zeros_like(model: &FfdMotionModel) -> Self {
        Self {
            lattice: vec![0.0; model.lattice.coeffs.len()],
            temporal: vec![0.0; model.temporal.controls.len()],
        }
    }

    pub fn add_assign(&mut self, other: &MotionGrad) {
        for (a, b) in self.lattice.iter_mut().zip(&other.lattice) {
            *a += b;
        }
        for (a, b) in self.temporal.iter_mut().zip(&other.temporal) {
            *a += b;
        }
    }
}

impl FfdMotionModel {
    pub fn zeros(spec: LatticeSpec, rank: usize, channels: usize, n_times: usize, time_spacing: f64) -> Result<Self> {
        Ok(Self {
            lattice: SpatialLattice::zeros(spec, rank, channels)?,
            temporal: TemporalSpline::zeros(rank, n_times, time_spacing)?,
        })
    }

    pub fn rank(&self) -> usize {
        self.lattice.rank
    }

    pub fn validate(&self) -> Result<()> {
        if self.lattice.rank != self.temporal.rank {
            return Err(Error::Config("lattice and temporal ranks differ".into()));
        }
        Ok(())
    }

    pub fn temporal_weights(&self, t: f64) -> Result<Vec<f64>> {
        self.temporal.weights(t)
    }

    /// `D(x, t)`.
    pub fn displacement(&self, x: &Vector3<f64>, t: f64) -> Result<Vector3<f64>> {
        let omega = self.temporal.weights(t)?;
        Ok(x + self.displacement_with(&self.lattice.stencil(x), &omega))
    }

    /// `Σ_r ω_r u_r(x)` for a precomputed stencil.
    pub fn displacement_with(&self, st: &Stencil, omega: &[f64]) -> Vector3<f64> {
        let ch = self.lattice.channels;
        let mut v = vec![0.0; self.rank() * ch];
        self.lattice.interpolate(st, &mut v);
        let mut d = Vector3::zeros();
        for (r, w) in omega.iter().enumerate() {
            for a in 0..3 {
                d[a] += w * v[r * ch + a];
            }
        }
        d
    }

    /// `K(x, t) = I + Σ_r ω_r ∇u_r(x)`.
    pub fn jacobian(&self, x: &Vector3<f64>, t: f64) -> Result<Matrix3<f64>> {
        let omega = self.temporal.weights(t)?;
        Ok(self.jacobian_with(&self.lattice.stencil(x), &omega))
    }

    pub fn jacobian_with(&self, st: &Stencil, omega: &[f64]) -> Matrix3<f64> {
        let ch = self.lattice.channels;
        let mut g = vec![[0.0; 3]; self.rank() * ch];
        self.lattice.interpolate_gradient(st, &mut g);
        let mut k = Matrix3::identity();
        for (r, w) in omega.iter().enumerate() {
            for a in 0..3 {
                for b in 0..3 {
                    k[(a, b)] += w * g[r * ch + a][b];
                }
            }
        }
        k
    }

    /// Adjoint of `x ↦ (V(x, t), K(x, t))`, where `V = Σ_r ω_r v_r(x)` over all
    /// lattice channels (no identity term) and `K` is built from the position
    /// channels. Accumulates coefficient gradients into `out` and returns
    /// `dL/dx` through `V` and `K` only.
    pub fn backward_channels(
        &self,
        x: &Vector3<f64>,
        t: f64,
        grad_value: &[f64],
        grad_k: Option<&Matrix3<f64>>,
        out: &mut MotionGrad,
    ) -> Result<Vector3<f64>> {
        let ch = self.lattice.channels;
        let rank = self.rank();
        let (tbase, tw) = self.temporal.stencil(t)?;
        let omega = self.temporal.weights(t)?;
        let st = self.lattice.stencil(x);
        let mut grad_omega = vec![0.0; rank];
        let mut grad_x = Vector3::zeros();
        let gk = grad_k.copied().unwrap_or_else(Matrix3::zeros);

        for r in 0..rank {
            let w_r = omega[r];
            for n in 0..4 {
                for m in 0..4 {
                    for l in 0..4 {
                        let (wl, wm, wn) = (st.w[0][l], st.w[1][m], st.w[2][n]);
                        let (dl, dm, dn) = (st.dw[0][l], st.dw[1][m], st.dw[2][n]);
                        let weight = wl * wm * wn;
                        let grad_w = [dl * wm * wn, wl * dm * wn, wl * wm * dn];
                        let idx = self.lattice.coeff_index(r, st.base[0] + l, st.base[1] + m, st.base[2] + n, 0);
                        let coeffs = &self.lattice.coeffs[idx..idx + ch];

                        // value path
                        for c in 0..ch {
                            let g = grad_value[c];
                            out.lattice[idx + c] += w_r * weight * g;
                            grad_omega[r] += weight * coeffs[c] * g;
                            for b in 0..3 {
                                grad_x[b] += w_r * grad_w[b] * coeffs[c] * g;
                            }
                        }

                        // Jacobian path (position channels)
                        if grad_k.is_some() {
                            let hess = [
                                [st.d2w[0][l] * wm * wn, dl * dm * wn, dl * wm * dn],
                                [dl * dm * wn, wl * st.d2w[1][m] * wn, wl * dm * dn],
                                [dl * wm * dn, wl * dm * dn, wl * wm * st.d2w[2][n]],
                            ];
                            for a in 0..3 {
                                let mut s = 0.0;
                                for b in 0..3 {
                                    s += gk[(a, b)] * grad_w[b];
                                }
                                out.lattice[idx + a] += w_r * s;
                                grad_omega[r] += coeffs[a] * s;
                                for c in 0..3 {
                                    let mut h = 0.0;
                                    for b in 0..3 {
                                        h += gk[(a, b)] * hess[b][c];
                                    }
                                    grad_x[c] += w_r * coeffs[a] * h;
                                }
                            }
                        }
                    }
                }
            }
        }

        let nc = self.temporal.n_control;
        for r in 0..rank {
            for l in 0..4 {
                out.temporal[r * nc + tbase + l] += grad_omega[r] * tw[l];
            }
        }
        Ok(grad_x)
    }
}

/// Adjoint of `displacement` and `jacobian` at `(x, t)`; returns the full
/// `dL/dx` including the identity term of `D`.
pub fn motion_backward(
    model: &FfdMotionModel,
    x: &Vector3<f64>,
    t: f64,
    grad_d: &Vector3<f64>,
    grad_k: &Matrix3<f64>,
    out: &mut MotionGrad,
) -> Result<Vector3<f64>> {
    let mut gv = vec![0.0; model.lattice.channels];
    gv[..3].copy_from_slice(grad_d.as_slice());
    let gx = model.backward_channels(x, t, &gv, Some(grad_k), out)?;
    Ok(gx + grad_d)
}

/// Interpolated spatial bases `u_r(x)` (position channels).
pub fn spatial_basis(lattice: &SpatialLattice, x: &Vector3<f64>) -> (Vec<Vector3<f64>>, bool) {
    let st = lattice.stencil(x);
    let mut v = vec![0.0; lattice.rank * lattice.channels];
    lattice.interpolate(&st, &mut v);
    let ch = lattice.channels;
    ((0..lattice.rank).map(|r| Vector3::new(v[r * ch], v[r * ch + 1], v[r * ch + 2])).collect(), st.clamped)
}

/// Spatial gradients `∇u_r(x)`, with `[a][b] = ∂u_a/∂x_b`.
pub fn spatial_basis_gradient(lattice: &SpatialLattice, x: &Vector3<f64>) -> (Vec<Matrix3<f64>>, bool) {
    let st = lattice.stencil(x);
    let mut g = vec![[0.0; 3]; lattice.rank * lattice.channels];
    lattice.interpolate_gradient(&st, &mut g);
    let ch = lattice.channels;
    (
        (0..lattice.rank)
            .map(|r| Matrix3::from_fn(|a, b| g[r * ch + a][b]))
            .collect(),
        st.clamped,
    )
}

/// Samples `D(x, t) - x` at every voxel center, x-fastest, 3 components per voxel.
pub fn sample_dvf(model: &FfdMotionModel, grid: &GridSpec, t: f64) -> Result<Vec<[f64; 3]>> {
    let omega = model.temporal.weights(t)?;
    Ok((0..grid.n_voxels())
        .into_par_iter()
        .map(|v| {
            let x = grid.center_of(v);
            let d = model.displacement_with(&model.lattice.stencil(&x), &omega);
            [d.x, d.y, d.z]
        })
        .collect())
}
