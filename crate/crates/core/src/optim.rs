//! Loss and first-order optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splat::DetectorImage;

/// Mean squared error over pixels and its gradient with respect to `rendered`.
pub fn l2_loss(rendered: &DetectorImage, measured: &DetectorImage) -> Result<(f64, DetectorImage)> {
    if rendered.rows != measured.rows || rendered.cols != measured.cols {
        return Err(Error::DimensionMismatch(format!(
            "rendered {}x{} vs measured {}x{}",
            rendered.rows, rendered.cols, measured.rows, measured.cols
        )));
    }
    let n = rendered.data.len() as f64;
    let mut grad = DetectorImage::zeros(rendered.rows, rendered.cols);
    let mut sum = 0.0;
    for ((g, r), m) in grad.data.iter_mut().zip(&rendered.data).zip(&measured.data) {
        let d = r - m;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    Ok((sum / n, grad))
}

/// Learning rate decaying linearly from `initial` to `final` over a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_: f64,
}

impl Schedule {
    pub const fn new(initial: f64, final_: f64) -> Self {
        Self { initial, final_ }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.initial > 0.0 && self.final_ > 0.0 && self.final_ <= self.initial) {
            return Err(Error::Config(format!(
                "learning rate '{name}' needs 0 < final <= initial (got {} -> {})",
                self.initial, self.final_
            )));
        }
        Ok(())
    }

    /// Rate at 0-based `iter` of `total`; the last iteration gets `final` exactly.
    pub fn at(&self, iter: usize, total: usize) -> f64 {
        if iter + 1 >= total {
            return self.final_;
        }
        let f = iter as f64 / (total - 1) as f64;
        self.initial + (self.final_ - self.initial) * f
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.initial * s, self.final_ * s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// Adam moments for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub params: AdamParams,
}

/// What happened to one group in one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradient contained NaN/inf; nothing changed.
    SkippedNonFinite,
}

impl AdamState {
    pub fn new(len: usize, params: AdamParams) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            params,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected update. `lr_scale`, if given, multiplies the rate per element.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, lr_scale: Option<&[f64]>) -> Result<StepOutcome> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch(format!(
                "adam group of {} got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let rate = lr * lr_scale.map_or(1.0, |s| s[i]);
            params[i] -= rate * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(StepOutcome::Applied)
    }

    /// Rebuilds rows after the parameter set changed. `source[i]` is the old
    /// row (of `width` elements) that new row `i` inherits, or `None` for zeros.
    pub fn reindex(&mut self, source: &[Option<usize>], width: usize) {
        let remap = |old: &Vec<f64>| {
            let mut out = vec![0.0; source.len() * width];
            for (i, s) in source.iter().enumerate() {
                if let Some(j) = s {
                    out[i * width..(i + 1) * width].copy_from_slice(&old[j * width..(j + 1) * width]);
                }
            }
            out
        };
        self.m = remap(&self.m);
        self.v = remap(&self.v);
    }
}
