//! Local normalized cross-correlation.
//!
//! `n_i = A_i^2 / (B_i C_i + eps)` with windowed covariance `A` and variances
//! `B`, `C` computed from box-filtered moments; the loss is `1 - mean(n_i)`.
//! Window sums use plain zero padding at the lattice edges.

mod fused;
mod naive;

pub use fused::{
    lncc_backward_fused, lncc_backward_fused_with, lncc_forward_fused, lncc_forward_fused_with,
    LnccState,
};
pub use naive::{lncc_backward_naive, lncc_forward_naive, NaiveLncc};

use serde::{Deserialize, Serialize};

use crate::conv::{convolve_separable, EdgeMode, Kernel1d};
use crate::error::{ensure, Result};
use crate::volume::{Dims, Volume3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LnccParams {
    /// Odd window width in voxels. Width 1 turns the window into a delta.
    pub window: usize,
    pub eps: f64,
}

impl Default for LnccParams {
    fn default() -> Self {
        Self {
            window: 7,
            eps: 1e-5,
        }
    }
}

impl LnccParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.window % 2 == 1,
            "LNCC window must be odd, got {}",
            self.window
        );
        ensure!(
            self.eps.is_finite() && self.eps >= 0.0,
            "LNCC eps must be finite and non-negative, got {}",
            self.eps
        );
        Ok(())
    }

    pub fn kernel(&self) -> Result<Kernel1d> {
        self.validate()?;
        Kernel1d::boxcar(self.window)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LnccResult {
    pub loss: f64,
    pub ncc: Option<Volume3>,
}

/// Box filter over a whole single-channel lattice, zero padded.
pub fn window_filter(kernel: &Kernel1d, dims: Dims) -> impl FnMut(&mut [f64]) -> Result<()> + '_ {
    move |buf: &mut [f64]| {
        convolve_separable(buf, dims, 1, kernel, EdgeMode::Zero);
        Ok(())
    }
}

/// `A^2 / (B C + eps)`, defined as 0 when the denominator vanishes.
#[inline(always)]
pub(crate) fn ncc_value(mu_f: f64, mu_m: f64, mu_ff: f64, mu_mm: f64, mu_fm: f64, eps: f64) -> f64 {
    let a = mu_fm - mu_f * mu_m;
    let b = mu_ff - mu_f * mu_f;
    let c = mu_mm - mu_m * mu_m;
    let d = b * c + eps;
    if d == 0.0 {
        0.0
    } else {
        a * a / d
    }
}

fn check_pair(f: &Volume3, m: &Volume3) -> Result<()> {
    ensure!(
        f.dims() == m.dims(),
        "LNCC inputs must share a lattice, got {:?} and {:?}",
        f.dims().0,
        m.dims().0
    );
    Ok(())
}

#[cfg(test)]
mod tests;
