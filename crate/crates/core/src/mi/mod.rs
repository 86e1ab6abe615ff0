//! Parzen-window mutual information.
//!
//! Intensities are expected in `[0, 1]` and are spread over `B` bins with
//! centres `(j + 0.5) / B`. The exact path accumulates the kernel-weighted
//! joint histogram voxel by voxel without ever forming the `B x N` Parzen
//! block. The approximate path bins each voxel once and smooths the binned
//! histograms with the discretized kernel afterwards.

mod kernel;

pub use kernel::{ParzenKernel, SampleWeights, MAX_SUPPORT};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::volume::Volume3;

/// Marginal and joint probability tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointHistogram {
    pub bins: usize,
    pub p_i: Vec<f64>,
    pub p_j: Vec<f64>,
    /// Row-major `p_ij[m * bins + n]`, `m` indexing the first image.
    pub p_ij: Vec<f64>,
    pub samples: usize,
    /// Histogram cell updates performed while accumulating.
    pub writes: u64,
}

impl JointHistogram {
    pub fn zeros(bins: usize, samples: usize) -> Self {
        Self {
            bins,
            p_i: vec![0.0; bins],
            p_j: vec![0.0; bins],
            p_ij: vec![0.0; bins * bins],
            samples,
            writes: 0,
        }
    }

    /// Numbers exchanged when histograms are reduced across workers.
    pub fn payload_len(bins: usize) -> usize {
        bins * bins + 2 * bins
    }

    /// `[p_ij, p_i, p_j]` flattened.
    pub fn to_payload(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::payload_len(self.bins));
        v.extend_from_slice(&self.p_ij);
        v.extend_from_slice(&self.p_i);
        v.extend_from_slice(&self.p_j);
        v
    }

    pub fn from_payload(bins: usize, samples: usize, payload: &[f64]) -> Result<Self> {
        ensure!(
            payload.len() == Self::payload_len(bins),
            "histogram payload has {} numbers, expected {}",
            payload.len(),
            Self::payload_len(bins)
        );
        let bb = bins * bins;
        Ok(Self {
            bins,
            p_ij: payload[..bb].to_vec(),
            p_i: payload[bb..bb + bins].to_vec(),
            p_j: payload[bb + bins..].to_vec(),
            samples,
            writes: 0,
        })
    }

    /// `sum p_ij log(p_ij / (p_i p_j))`, with `0 log 0 = 0`.
    pub fn mutual_information(&self) -> f64 {
        let b = self.bins;
        let mut mi = 0.0;
        for m in 0..b {
            for n in 0..b {
                let p = self.p_ij[m * b + n];
                if p > 0.0 {
                    mi += p * (p / (self.p_i[m] * self.p_j[n])).ln();
                }
            }
        }
        mi
    }

    /// Largest deviation of any table from the probability-table invariants.
    pub fn invariant_error(&self) -> f64 {
        let b = self.bins;
        let sum = |v: &[f64]| v.iter().sum::<f64>();
        let mut err = (sum(&self.p_i) - 1.0)
            .abs()
            .max((sum(&self.p_j) - 1.0).abs())
            .max((sum(&self.p_ij) - 1.0).abs());
        for m in 0..b {
            let row: f64 = self.p_ij[m * b..(m + 1) * b].iter().sum();
            let col: f64 = (0..b).map(|r| self.p_ij[r * b + m]).sum();
            err = err.max((row - self.p_i[m]).abs()).max((col - self.p_j[m]).abs());
        }
        let negative = self
            .p_i
            .iter()
            .chain(&self.p_j)
            .chain(&self.p_ij)
            .fold(0.0f64, |a, &x| a.max(-x));
        err.max(negative)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiParams {
    pub bins: usize,
    pub kernel: ParzenKernel,
}

impl Default for MiParams {
    fn default() -> Self {
        Self {
            bins: 32,
            kernel: ParzenKernel::default_gaussian(),
        }
    }
}

/// Fixed affine map of raw intensities onto `[0, 1]`, clamping outside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityScale {
    pub lo: f64,
    pub hi: f64,
}

impl IntensityScale {
    /// Range of the volume widened to include zero, which is what zero
    /// padding introduces once the volume is resampled.
    pub fn of_volume(v: &Volume3) -> Self {
        let (lo, hi) = v.min_max();
        let (lo, hi) = (lo.min(0.0), hi.max(0.0));
        Self {
            lo,
            hi: if hi > lo { hi } else { lo + 1.0 },
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        ((x - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    /// `d apply / d x` where the map is not clamped.
    #[inline]
    pub fn slope(&self, x: f64) -> f64 {
        let t = (x - self.lo) / (self.hi - self.lo);
        if (0.0..=1.0).contains(&t) {
            1.0 / (self.hi - self.lo)
        } else {
            0.0
        }
    }

    pub fn normalize(&self, data: &[f64]) -> Vec<f64> {
        data.iter().map(|&x| self.apply(x)).collect()
    }
}

fn check_inputs(i: &[f64], j: &[f64], bins: usize) -> Result<()> {
    ensure!(bins >= 2, "MI needs at least 2 bins, got {bins}");
    ensure!(
        i.len() == j.len(),
        "MI inputs differ in length: {} vs {}",
        i.len(),
        j.len()
    );
    ensure!(!i.is_empty(), "MI needs at least one sample");
    check_unit(i)?;
    check_unit(j)
}

fn check_unit(x: &[f64]) -> Result<()> {
    ensure!(
        x.iter().all(|v| (0.0..=1.0).contains(v)),
        "intensities must lie in [0, 1]"
    );
    Ok(())
}

/// Raw Parzen block `psi[j * N + k] = kappa(b_j - I_k)` in bin units.
/// Only meant as a reference; it holds `B * N` numbers.
pub fn parzen_block_naive(x: &[f64], bins: usize, kernel: &ParzenKernel) -> Result<Vec<f64>> {
    ensure!(bins >= 1, "need at least one bin");
    check_unit(x)?;
    let n = x.len();
    let b = bins as f64;
    let mut psi = vec![0.0; bins * n];
    for j in 0..bins {
        let centre = (j as f64 + 0.5) / b;
        for (k, &v) in x.iter().enumerate() {
            psi[j * n + k] = match kernel {
                ParzenKernel::Nearest => {
                    let bin = ((v * b).floor() as usize).min(bins - 1);
                    if bin == j { 1.0 } else { 0.0 }
                }
                _ => kernel.eval((centre - v) * b),
            };
        }
    }
    Ok(psi)
}

/// Histograms from two materialized Parzen blocks, each column normalized to
/// unit mass first.
pub fn histogram_from_blocks(psi_i: &[f64], psi_j: &[f64], bins: usize) -> Result<JointHistogram> {
    ensure!(
        psi_i.len() == psi_j.len() && psi_i.len().is_multiple_of(bins),
        "Parzen blocks do not match"
    );
    let n = psi_i.len() / bins;
    let normalize = |psi: &[f64]| {
        let mut out = psi.to_vec();
        for k in 0..n {
            let s: f64 = (0..bins).map(|j| psi[j * n + k]).sum();
            for j in 0..bins {
                out[j * n + k] = if s > 0.0 { psi[j * n + k] / s } else { 0.0 };
            }
        }
        out
    };
    let (a, c) = (normalize(psi_i), normalize(psi_j));
    let mut h = JointHistogram::zeros(bins, n);
    let inv = 1.0 / n as f64;
    for m in 0..bins {
        h.p_i[m] = a[m * n..(m + 1) * n].iter().sum::<f64>() * inv;
        h.p_j[m] = c[m * n..(m + 1) * n].iter().sum::<f64>() * inv;
        for q in 0..bins {
            let mut s = 0.0;
            for k in 0..n {
                s += a[m * n + k] * c[q * n + k];
            }
            h.p_ij[m * bins + q] = s * inv;
        }
    }
    Ok(h)
}

/// Unnormalized (count-weighted) exact histograms, suitable for summing
/// across shards before dividing by the total sample count.
pub fn accumulate_exact(i: &[f64], j: &[f64], params: &MiParams) -> Result<JointHistogram> {
    check_inputs(i, j, params.bins)?;
    let b = params.bins;
    let mut h = JointHistogram::zeros(b, i.len());
    let mut writes = 0u64;
    for (&x, &y) in i.iter().zip(j) {
        let wi = params.kernel.sample_weights(x, b);
        let wj = params.kernel.sample_weights(y, b);
        for a in 0..wi.len {
            h.p_i[wi.first + a] += wi.w[a];
            let row = (wi.first + a) * b + wj.first;
            for c in 0..wj.len {
                h.p_ij[row + c] += wi.w[a] * wj.w[c];
            }
        }
        for c in 0..wj.len {
            h.p_j[wj.first + c] += wj.w[c];
        }
        writes += (wi.len + wj.len + wi.len * wj.len) as u64;
    }
    h.writes = writes;
    Ok(h)
}

fn scale_tables(h: &mut JointHistogram, s: f64) {
    h.p_i.iter_mut().chain(h.p_j.iter_mut()).chain(h.p_ij.iter_mut()).for_each(|v| *v *= s);
}

/// Exact kernel density estimate of the joint and marginal distributions.
pub fn mi_forward_exact(i: &[f64], j: &[f64], params: &MiParams) -> Result<(f64, JointHistogram)> {
    let mut h = accumulate_exact(i, j, params)?;
    scale_tables(&mut h, 1.0 / i.len() as f64);
    Ok((h.mutual_information(), h))
}

/// Discretized kernel between bin centres, each source column normalized:
/// `k[j * B + m] = kappa(c_j - c_m) / sum_j kappa(c_j - c_m)`.
pub fn bin_kernel_matrix(bins: usize, kernel: &ParzenKernel) -> Vec<f64> {
    let mut k = vec![0.0; bins * bins];
    for m in 0..bins {
        let w = kernel.sample_weights((m as f64 + 0.5) / bins as f64, bins);
        for a in 0..w.len {
            k[(w.first + a) * bins + m] = w.w[a];
        }
    }
    k
}

/// Hard-binned counts: one write per marginal and one joint write per voxel.
pub fn accumulate_binned(i: &[f64], j: &[f64], bins: usize) -> Result<JointHistogram> {
    check_inputs(i, j, bins)?;
    let b = bins as f64;
    let mut h = JointHistogram::zeros(bins, i.len());
    for (&x, &y) in i.iter().zip(j) {
        let m = ((x * b).floor() as usize).min(bins - 1);
        let n = ((y * b).floor() as usize).min(bins - 1);
        h.p_i[m] += 1.0;
        h.p_j[n] += 1.0;
        h.p_ij[m * bins + n] += 1.0;
        h.writes += 3;
    }
    Ok(h)
}

/// Smooths hard-binned counts with the discretized kernel and normalizes.
pub fn smooth_binned(counts: &JointHistogram, kernel: &ParzenKernel) -> JointHistogram {
    let b = counts.bins;
    let k = bin_kernel_matrix(b, kernel);
    let mut out = JointHistogram::zeros(b, counts.samples);
    out.writes = counts.writes;
    for j in 0..b {
        for m in 0..b {
            out.p_i[j] += k[j * b + m] * counts.p_i[m];
            out.p_j[j] += k[j * b + m] * counts.p_j[m];
        }
    }
    // tmp = K H, then P = tmp K^T
    let mut tmp = vec![0.0; b * b];
    for j in 0..b {
        for m in 0..b {
            let kjm = k[j * b + m];
            if kjm == 0.0 {
                continue;
            }
            for n in 0..b {
                tmp[j * b + n] += kjm * counts.p_ij[m * b + n];
            }
        }
    }
    for j in 0..b {
        for q in 0..b {
            let mut s = 0.0;
            for n in 0..b {
                s += tmp[j * b + n] * k[q * b + n];
            }
            out.p_ij[j * b + q] = s;
        }
    }
    for t in [&mut out.p_i, &mut out.p_j, &mut out.p_ij] {
        let s: f64 = t.iter().sum();
        if s > 0.0 {
            t.iter_mut().for_each(|v| *v /= s);
        }
    }
    out
}

/// Binned estimate: `3N` histogram writes, then a kernel smoothing pass.
pub fn mi_forward_approx(i: &[f64], j: &[f64], params: &MiParams) -> Result<(f64, JointHistogram)> {
    let counts = accumulate_binned(i, j, params.bins)?;
    let h = smooth_binned(&counts, &params.kernel);
    Ok((h.mutual_information(), h))
}

/// Gradients of `g * MI` with respect to every sample of both images.
///
/// `hist` must be the exact estimate the loss was evaluated on; its
/// `samples` field is the total sample count, which may exceed `i.len()`
/// when `i, j` are one shard of a larger volume.
pub fn mi_backward(
    g: f64,
    i: &[f64],
    j: &[f64],
    hist: &JointHistogram,
    kernel: &ParzenKernel,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let b = hist.bins;
    check_inputs(i, j, b)?;
    ensure!(
        hist.p_ij.len() == b * b && hist.p_i.len() == b && hist.p_j.len() == b,
        "histogram tables do not match {b} bins"
    );
    ensure!(hist.samples >= i.len(), "histogram covers fewer samples than given");
    let mut g_ij = vec![0.0; b * b];
    let mut g_i = vec![0.0; b];
    let mut g_j = vec![0.0; b];
    for m in 0..b {
        for n in 0..b {
            let p = hist.p_ij[m * b + n];
            if p > 0.0 {
                g_ij[m * b + n] = (p / (hist.p_i[m] * hist.p_j[n])).ln() + 1.0;
                g_i[m] -= p / hist.p_i[m];
                g_j[n] -= p / hist.p_j[n];
            }
        }
    }
    let scale = g / hist.samples as f64;
    let mut di = Vec::with_capacity(i.len());
    let mut dj = Vec::with_capacity(j.len());
    for (&x, &y) in i.iter().zip(j) {
        let wi = kernel.sample_weights(x, b);
        let wj = kernel.sample_weights(y, b);
        let mut sx = 0.0;
        for a in 0..wi.len {
            let m = wi.first + a;
            let mut inner = g_i[m];
            for c in 0..wj.len {
                inner += g_ij[m * b + wj.first + c] * wj.w[c];
            }
            sx += wi.dw[a] * inner;
        }
        let mut sy = 0.0;
        for c in 0..wj.len {
            let n = wj.first + c;
            let mut inner = g_j[n];
            for a in 0..wi.len {
                inner += g_ij[(wi.first + a) * b + n] * wi.w[a];
            }
            sy += wj.dw[c] * inner;
        }
        di.push(scale * sx);
        dj.push(scale * sy);
    }
    Ok((di, dj))
}

/// Negative-MI loss between a fixed and a moved volume, with intensities
/// mapped to `[0, 1]` by scales that stay fixed during optimization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiLoss {
    pub params: MiParams,
    pub scale_f: IntensityScale,
    pub scale_m: IntensityScale,
    /// Use the binned estimator for the forward pass. The backward pass then
    /// differentiates through the kernel weights against the binned tables.
    pub approx_forward: bool,
}

impl MiLoss {
    pub fn new(params: MiParams, f: &Volume3, m: &Volume3) -> Self {
        Self {
            params,
            scale_f: IntensityScale::of_volume(f),
            scale_m: IntensityScale::of_volume(m),
            approx_forward: false,
        }
    }

    /// Normalized joint histogram of one block of voxels.
    pub fn histogram(&self, f: &[f64], m: &[f64]) -> Result<JointHistogram> {
        let i = self.scale_f.normalize(f);
        let j = self.scale_m.normalize(m);
        let h = if self.approx_forward {
            mi_forward_approx(&i, &j, &self.params)?.1
        } else {
            mi_forward_exact(&i, &j, &self.params)?.1
        };
        Ok(h)
    }

    pub fn loss(&self, hist: &JointHistogram) -> f64 {
        -hist.mutual_information()
    }

    /// Gradient of `g * loss` with respect to the raw moved intensities `m`.
    /// `hist.samples` must be the total voxel count the loss averages over.
    pub fn grad(&self, g: f64, f: &[f64], m: &[f64], hist: &JointHistogram) -> Result<Vec<f64>> {
        let i = self.scale_f.normalize(f);
        let j = self.scale_m.normalize(m);
        let (_, mut dj) = mi_backward(-g, &i, &j, hist, &self.params.kernel)?;
        for (d, &x) in dj.iter_mut().zip(m) {
            *d *= self.scale_m.slope(x);
        }
        Ok(dj)
    }

    pub fn evaluate(&self, f: &Volume3, m: &Volume3) -> Result<(f64, Vec<f64>)> {
        ensure!(
            f.dims() == m.dims(),
            "MI inputs live on different lattices: {:?} vs {:?}",
            f.dims().0,
            m.dims().0
        );
        let h = self.histogram(f.data(), m.data())?;
        let grad = self.grad(1.0, f.data(), m.data(), &h)?;
        Ok((self.loss(&h), grad))
    }
}

#[cfg(test)]
mod tests;
