//! Separable 1-D convolution along one lattice axis, in place.
//!
//! Each pass needs only a scratch buffer the length of one line, so the
//! separable filters never allocate a lattice-sized temporary.

use crate::error::{ensure, Result};
use crate::volume::{Dims, Real};

/// How taps falling outside the lattice are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeMode {
    /// Missing taps read zero.
    Zero,
    /// Missing taps are dropped and the remaining weights rescaled to sum 1.
    Renormalize,
    /// Missing taps read the point reflection `2 x[edge] - x[edge - d]`, which
    /// reproduces affine profiles exactly.
    PointReflect,
}

/// Odd-length symmetric 1-D kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel1d {
    weights: Vec<f64>,
}

impl Kernel1d {
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        ensure!(
            weights.len() % 2 == 1,
            "kernel length must be odd, got {}",
            weights.len()
        );
        ensure!(
            weights.iter().all(|w| w.is_finite()),
            "kernel weights must be finite"
        );
        Ok(Self { weights })
    }

    /// Truncated Gaussian with radius `ceil(3 sigma)`, normalized to sum 1.
    pub fn gaussian(sigma: f64) -> Result<Self> {
        ensure!(
            sigma.is_finite() && sigma > 0.0,
            "gaussian sigma must be positive and finite, got {sigma}"
        );
        let radius = (3.0 * sigma).ceil() as isize;
        let mut weights: Vec<f64> = (-radius..=radius)
            .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { weights })
    }

    /// Averaging window of odd width, weights `1/width`.
    pub fn boxcar(width: usize) -> Result<Self> {
        ensure!(
            width % 2 == 1,
            "window width must be odd, got {width}"
        );
        Ok(Self {
            weights: vec![1.0 / width as f64; width],
        })
    }

    #[inline(always)]
    pub fn radius(&self) -> usize {
        self.weights.len() / 2
    }

    #[inline(always)]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Convolves every line along `axis` of a channel-interleaved buffer.
pub fn convolve_axis<T: Real>(
    data: &mut [T],
    dims: Dims,
    channels: usize,
    axis: usize,
    kernel: &Kernel1d,
    edge: EdgeMode,
) {
    debug_assert_eq!(data.len(), dims.len() * channels);
    let n = dims[axis];
    if n == 0 || kernel.weights.len() == 1 && kernel.weights[0] == 1.0 {
        return;
    }
    let stride = dims.stride(axis) * channels;
    let (oa, ob) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut line = vec![0.0f64; n];
    let mut out = vec![0.0f64; n];
    for a in 0..dims[oa] {
        for b in 0..dims[ob] {
            let mut pos = [0usize; 3];
            pos[oa] = a;
            pos[ob] = b;
            let base = dims.index(pos[0], pos[1], pos[2]) * channels;
            for c in 0..channels {
                let start = base + c;
                for (i, v) in line.iter_mut().enumerate() {
                    *v = data[start + i * stride].to_f64();
                }
                filter_line(&line, &mut out, kernel, edge);
                for (i, v) in out.iter().enumerate() {
                    data[start + i * stride] = T::from_f64(*v);
                }
            }
        }
    }
}

/// Applies the kernel along all three axes (0, then 1, then 2).
pub fn convolve_separable<T: Real>(
    data: &mut [T],
    dims: Dims,
    channels: usize,
    kernel: &Kernel1d,
    edge: EdgeMode,
) {
    for axis in 0..3 {
        convolve_axis(data, dims, channels, axis, kernel, edge);
    }
}

fn filter_line(line: &[f64], out: &mut [f64], kernel: &Kernel1d, edge: EdgeMode) {
    let n = line.len() as isize;
    let r = kernel.radius() as isize;
    let w = &kernel.weights;
    for i in 0..n {
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for k in -r..=r {
            let j = i + k;
            let wk = w[(k + r) as usize];
            if (0..n).contains(&j) {
                acc += wk * line[j as usize];
                wsum += wk;
            } else {
                match edge {
                    EdgeMode::Zero | EdgeMode::Renormalize => {}
                    EdgeMode::PointReflect => {
                        let v = if j < 0 {
                            let m = (-j).min(n - 1);
                            2.0 * line[0] - line[m as usize]
                        } else {
                            let m = (j - (n - 1)).min(n - 1);
                            2.0 * line[(n - 1) as usize] - line[(n - 1 - m) as usize]
                        };
                        acc += wk * v;
                    }
                }
            }
        }
        out[i as usize] = match edge {
            EdgeMode::Renormalize => acc / wsum,
            _ => acc,
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_kernel_sums_to_one() {
        let k = Kernel1d::gaussian(1.5).unwrap();
        assert_eq!(k.radius(), 5);
        let s: f64 = k.weights().iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn even_box_rejected() {
        assert!(Kernel1d::boxcar(4).is_err());
        assert!(Kernel1d::boxcar(1).is_ok());
    }

    #[test]
    fn zero_edge_loses_mass_renormalize_keeps_dc() {
        let dims = Dims::new(1, 1, 6).unwrap();
        let k = Kernel1d::boxcar(3).unwrap();
        let mut a = vec![2.0f64; 6];
        convolve_axis(&mut a, dims, 1, 2, &k, EdgeMode::Zero);
        assert!((a[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((a[2] - 2.0).abs() < 1e-15);
        let mut b = vec![2.0f64; 6];
        convolve_axis(&mut b, dims, 1, 2, &k, EdgeMode::Renormalize);
        assert!(b.iter().all(|v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn point_reflect_keeps_ramp() {
        let dims = Dims::new(1, 1, 9).unwrap();
        let k = Kernel1d::gaussian(1.0).unwrap();
        let mut a: Vec<f64> = (0..9).map(|i| 0.5 * i as f64 - 1.0).collect();
        let expect = a.clone();
        convolve_axis(&mut a, dims, 1, 2, &k, EdgeMode::PointReflect);
        for (x, y) in a.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn channels_are_filtered_independently() {
        let dims = Dims::new(1, 1, 5).unwrap();
        let k = Kernel1d::boxcar(3).unwrap();
        let mut data = Vec::new();
        for i in 0..5 {
            data.extend_from_slice(&[1.0, i as f64]);
        }
        convolve_axis(&mut data, dims, 2, 2, &k, EdgeMode::Renormalize);
        for i in 0..5 {
            assert!((data[2 * i] - 1.0).abs() < 1e-15);
        }
        assert!((data[2 * 2 + 1] - 2.0).abs() < 1e-15);
    }
}
