use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Most bins any kernel below touches for one sample.
pub const MAX_SUPPORT: usize = 5;

/// Parzen window in bin units: `eval(d)` with `d = bin centre - sample`,
/// both measured in bins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ParzenKernel {
    /// Truncated at three sigma, scaled to unit integral over its support.
    Gaussian { sigma: f64, norm: f64 },
    /// Cubic B-spline, support `(-2, 2)`.
    BSpline3,
    /// Nearest-bin assignment; the Parzen estimate becomes a plain histogram.
    Nearest,
}

/// Kernel weights of one sample: bins `first..first + len`.
#[derive(Clone, Copy, Debug)]
pub struct SampleWeights {
    pub first: usize,
    pub len: usize,
    /// Normalized weights, summing to 1.
    pub w: [f64; MAX_SUPPORT],
    /// Derivative of each normalized weight with respect to the intensity.
    pub dw: [f64; MAX_SUPPORT],
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

impl ParzenKernel {
    pub fn gaussian(sigma_bins: f64) -> Result<Self> {
        ensure!(
            sigma_bins.is_finite() && sigma_bins > 0.0 && sigma_bins <= 1.0,
            "gaussian kernel sigma must lie in (0, 1] bins, got {sigma_bins}"
        );
        let r = 3.0 * sigma_bins;
        let norm = simpson(|x| (-x * x / (2.0 * sigma_bins * sigma_bins)).exp(), -r, r, 4000);
        let k = ParzenKernel::Gaussian { sigma: sigma_bins, norm };
        k.check_integral()?;
        Ok(k)
    }

    pub fn bspline3() -> Result<Self> {
        let k = ParzenKernel::BSpline3;
        k.check_integral()?;
        Ok(k)
    }

    /// Gaussian with sigma half a bin.
    pub fn default_gaussian() -> Self {
        Self::gaussian(0.5).expect("default kernel is valid")
    }

    pub fn radius(&self) -> f64 {
        match *self {
            ParzenKernel::Gaussian { sigma, .. } => 3.0 * sigma,
            ParzenKernel::BSpline3 => 2.0,
            ParzenKernel::Nearest => 0.5,
        }
    }

    pub fn eval(&self, d: f64) -> f64 {
        match *self {
            ParzenKernel::Gaussian { sigma, norm } => {
                if d.abs() > 3.0 * sigma {
                    0.0
                } else {
                    (-d * d / (2.0 * sigma * sigma)).exp() / norm
                }
            }
            ParzenKernel::BSpline3 => {
                let a = d.abs();
                if a < 1.0 {
                    (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
                } else if a < 2.0 {
                    let b = 2.0 - a;
                    b * b * b / 6.0
                } else {
                    0.0
                }
            }
            ParzenKernel::Nearest => {
                if (-0.5..0.5).contains(&d) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `d eval / d d`.
    pub fn derivative(&self, d: f64) -> f64 {
        match *self {
            ParzenKernel::Gaussian { sigma, .. } => {
                if d.abs() > 3.0 * sigma {
                    0.0
                } else {
                    -d / (sigma * sigma) * self.eval(d)
                }
            }
            ParzenKernel::BSpline3 => {
                let a = d.abs();
                let s = d.signum();
                if a < 1.0 {
                    s * (-2.0 * a + 1.5 * a * a)
                } else if a < 2.0 {
                    let b = 2.0 - a;
                    -s * 0.5 * b * b
                } else {
                    0.0
                }
            }
            ParzenKernel::Nearest => 0.0,
        }
    }

    fn check_integral(&self) -> Result<()> {
        let r = self.radius();
        let total = simpson(|x| self.eval(x), -r, r, 6000);
        if (total - 1.0).abs() > 1e-3 {
            return Err(Error::Numerical(format!(
                "Parzen kernel integrates to {total}, expected 1"
            )));
        }
        Ok(())
    }

    /// Normalized weights and their intensity derivatives for a sample with
    /// intensity `x` in `[0, 1]` over `bins` bins.
    #[inline]
    pub fn sample_weights(&self, x: f64, bins: usize) -> SampleWeights {
        let b = bins as f64;
        let y = x * b;
        let mut out = SampleWeights {
            first: 0,
            len: 0,
            w: [0.0; MAX_SUPPORT],
            dw: [0.0; MAX_SUPPORT],
        };
        if let ParzenKernel::Nearest = self {
            out.first = (y.floor().max(0.0) as usize).min(bins - 1);
            out.len = 1;
            out.w[0] = 1.0;
            return out;
        }
        let r = self.radius();
        let lo = ((y - 0.5 - r).ceil().max(0.0)) as usize;
        let hi = ((y - 0.5 + r).floor() as isize).min(bins as isize - 1);
        let mut kappa = [0.0; MAX_SUPPORT];
        let mut omega = [0.0; MAX_SUPPORT];
        let (mut s, mut ds) = (0.0, 0.0);
        let mut len = 0;
        let mut j = lo as isize;
        while j <= hi && len < MAX_SUPPORT {
            let d = j as f64 + 0.5 - y;
            kappa[len] = self.eval(d);
            // d kappa / d x = kappa'(d) * dd/dx = -kappa'(d) * B
            omega[len] = -self.derivative(d) * b;
            s += kappa[len];
            ds += omega[len];
            len += 1;
            j += 1;
        }
        out.first = lo;
        out.len = len;
        if s > 0.0 {
            for i in 0..len {
                out.w[i] = kappa[i] / s;
                out.dw[i] = (omega[i] * s - kappa[i] * ds) / (s * s);
            }
        }
        out
    }
}
