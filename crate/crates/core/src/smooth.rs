use crate::conv::{convolve_separable, EdgeMode, Kernel1d};
use crate::error::{ensure, Result};
use crate::volume::{Real, Volume3, WarpField};

/// Anything that can be filtered channel-by-channel with a separable kernel.
pub trait Smoothable: Clone {
    fn filter_in_place(&mut self, kernel: &Kernel1d, edge: EdgeMode);
}

impl<T: Real> Smoothable for Volume3<T> {
    fn filter_in_place(&mut self, kernel: &Kernel1d, edge: EdgeMode) {
        let dims = self.dims();
        convolve_separable(self.data_mut(), dims, 1, kernel, edge);
    }
}

impl Smoothable for WarpField {
    fn filter_in_place(&mut self, kernel: &Kernel1d, edge: EdgeMode) {
        let dims = self.dims();
        convolve_separable(self.data_mut(), dims, 3, kernel, edge);
    }
}

/// Separable Gaussian blur with `sigma` in voxels; edge taps are renormalized.
pub fn gaussian_smooth<S: Smoothable>(v: &S, sigma: f64) -> Result<S> {
    let mut out = v.clone();
    gaussian_smooth_in_place(&mut out, sigma)?;
    Ok(out)
}

pub fn gaussian_smooth_in_place<S: Smoothable>(v: &mut S, sigma: f64) -> Result<()> {
    ensure!(sigma.is_finite(), "sigma must be finite, got {sigma}");
    ensure!(sigma >= 0.0, "sigma must be non-negative, got {sigma}");
    if sigma == 0.0 {
        return Ok(());
    }
    let kernel = Kernel1d::gaussian(sigma)?;
    v.filter_in_place(&kernel, EdgeMode::Renormalize);
    Ok(())
}
