//! Mean squared intensity difference.

use crate::error::{ensure, Result};
use crate::volume::Volume3;

fn check(f: &Volume3, m: &Volume3) -> Result<()> {
    ensure!(
        f.dims() == m.dims(),
        "MSE inputs live on different lattices: {:?} vs {:?}",
        f.dims().0,
        m.dims().0
    );
    Ok(())
}

/// Sum of squared differences, without the `1/N`.
pub fn sq_diff_sum(f: &Volume3, m: &Volume3) -> Result<f64> {
    check(f, m)?;
    Ok(f.data().iter().zip(m.data()).map(|(a, b)| (b - a) * (b - a)).sum())
}

pub fn mse(f: &Volume3, m: &Volume3) -> Result<f64> {
    Ok(sq_diff_sum(f, m)? / f.len() as f64)
}

/// Gradient of `g * loss` with respect to `m`, where the loss averages over
/// `total` voxels (the whole volume when `m` is one shard of it).
pub fn mse_grad(g: f64, f: &Volume3, m: &Volume3, total: usize) -> Result<Volume3> {
    check(f, m)?;
    ensure!(total >= f.len(), "total voxel count {total} below shard size {}", f.len());
    let s = 2.0 * g / total as f64;
    let data = f.data().iter().zip(m.data()).map(|(a, b)| s * (b - a)).collect();
    Ok(Volume3::from_vec(m.dims(), data)?.with_geometry_of(m))
}
