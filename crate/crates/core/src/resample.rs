//! Trilinear resampling between pyramid levels (align-corners lattice).

use crate::conv::{convolve_separable, EdgeMode, Kernel1d};
use crate::error::{ensure, Result};
use crate::volume::{Dims, Lattice, Volume3, WarpField};

/// Lattice size after scaling each axis by `factor` (rounded up).
pub fn scaled_dims(dims: Dims, factor: f64) -> Result<Dims> {
    ensure!(
        factor.is_finite() && factor > 0.0,
        "scale factor must be positive, got {factor}"
    );
    let mut out = [0usize; 3];
    for a in 0..3 {
        // tolerate representation error such as 48 * 0.1 = 4.800000000000001
        let scaled = dims[a] as f64 * factor;
        let n = (scaled - 1e-9).ceil().max(1.0) as usize;
        ensure!(
            n >= 2,
            "resampled axis {a} would have {n} voxel(s); need at least 2"
        );
        out[a] = n;
    }
    Ok(Dims(out))
}

/// Rescales a volume by `factor`; downsampling first applies a Gaussian
/// anti-alias filter with sigma `0.5 / factor` voxels.
pub fn resample_scale(v: &Volume3, factor: f64) -> Result<Volume3> {
    let target = scaled_dims(v.dims(), factor)?;
    if factor == 1.0 {
        return Ok(v.clone());
    }
    let mut src = v.clone();
    if factor < 1.0 {
        let kernel = Kernel1d::gaussian(0.5 / factor)?;
        let dims = src.dims();
        convolve_separable(src.data_mut(), dims, 1, &kernel, EdgeMode::PointReflect);
    }
    let mut out = resample_to(&src, target);
    for a in 0..3 {
        let (n, m) = (v.dims()[a], target[a]);
        if n > 1 {
            out.spacing[a] = v.spacing[a] * (n - 1) as f64 / (m - 1) as f64;
        }
    }
    Ok(out)
}

/// Trilinear resampling of a warp onto `target`; displacement values are in
/// normalized units and carry over unchanged.
pub fn resample_warp(u: &WarpField, target: Dims) -> WarpField {
    resample_to(u, target)
}

/// Interpolates any lattice onto `target` with matching normalized extent.
pub fn resample_to<L: Lattice>(src: &L, target: Dims) -> L {
    let dims = src.dims();
    if dims == target {
        return src.clone();
    }
    let ch = src.channels();
    let values = src.values();
    let mut data = Vec::with_capacity(target.len() * ch);
    let cells: Vec<Vec<(usize, f64)>> = (0..3)
        .map(|a| (0..target[a]).map(|i| source_cell(i, target[a], dims[a])).collect())
        .collect();
    for i in 0..target[0] {
        let (x0, ax) = cells[0][i];
        for j in 0..target[1] {
            let (y0, ay) = cells[1][j];
            for k in 0..target[2] {
                let (z0, az) = cells[2][k];
                for c in 0..ch {
                    let mut acc = 0.0;
                    for corner in 0..8 {
                        let (dx, dy, dz) = (corner >> 2 & 1, corner >> 1 & 1, corner & 1);
                        let w = (if dx == 1 { ax } else { 1.0 - ax })
                            * (if dy == 1 { ay } else { 1.0 - ay })
                            * (if dz == 1 { az } else { 1.0 - az });
                        if w == 0.0 {
                            continue;
                        }
                        let idx = dims.index(
                            (x0 + dx).min(dims[0] - 1),
                            (y0 + dy).min(dims[1] - 1),
                            (z0 + dz).min(dims[2] - 1),
                        );
                        acc += w * values[idx * ch + c];
                    }
                    data.push(acc);
                }
            }
        }
    }
    src.rebuild(target, data)
}

fn source_cell(i: usize, m: usize, n: usize) -> (usize, f64) {
    if n == 1 || m == 1 {
        return (0, 0.0);
    }
    let p = i as f64 * (n - 1) as f64 / (m - 1) as f64;
    let i0 = (p.floor() as usize).min(n - 2);
    (i0, p - i0 as f64)
}
