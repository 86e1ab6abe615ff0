//! Straightforward sampler that builds the full coordinate grid first.
//!
//! Kept as a correctness and memory baseline for the fused kernels: it
//! allocates the identity grid, the warped grid and the per-voxel source
//! positions as separate `3N` arrays, the way a tensor library would.

use super::{SamplerArgs, SamplerGrads, CELL_TIE_EPS};
use crate::error::{ensure, Result};
use crate::volume::{Dims, Volume3, WarpField};

fn identity_grid(dims: Dims, args: &SamplerArgs) -> Vec<f64> {
    let mut grid = vec![0.0; 3 * dims.len()];
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let v = dims.index(i, j, k);
                grid[3 * v] = args.bounds.coord(0, i, dims[0]);
                grid[3 * v + 1] = args.bounds.coord(1, j, dims[1]);
                grid[3 * v + 2] = args.bounds.coord(2, k, dims[2]);
            }
        }
    }
    grid
}

fn warped_grid(grid: &[f64], u: Option<&WarpField>, args: &SamplerArgs) -> Vec<f64> {
    let m = &args.affine.matrix;
    let t = &args.affine.translation;
    let mut affine = vec![0.0; grid.len()];
    for (dst, x) in affine.chunks_exact_mut(3).zip(grid.chunks_exact(3)) {
        for r in 0..3 {
            dst[r] = m[r][0] * x[0] + m[r][1] * x[1] + m[r][2] * x[2] + t[r];
        }
    }
    let mut src = vec![0.0; grid.len()];
    for (v, dst) in src.chunks_exact_mut(3).enumerate() {
        for r in 0..3 {
            let disp = u.map_or(0.0, |u| u.data()[3 * v + r]);
            dst[r] = affine[3 * v + r] + args.scale[r] * disp;
        }
    }
    src
}

// (index, weight, d weight / d normalized coordinate) for the two taps on one axis
fn taps(x: f64, n: usize) -> [(isize, f64, f64); 2] {
    let h = (n - 1) as f64 / 2.0;
    let p = (x + 1.0) * h;
    let lo = (p + CELL_TIE_EPS).floor();
    let f = p - lo;
    let lo = lo as isize;
    [(lo, 1.0 - f, -h), (lo + 1, f, h)]
}

fn fetch(image: &Volume3, i: isize, j: isize, k: isize) -> Option<usize> {
    let d = image.dims();
    let ok = |v: isize, n: usize| v >= 0 && (v as usize) < n;
    (ok(i, d[0]) && ok(j, d[1]) && ok(k, d[2])).then(|| d.index(i as usize, j as usize, k as usize))
}

pub fn materialized_sample(
    image: &Volume3,
    warp: Option<&WarpField>,
    args: &SamplerArgs,
) -> Result<Volume3> {
    let out_dims = warp.map_or(image.dims(), |u| u.dims());
    args.validate(out_dims)?;
    let grid = identity_grid(out_dims, args);
    let src = warped_grid(&grid, warp, args);
    let d = image.dims();
    let mut out = vec![0.0; out_dims.len()];
    for (v, x) in src.chunks_exact(3).enumerate() {
        let (tx, ty, tz) = (taps(x[0], d[0]), taps(x[1], d[1]), taps(x[2], d[2]));
        let mut acc = 0.0;
        for &(i, wi, _) in &tx {
            for &(j, wj, _) in &ty {
                for &(k, wk, _) in &tz {
                    if let Some(idx) = fetch(image, i, j, k) {
                        acc += wi * wj * wk * image.data()[idx];
                    }
                }
            }
        }
        out[v] = acc;
    }
    Volume3::from_vec(out_dims, out)
}

/// All four gradients of the materialized path.
pub fn materialized_sample_backward(
    grad_out: &[f64],
    image: &Volume3,
    warp: Option<&WarpField>,
    args: &SamplerArgs,
) -> Result<SamplerGrads> {
    let out_dims = warp.map_or(image.dims(), |u| u.dims());
    args.validate(out_dims)?;
    ensure!(grad_out.len() == out_dims.len(), "gradient length mismatch");
    let grid = identity_grid(out_dims, args);
    let src = warped_grid(&grid, warp, args);
    let d = image.dims();
    // d loss / d source position, one 3-vector per voxel
    let mut g_src = vec![0.0; src.len()];
    let mut g_img = vec![0.0; d.len()];
    for (v, x) in src.chunks_exact(3).enumerate() {
        let g = grad_out[v];
        let (tx, ty, tz) = (taps(x[0], d[0]), taps(x[1], d[1]), taps(x[2], d[2]));
        for &(i, wi, di) in &tx {
            for &(j, wj, dj) in &ty {
                for &(k, wk, dk) in &tz {
                    if let Some(idx) = fetch(image, i, j, k) {
                        let val = image.data()[idx];
                        g_img[idx] += wi * wj * wk * g;
                        g_src[3 * v] += di * wj * wk * val * g;
                        g_src[3 * v + 1] += wi * dj * wk * val * g;
                        g_src[3 * v + 2] += wi * wj * dk * val * g;
                    }
                }
            }
        }
    }
    let mut g_a = [[0.0; 3]; 3];
    let mut g_t = [0.0; 3];
    for (gs, x) in g_src.chunks_exact(3).zip(grid.chunks_exact(3)) {
        for r in 0..3 {
            g_t[r] += gs[r];
            for c in 0..3 {
                g_a[r][c] += gs[r] * x[c];
            }
        }
    }
    let warp_grad = match warp {
        Some(_) => {
            let gu: Vec<f64> = g_src
                .chunks_exact(3)
                .flat_map(|gs| [args.scale[0] * gs[0], args.scale[1] * gs[1], args.scale[2] * gs[2]])
                .collect();
            Some(WarpField::from_vec(out_dims, gu)?)
        }
        None => None,
    };
    Ok(SamplerGrads {
        image: Some(Volume3::from_vec(d, g_img)?),
        warp: warp_grad,
        affine: Some(g_a),
        translation: Some(g_t),
    })
}
