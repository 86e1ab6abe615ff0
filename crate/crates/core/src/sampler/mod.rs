//! Composite implicit grid sampler.
//!
//! Evaluates `I(A x + t + S u(x))` for every voxel `x` of an output lattice
//! whose identity grid is described only by its [`DomainBounds`]. No coordinate
//! grid is ever materialized: each source position is formed in registers and
//! interpolated immediately. The sampled image always occupies the canonical
//! `[-1, 1]^3` frame of its own lattice, with zero padding outside it.

mod compose;
pub mod reference;

pub use compose::{compose, scaling_and_squaring};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::volume::{AffineMap, Dims, DomainBounds, Real, Volume3, WarpField};

/// Index-space tolerance for assigning a position to a cell. Positions within
/// this distance below a lattice plane are treated as lying on it, so ties
/// resolve to the same cell regardless of the frame the coordinate was
/// computed in.
pub const CELL_TIE_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerArgs {
    pub affine: AffineMap,
    /// Diagonal of the warp rescale `S`.
    pub scale: [f64; 3],
    /// Normalized bounds of the output lattice's identity grid.
    pub bounds: DomainBounds,
}

impl SamplerArgs {
    pub fn identity() -> Self {
        Self {
            affine: AffineMap::IDENTITY,
            scale: [1.0; 3],
            bounds: DomainBounds::CANONICAL,
        }
    }

    pub fn with_affine(affine: AffineMap) -> Self {
        Self {
            affine,
            ..Self::identity()
        }
    }

    pub fn validate(&self, out_dims: Dims) -> Result<()> {
        ensure!(
            self.scale.iter().all(|s| s.is_finite() && *s > 0.0),
            "warp rescale entries must be positive, got {:?}",
            self.scale
        );
        ensure!(
            self.affine.matrix.iter().flatten().all(|v| v.is_finite())
                && self.affine.translation.iter().all(|v| v.is_finite()),
            "affine map must be finite"
        );
        self.bounds.validate_for(out_dims)
    }

    /// Normalized identity-grid position of output voxel `(i, j, k)`.
    #[inline(always)]
    pub fn grid_point(&self, dims: Dims, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.bounds.coord(0, i, dims[0]),
            self.bounds.coord(1, j, dims[1]),
            self.bounds.coord(2, k, dims[2]),
        ]
    }

    /// Source position `A x + t + S u`.
    #[inline(always)]
    pub fn source_point(&self, x: [f64; 3], u: [f64; 3]) -> [f64; 3] {
        let a = self.affine.apply(x);
        [
            a[0] + self.scale[0] * u[0],
            a[1] + self.scale[1] * u[1],
            a[2] + self.scale[2] * u[2],
        ]
    }
}

/// Which gradients [`fused_sample_backward`] should produce.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradRequest {
    pub image: bool,
    pub warp: bool,
    pub affine: bool,
    pub translation: bool,
}

impl GradRequest {
    pub const ALL: GradRequest = GradRequest {
        image: true,
        warp: true,
        affine: true,
        translation: true,
    };
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplerGrads {
    pub image: Option<Volume3>,
    pub warp: Option<WarpField>,
    pub affine: Option<[[f64; 3]; 3]>,
    pub translation: Option<[f64; 3]>,
}

/// Trilinear cell of a normalized position inside an `n`-voxel-per-axis image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Cell {
    pub base: [isize; 3],
    pub frac: [f64; 3],
    /// d(index)/d(normalized coordinate) per axis.
    pub jac: [f64; 3],
}

impl Cell {
    #[inline(always)]
    pub fn locate(pos: [f64; 3], dims: Dims) -> Cell {
        let mut base = [0isize; 3];
        let mut frac = [0.0; 3];
        let mut jac = [0.0; 3];
        for a in 0..3 {
            let half = (dims[a] - 1) as f64 * 0.5;
            let p = (pos[a] + 1.0) * half;
            let f = (p + CELL_TIE_EPS).floor();
            base[a] = if f.is_finite() {
                f.clamp(-2.0, dims[a] as f64 + 1.0) as isize
            } else {
                -2
            };
            frac[a] = p - f;
            jac[a] = half;
        }
        Cell { base, frac, jac }
    }

    /// True when no corner of the cell touches the lattice.
    #[inline(always)]
    pub fn outside(&self, dims: Dims) -> bool {
        (0..3).any(|a| self.base[a] < -1 || self.base[a] >= dims[a] as isize)
    }

    /// Linear index of corner `(dx, dy, dz)` or `None` when zero-padded.
    #[inline(always)]
    pub fn corner(&self, dims: Dims, dx: usize, dy: usize, dz: usize) -> Option<usize> {
        let x = self.base[0] + dx as isize;
        let y = self.base[1] + dy as isize;
        let z = self.base[2] + dz as isize;
        if x < 0 || y < 0 || z < 0 {
            return None;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= dims[0] || y >= dims[1] || z >= dims[2] {
            return None;
        }
        Some(dims.index(x, y, z))
    }

    #[inline(always)]
    pub fn weight(&self, dx: usize, dy: usize, dz: usize) -> f64 {
        let w = |a: usize, d: usize| if d == 1 { self.frac[a] } else { 1.0 - self.frac[a] };
        w(0, dx) * w(1, dy) * w(2, dz)
    }
}

/// Interpolated value and its gradient with respect to the normalized source position.
#[inline(always)]
pub(crate) fn value_and_grad<T: Real>(image: &[T], dims: Dims, cell: &Cell) -> (f64, [f64; 3]) {
    let mut v = 0.0;
    let mut d = [0.0; 3];
    let [fx, fy, fz] = cell.frac;
    for corner in 0..8 {
        let (dx, dy, dz) = (corner >> 2 & 1, corner >> 1 & 1, corner & 1);
        let Some(idx) = cell.corner(dims, dx, dy, dz) else {
            continue;
        };
        let val = image[idx].to_f64();
        let wx = if dx == 1 { fx } else { 1.0 - fx };
        let wy = if dy == 1 { fy } else { 1.0 - fy };
        let wz = if dz == 1 { fz } else { 1.0 - fz };
        let sx = if dx == 1 { 1.0 } else { -1.0 };
        let sy = if dy == 1 { 1.0 } else { -1.0 };
        let sz = if dz == 1 { 1.0 } else { -1.0 };
        v += wx * wy * wz * val;
        d[0] += sx * wy * wz * val;
        d[1] += wx * sy * wz * val;
        d[2] += wx * wy * sz * val;
    }
    (v, [d[0] * cell.jac[0], d[1] * cell.jac[1], d[2] * cell.jac[2]])
}

#[inline(always)]
pub(crate) fn value_at<T: Real>(image: &[T], dims: Dims, cell: &Cell) -> f64 {
    let mut v = 0.0;
    for corner in 0..8 {
        let (dx, dy, dz) = (corner >> 2 & 1, corner >> 1 & 1, corner & 1);
        if let Some(idx) = cell.corner(dims, dx, dy, dz) {
            v += cell.weight(dx, dy, dz) * image[idx].to_f64();
        }
    }
    v
}

fn check_image(dims: Dims) -> Result<()> {
    ensure!(
        (0..3).all(|a| dims[a] >= 2),
        "sampled image needs at least 2 voxels per axis, got {:?}",
        dims.0
    );
    Ok(())
}

fn output_geometry<T: Real>(image: &Volume3<T>, out_dims: Dims) -> ([f64; 3], [f64; 3]) {
    let mut spacing = image.spacing;
    let src = image.dims();
    for a in 0..3 {
        if out_dims[a] > 1 && out_dims[a] != src[a] {
            spacing[a] = image.spacing[a] * (src[a] - 1) as f64 / (out_dims[a] - 1) as f64;
        }
    }
    (spacing, image.origin)
}

/// `out(x) = image(A x + t + S u(x))` on the warp's lattice (or the image's
/// lattice when no warp is given).
pub fn fused_sample<T: Real>(
    image: &Volume3<T>,
    warp: Option<&WarpField>,
    args: &SamplerArgs,
) -> Result<Volume3<T>> {
    let src_dims = image.dims();
    check_image(src_dims)?;
    let out_dims = warp.map_or(src_dims, |u| u.dims());
    args.validate(out_dims)?;
    let src = image.data();
    let u = warp.map(|w| w.data());
    let mut out = Vec::with_capacity(out_dims.len());
    let mut voxel = 0usize;
    for i in 0..out_dims[0] {
        for j in 0..out_dims[1] {
            for k in 0..out_dims[2] {
                let x = args.grid_point(out_dims, i, j, k);
                let disp = match u {
                    Some(u) => [u[3 * voxel], u[3 * voxel + 1], u[3 * voxel + 2]],
                    None => [0.0; 3],
                };
                let cell = Cell::locate(args.source_point(x, disp), src_dims);
                let v = if cell.outside(src_dims) {
                    0.0
                } else {
                    value_at(src, src_dims, &cell)
                };
                out.push(T::from_f64(v));
                voxel += 1;
            }
        }
    }
    let (spacing, origin) = output_geometry(image, out_dims);
    let mut vol = Volume3::from_vec(out_dims, out)?;
    vol.spacing = spacing;
    vol.origin = origin;
    Ok(vol)
}

/// Adds the sampled values into `out` instead of allocating an output
/// volume. Returns the sum of squares of the added values.
pub fn fused_sample_accumulate<T: Real>(
    image: &Volume3<T>,
    warp: &WarpField,
    args: &SamplerArgs,
    out: &mut [f64],
) -> Result<f64> {
    let src_dims = image.dims();
    check_image(src_dims)?;
    let out_dims = warp.dims();
    args.validate(out_dims)?;
    ensure!(
        out.len() == out_dims.len(),
        "accumulator has {} values, output lattice has {}",
        out.len(),
        out_dims.len()
    );
    let src = image.data();
    let u = warp.data();
    let mut sq = 0.0;
    let mut voxel = 0usize;
    for i in 0..out_dims[0] {
        for j in 0..out_dims[1] {
            for k in 0..out_dims[2] {
                let x = args.grid_point(out_dims, i, j, k);
                let disp = [u[3 * voxel], u[3 * voxel + 1], u[3 * voxel + 2]];
                let cell = Cell::locate(args.source_point(x, disp), src_dims);
                if !cell.outside(src_dims) {
                    let v = value_at(src, src_dims, &cell);
                    out[voxel] += v;
                    sq += v * v;
                }
                voxel += 1;
            }
        }
    }
    Ok(sq)
}

/// Analytical backward pass of [`fused_sample`] for a scalar loss with
/// upstream gradient `grad_out` on the output lattice.
pub fn fused_sample_backward<T: Real>(
    grad_out: &[f64],
    image: &Volume3<T>,
    warp: Option<&WarpField>,
    args: &SamplerArgs,
    want: GradRequest,
) -> Result<SamplerGrads> {
    let src_dims = image.dims();
    check_image(src_dims)?;
    let out_dims = warp.map_or(src_dims, |u| u.dims());
    args.validate(out_dims)?;
    ensure!(
        grad_out.len() == out_dims.len(),
        "upstream gradient has {} values, output lattice has {}",
        grad_out.len(),
        out_dims.len()
    );
    ensure!(
        !want.warp || warp.is_some(),
        "warp gradient requested without a warp"
    );
    let src = image.data();
    let u = warp.map(|w| w.data());
    let mut g_image = want.image.then(|| vec![0.0; src_dims.len()]);
    let mut g_warp = want.warp.then(|| vec![0.0; 3 * out_dims.len()]);
    let mut g_affine = [[0.0; 3]; 3];
    let mut g_trans = [0.0; 3];
    let need_pos_grad = want.warp || want.affine || want.translation;

    let mut voxel = 0usize;
    for i in 0..out_dims[0] {
        for j in 0..out_dims[1] {
            for k in 0..out_dims[2] {
                let g = grad_out[voxel];
                let x = args.grid_point(out_dims, i, j, k);
                let disp = match u {
                    Some(u) => [u[3 * voxel], u[3 * voxel + 1], u[3 * voxel + 2]],
                    None => [0.0; 3],
                };
                let cell = Cell::locate(args.source_point(x, disp), src_dims);
                if g == 0.0 || cell.outside(src_dims) {
                    voxel += 1;
                    continue;
                }
                if let Some(gi) = g_image.as_mut() {
                    for corner in 0..8 {
                        let (dx, dy, dz) = (corner >> 2 & 1, corner >> 1 & 1, corner & 1);
                        if let Some(idx) = cell.corner(src_dims, dx, dy, dz) {
                            gi[idx] += cell.weight(dx, dy, dz) * g;
                        }
                    }
                }
                if need_pos_grad {
                    let (_, dv) = value_and_grad(src, src_dims, &cell);
                    let gp = [dv[0] * g, dv[1] * g, dv[2] * g];
                    if let Some(gu) = g_warp.as_mut() {
                        for a in 0..3 {
                            gu[3 * voxel + a] += args.scale[a] * gp[a];
                        }
                    }
                    if want.affine {
                        for r in 0..3 {
                            for c in 0..3 {
                                g_affine[r][c] += gp[r] * x[c];
                            }
                        }
                    }
                    if want.translation {
                        for r in 0..3 {
                            g_trans[r] += gp[r];
                        }
                    }
                }
                voxel += 1;
            }
        }
    }

    Ok(SamplerGrads {
        image: match g_image {
            Some(v) => Some(Volume3::from_vec(src_dims, v)?.with_geometry_of(image)),
            None => None,
        },
        warp: match g_warp {
            Some(v) => Some(WarpField::from_vec(out_dims, v)?),
            None => None,
        },
        affine: want.affine.then_some(g_affine),
        translation: want.translation.then_some(g_trans),
    })
}

/// Base cell of every output voxel's source position in the image lattice.
/// Two parameter settings with equal cells lie on the same polynomial piece
/// of the sampler, which is what finite-difference checks need to know.
pub fn source_cells(
    image_dims: Dims,
    warp: Option<&WarpField>,
    args: &SamplerArgs,
) -> Result<Vec<[isize; 3]>> {
    check_image(image_dims)?;
    let out_dims = warp.map_or(image_dims, |u| u.dims());
    args.validate(out_dims)?;
    let mut cells = Vec::with_capacity(out_dims.len());
    let mut voxel = 0;
    for i in 0..out_dims[0] {
        for j in 0..out_dims[1] {
            for k in 0..out_dims[2] {
                let x = args.grid_point(out_dims, i, j, k);
                let disp = warp.map_or([0.0; 3], |u| {
                    let d = u.data();
                    [d[3 * voxel], d[3 * voxel + 1], d[3 * voxel + 2]]
                });
                cells.push(Cell::locate(args.source_point(x, disp), image_dims).base);
                voxel += 1;
            }
        }
    }
    Ok(cells)
}
