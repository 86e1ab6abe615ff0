use super::Cell;
use crate::error::{ensure, Result};
use crate::volume::{DomainBounds, WarpField};

/// `result(x) = u_inner(x) + u_outer(x + u_inner(x))`, with `u_outer`
/// interpolated trilinearly and zero outside the domain.
pub fn compose(u_outer: &WarpField, u_inner: &WarpField) -> Result<WarpField> {
    let dims = u_outer.dims();
    ensure!(
        dims == u_inner.dims(),
        "compose needs matching lattices, got {:?} and {:?}",
        dims.0,
        u_inner.dims().0
    );
    ensure!(
        (0..3).all(|a| dims[a] >= 2),
        "compose needs at least 2 voxels per axis, got {:?}",
        dims.0
    );
    let outer = u_outer.data();
    let inner = u_inner.data();
    let b = DomainBounds::CANONICAL;
    let mut out = Vec::with_capacity(inner.len());
    let mut voxel = 0;
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let d = &inner[3 * voxel..3 * voxel + 3];
                let pos = [
                    b.coord(0, i, dims[0]) + d[0],
                    b.coord(1, j, dims[1]) + d[1],
                    b.coord(2, k, dims[2]) + d[2],
                ];
                let cell = Cell::locate(pos, dims);
                let mut acc = [0.0; 3];
                if !cell.outside(dims) {
                    for corner in 0..8 {
                        let (dx, dy, dz) = (corner >> 2 & 1, corner >> 1 & 1, corner & 1);
                        if let Some(idx) = cell.corner(dims, dx, dy, dz) {
                            let w = cell.weight(dx, dy, dz);
                            for c in 0..3 {
                                acc[c] += w * outer[3 * idx + c];
                            }
                        }
                    }
                }
                out.extend_from_slice(&[d[0] + acc[0], d[1] + acc[1], d[2] + acc[2]]);
                voxel += 1;
            }
        }
    }
    WarpField::from_vec(dims, out)
}

/// Integrates a stationary velocity field: `u = v / 2^steps`, then
/// `u <- compose(u, u)` repeated `steps` times.
pub fn scaling_and_squaring(v: &WarpField, steps: u32) -> Result<WarpField> {
    ensure!(steps >= 1, "scaling and squaring needs at least one step");
    ensure!(steps <= 60, "too many squaring steps: {steps}");
    let mut u = v.clone();
    u.scale(1.0 / (1u64 << steps) as f64);
    for _ in 0..steps {
        u = compose(&u, &u)?;
    }
    Ok(u)
}
