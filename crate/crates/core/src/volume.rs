//! Dense 3-D containers.
//!
//! All lattices are stored row-major with the last axis fastest. A voxel at
//! `(i, j, k)` lives at `(i * n1 + j) * n2 + k`, and multi-channel fields
//! interleave their channels per voxel. Coordinate component `c` of any
//! normalized-space vector refers to axis `c`.

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Scalar storage type for volumes.
pub trait Real: Copy + Default + Debug + PartialOrd + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// Voxel counts per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(n0: usize, n1: usize, n2: usize) -> Result<Self> {
        ensure!(
            n0 > 0 && n1 > 0 && n2 > 0,
            "dims must be positive on every axis, got {n0}x{n1}x{n2}"
        );
        Ok(Dims([n0, n1, n2]))
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    #[inline(always)]
    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    #[inline(always)]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline(always)]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.0[1] + j) * self.0[2] + k
    }

    /// Element stride of `axis` in a single-channel buffer.
    #[inline(always)]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => self.0[1] * self.0[2],
            1 => self.0[2],
            _ => 1,
        }
    }

    pub fn with_axis(&self, axis: usize, n: usize) -> Dims {
        let mut d = self.0;
        d[axis] = n;
        Dims(d)
    }
}

impl std::ops::Index<usize> for Dims {
    type Output = usize;
    fn index(&self, axis: usize) -> &usize {
        &self.0[axis]
    }
}

/// Normalized coordinates of the first and last voxel centres of a lattice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl DomainBounds {
    /// The full domain, `[-1, 1]` on every axis.
    pub const CANONICAL: DomainBounds = DomainBounds {
        min: [-1.0; 3],
        max: [1.0; 3],
    };

    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            ensure!(
                min[a].is_finite() && max[a].is_finite() && min[a] <= max[a],
                "bounds must satisfy min <= max on axis {a}: {} vs {}",
                min[a],
                max[a]
            );
        }
        Ok(Self { min, max })
    }

    /// Checks the bounds against a lattice: a degenerate axis must have one voxel.
    pub fn validate_for(&self, dims: Dims) -> Result<()> {
        for a in 0..3 {
            if dims[a] > 1 {
                ensure!(
                    self.min[a] < self.max[a],
                    "bounds collapse on axis {a} but lattice has {} voxels",
                    dims[a]
                );
            }
        }
        Ok(())
    }

    /// Normalized coordinate of voxel `i` along `axis` of an `n`-voxel lattice.
    #[inline(always)]
    pub fn coord(&self, axis: usize, i: usize, n: usize) -> f64 {
        if n <= 1 {
            self.min[axis]
        } else {
            self.min[axis] + (self.max[axis] - self.min[axis]) * (i as f64) / ((n - 1) as f64)
        }
    }
}

impl Default for DomainBounds {
    fn default() -> Self {
        Self::CANONICAL
    }
}

/// A scalar volume with physical metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3<T = f64> {
    dims: Dims,
    /// Millimetres per voxel.
    pub spacing: [f64; 3],
    /// Physical position of voxel (0, 0, 0) in millimetres.
    pub origin: [f64; 3],
    data: Vec<T>,
}

impl<T: Real> Volume3<T> {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data: vec![T::default(); dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        ensure!(
            data.len() == dims.len(),
            "data length {} does not match dims {:?}",
            data.len(),
            dims.0
        );
        Ok(Self {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data,
        })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data,
        }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        ensure!(
            spacing.iter().all(|s| s.is_finite() && *s > 0.0),
            "spacing must be positive, got {spacing:?}"
        );
        self.spacing = spacing;
        Ok(self)
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    /// Copies spacing and origin from `other`.
    pub fn with_geometry_of<U: Real>(mut self, other: &Volume3<U>) -> Self {
        self.spacing = other.spacing;
        self.origin = other.origin;
        self
    }

    #[inline(always)]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline(always)]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline(always)]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline(always)]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline(always)]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline(always)]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.dims.index(i, j, k)]
    }

    #[inline(always)]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: T) {
        let idx = self.dims.index(i, j, k);
        self.data[idx] = v;
    }

    pub fn map<U: Real>(&self, mut f: impl FnMut(T) -> U) -> Volume3<U> {
        Volume3 {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn to_f64(&self) -> Volume3<f64> {
        self.map(|v| v.to_f64())
    }

    pub fn to_f32(&self) -> Volume3<f32> {
        self.map(|v| v.to_f64() as f32)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.to_f64();
            (lo.min(v), hi.max(v))
        })
    }
}

impl Volume3<f64> {
    pub fn max_abs_diff(&self, other: &Volume3<f64>) -> f64 {
        assert_eq!(self.dims, other.dims, "lattice mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-voxel displacement in normalized coordinates (three interleaved components).
#[derive(Clone, Debug, PartialEq)]
pub struct WarpField {
    dims: Dims,
    data: Vec<f64>,
}

impl WarpField {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![0.0; 3 * dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == 3 * dims.len(),
            "warp needs 3 components per voxel: {} values for dims {:?}",
            data.len(),
            dims.0
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            "warp contains non-finite values"
        );
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * dims.len());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.extend_from_slice(&f(i, j, k));
                }
            }
        }
        Self { dims, data }
    }

    #[inline(always)]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline(always)]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline(always)]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline(always)]
    pub fn get(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let b = 3 * self.dims.index(i, j, k);
        [self.data[b], self.data[b + 1], self.data[b + 2]]
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest Euclidean displacement length.
    pub fn max_norm(&self) -> f64 {
        self.data
            .chunks_exact(3)
            .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &WarpField) -> f64 {
        assert_eq!(self.dims, other.dims, "lattice mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Affine part `x -> A x + t` of the composite transform, in normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub matrix: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap {
        matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
    };

    pub fn identity() -> Self {
        Self::IDENTITY
    }

    pub fn new(matrix: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        ensure!(
            matrix.iter().flatten().all(|v| v.is_finite())
                && translation.iter().all(|v| v.is_finite()),
            "affine map must be finite"
        );
        Ok(Self {
            matrix,
            translation,
        })
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            ..Self::IDENTITY
        }
    }

    #[inline(always)]
    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[0][0] * x[0] + m[0][1] * x[1] + m[0][2] * x[2] + self.translation[0],
            m[1][0] * x[0] + m[1][1] * x[1] + m[1][2] * x[2] + self.translation[1],
            m[2][0] * x[0] + m[2][1] * x[1] + m[2][2] * x[2] + self.translation[2],
        ]
    }

    /// Frobenius distance of the matrix from identity.
    pub fn matrix_distance_from_identity(&self) -> f64 {
        let mut s = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                let d = self.matrix[r][c] - if r == c { 1.0 } else { 0.0 };
                s += d * d;
            }
        }
        s.sqrt()
    }
}

impl Default for AffineMap {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Integer label map, 0 = background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    data: Vec<u16>,
}

impl LabelVolume {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data: vec![0; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<u16>) -> Result<Self> {
        ensure!(
            data.len() == dims.len(),
            "label data length {} does not match dims {:?}",
            data.len(),
            dims.0
        );
        Ok(Self {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data,
        })
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    #[inline(always)]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline(always)]
    pub fn data(&self) -> &[u16] {
        &self.data
    }

    #[inline(always)]
    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    #[inline(always)]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u16 {
        self.data[self.dims.index(i, j, k)]
    }

    pub fn max_label(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn to_volume(&self) -> Volume3<f64> {
        Volume3 {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            data: self.data.iter().map(|&l| l as f64).collect(),
        }
    }
}

/// Common view over single- and multi-channel lattices so that sharding,
/// halo exchange and convolution can treat volumes and warps alike.
pub trait Lattice: Clone + Send + 'static {
    fn dims(&self) -> Dims;
    fn channels(&self) -> usize;
    fn values(&self) -> &[f64];
    fn values_mut(&mut self) -> &mut [f64];
    /// New lattice of the same kind (and metadata) holding `data`.
    fn rebuild(&self, dims: Dims, data: Vec<f64>) -> Self;
}

impl Lattice for Volume3<f64> {
    fn dims(&self) -> Dims {
        self.dims
    }
    fn channels(&self) -> usize {
        1
    }
    fn values(&self) -> &[f64] {
        &self.data
    }
    fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    fn rebuild(&self, dims: Dims, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        Volume3 {
            dims,
            spacing: self.spacing,
            origin: self.origin,
            data,
        }
    }
}

impl Lattice for WarpField {
    fn dims(&self) -> Dims {
        self.dims
    }
    fn channels(&self) -> usize {
        3
    }
    fn values(&self) -> &[f64] {
        &self.data
    }
    fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    fn rebuild(&self, dims: Dims, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), 3 * dims.len());
        WarpField { dims, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_reject_zero_axis() {
        assert!(Dims::new(4, 0, 4).is_err());
        assert_eq!(Dims::new(2, 3, 4).unwrap().len(), 24);
    }

    #[test]
    fn volume_length_must_match() {
        let d = Dims::cube(2).unwrap();
        assert!(Volume3::from_vec(d, vec![0.0; 7]).is_err());
        assert!(Volume3::<f64>::zeros(d).with_spacing([1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn warp_rejects_nan() {
        let d = Dims::cube(1).unwrap();
        assert!(WarpField::from_vec(d, vec![0.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn canonical_bounds_hit_endpoints() {
        let b = DomainBounds::CANONICAL;
        assert_eq!(b.coord(0, 0, 5), -1.0);
        assert_eq!(b.coord(0, 4, 5), 1.0);
        assert_eq!(b.coord(0, 2, 5), 0.0);
    }

    #[test]
    fn identity_affine() {
        let a = AffineMap::identity();
        assert_eq!(a.apply([0.3, -0.2, 0.9]), [0.3, -0.2, 0.9]);
        assert_eq!(a.matrix_distance_from_identity(), 0.0);
    }
}
