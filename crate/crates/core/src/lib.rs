//! Single-host kernels for deformable 3-D registration.
//!
//! Coordinates live in a normalized frame where the first and last voxel
//! centres of every axis sit at `-1` and `+1`. Volumes are row-major with the
//! last axis fastest.

pub mod adam;
pub mod alloc;
pub mod conv;
pub mod error;
pub mod io;
pub mod lncc;
pub mod mi;
pub mod mse;
pub mod resample;
pub mod sampler;
pub mod smooth;
pub mod volume;

#[cfg(test)]
mod testutil;

pub use adam::{adam_direction, adam_step, AdamState};
pub use conv::{EdgeMode, Kernel1d};
pub use error::{Error, Result};
pub use resample::{resample_scale, resample_to, resample_warp, scaled_dims};
pub use sampler::{
    compose, fused_sample, fused_sample_accumulate, fused_sample_backward, scaling_and_squaring, GradRequest, SamplerArgs,
    SamplerGrads,
};
pub use smooth::{gaussian_smooth, gaussian_smooth_in_place, Smoothable};
pub use volume::{AffineMap, Dims, DomainBounds, LabelVolume, Lattice, Real, Volume3, WarpField};

#[cfg(test)]
#[global_allocator]
static ALLOC: alloc::CountingAlloc = alloc::CountingAlloc;
