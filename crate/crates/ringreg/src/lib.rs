//! Registration driver, evaluation metrics and command-line plumbing built on
//! the single-host kernels and the sharded operations.

pub mod cli;
pub mod config;
pub mod metrics;
pub mod register;

pub use metrics::{dice, folding_fraction, hd90_cumulative, inv_dice, inv_dice_with, DiceReport, InvWeight};
pub use register::{
    affine_stage, apply_transform, deformable_stage, parse_scales, register, warp_labels, Aborted, Backend,
    DeformOptions, LossConfig, LossKind, RegistrationResult, Scale, ScaleSchedule, ScaleTrace,
};
