//! Run configuration: built-in defaults, then an optional key=value file,
//! then command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use ringreg_core::io::FloatWidth;
use ringreg_core::lncc::LnccParams;
use ringreg_core::mi::{MiParams, ParzenKernel};
use ringreg_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::register::{format_scales, parse_scales, Backend, DeformOptions, LossConfig, LossKind, ScaleSchedule};

fn parse_toggle(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected on/off, got {s:?}")),
    }
}

/// Every setting of a registration run, each optional so that layers can be
/// merged. Used both as command-line flags and as the config file schema.
#[derive(Args, Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// Fixed image (NIfTI-1).
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    /// Moving image (NIfTI-1).
    #[arg(long)]
    pub moving: Option<PathBuf>,
    /// Output path prefix.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Fixed label map used for the summary metrics.
    #[arg(long)]
    pub fixed_labels: Option<PathBuf>,
    /// Moving label map, warped with the result.
    #[arg(long)]
    pub moving_labels: Option<PathBuf>,
    /// Deformable loss: mse, lncc or mi.
    #[arg(long)]
    pub loss: Option<String>,
    /// LNCC window width in voxels (odd).
    #[arg(long)]
    pub window: Option<usize>,
    /// LNCC variance floor.
    #[arg(long)]
    pub eps: Option<f64>,
    /// MI histogram bins.
    #[arg(long)]
    pub bins: Option<usize>,
    /// MI Parzen kernel: gaussian, bspline or nearest.
    #[arg(long)]
    pub parzen: Option<String>,
    /// Deformable schedule as factor:iterations pairs, e.g. 4:100,2:100,1:50.
    #[arg(long)]
    pub scales: Option<String>,
    /// Warp Adam step size, in half-voxels of the current level.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Gradient smoothing sigma, voxels.
    #[arg(long)]
    pub sigma_grad: Option<f64>,
    /// Warp smoothing sigma, voxels.
    #[arg(long)]
    pub sigma_warp: Option<f64>,
    /// Affine schedule; empty string skips the affine stage.
    #[arg(long)]
    pub affine_scales: Option<String>,
    /// Affine Adam step size, normalized units.
    #[arg(long)]
    pub affine_lr: Option<f64>,
    /// Affine loss: mse, lncc or mi.
    #[arg(long)]
    pub affine_loss: Option<String>,
    /// Worker count for the deformable stage.
    #[arg(long)]
    pub shards: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Moved image precision: f32 or f64.
    #[arg(long)]
    pub float_width: Option<String>,
    /// Use the ANTs-style LNCC gradient approximation.
    #[arg(long, value_parser = parse_toggle)]
    pub ants_approx: Option<bool>,
    /// Use the binned MI forward pass.
    #[arg(long, value_parser = parse_toggle)]
    pub mi_approx_forward: Option<bool>,
    /// Halo exchange before stencils on sharded runs.
    #[arg(long, value_parser = parse_toggle)]
    pub gp_sync: Option<bool>,
    /// LNCC implementation: fused or naive.
    #[arg(long)]
    pub backend: Option<String>,
    /// Add wall time and allocation peaks to the summary.
    #[arg(long, value_parser = parse_toggle, num_args = 0..=1, default_missing_value = "on")]
    pub timings: Option<bool>,
}

macro_rules! layer {
    ($self:ident, $top:ident, $($f:ident),*) => {
        $( if $top.$f.is_some() { $self.$f = $top.$f.clone(); } )*
    };
}

impl Overrides {
    /// Reads a key=value file; unknown keys are rejected.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {}", e.message())))
    }

    /// Values set in `top` replace those in `self`.
    pub fn merge(mut self, top: &Overrides) -> Self {
        layer!(
            self, top, fixed, moving, output, fixed_labels, moving_labels, loss, window, eps, bins, parzen, scales,
            lr, sigma_grad, sigma_warp, affine_scales, affine_lr, affine_loss, shards, seed, float_width, ants_approx,
            mi_approx_forward, gp_sync, backend, timings
        );
        self
    }
}

/// Fully resolved and validated settings, as embedded in the run summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub fixed: PathBuf,
    pub moving: PathBuf,
    pub output: PathBuf,
    pub fixed_labels: Option<PathBuf>,
    pub moving_labels: Option<PathBuf>,
    pub loss: LossKind,
    pub window: usize,
    pub eps: f64,
    pub bins: usize,
    pub parzen: String,
    pub scales: String,
    pub lr: f64,
    pub sigma_grad: f64,
    pub sigma_warp: f64,
    pub affine_scales: String,
    pub affine_lr: f64,
    pub affine_loss: LossKind,
    pub shards: usize,
    pub seed: u64,
    pub float_width: String,
    pub ants_approx: bool,
    pub mi_approx_forward: bool,
    pub gp_sync: bool,
    pub backend: Backend,
    pub timings: bool,
}

fn loss_kind(s: &str) -> Result<LossKind> {
    match s {
        "mse" => Ok(LossKind::Mse),
        "lncc" => Ok(LossKind::Lncc),
        "mi" => Ok(LossKind::Mi),
        _ => Err(Error::InvalidArgument(format!("loss must be mse, lncc or mi, got {s:?}"))),
    }
}

fn parzen_kernel(s: &str) -> Result<ParzenKernel> {
    match s {
        "gaussian" => Ok(ParzenKernel::default_gaussian()),
        "bspline" => ParzenKernel::bspline3(),
        "nearest" => Ok(ParzenKernel::Nearest),
        _ => Err(Error::InvalidArgument(format!("parzen kernel must be gaussian, bspline or nearest, got {s:?}"))),
    }
}

impl RunConfig {
    pub fn resolve(o: &Overrides) -> Result<Self> {
        let required = |p: &Option<PathBuf>, name: &str| {
            p.clone().ok_or_else(|| Error::InvalidArgument(format!("missing required setting `{name}`")))
        };
        let d = ScaleSchedule::deformable_default();
        let a = ScaleSchedule::affine_default();
        let backend = match o.backend.as_deref().unwrap_or("fused") {
            "fused" => Backend::Fused,
            "naive" => Backend::Naive,
            s => return Err(Error::InvalidArgument(format!("backend must be fused or naive, got {s:?}"))),
        };
        let float_width = o.float_width.clone().unwrap_or_else(|| "f64".into());
        if float_width != "f32" && float_width != "f64" {
            return Err(Error::InvalidArgument(format!("float width must be f32 or f64, got {float_width:?}")));
        }
        let cfg = Self {
            fixed: required(&o.fixed, "fixed")?,
            moving: required(&o.moving, "moving")?,
            output: required(&o.output, "output")?,
            fixed_labels: o.fixed_labels.clone(),
            moving_labels: o.moving_labels.clone(),
            loss: loss_kind(o.loss.as_deref().unwrap_or("lncc"))?,
            window: o.window.unwrap_or(d.loss.lncc.window),
            eps: o.eps.unwrap_or(d.loss.lncc.eps),
            bins: o.bins.unwrap_or(d.loss.mi.bins),
            parzen: o.parzen.clone().unwrap_or_else(|| "gaussian".into()),
            scales: o.scales.clone().unwrap_or_else(|| format_scales(&d.scales)),
            lr: o.lr.unwrap_or(d.lr),
            sigma_grad: o.sigma_grad.unwrap_or(d.sigma_grad),
            sigma_warp: o.sigma_warp.unwrap_or(d.sigma_warp),
            affine_scales: o.affine_scales.clone().unwrap_or_else(|| format_scales(&a.scales)),
            affine_lr: o.affine_lr.unwrap_or(a.lr),
            affine_loss: loss_kind(o.affine_loss.as_deref().unwrap_or("mi"))?,
            shards: o.shards.unwrap_or(1),
            seed: o.seed.unwrap_or(0),
            float_width,
            ants_approx: o.ants_approx.unwrap_or(false),
            mi_approx_forward: o.mi_approx_forward.unwrap_or(false),
            gp_sync: o.gp_sync.unwrap_or(true),
            backend,
            timings: o.timings.unwrap_or(false),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shards == 0 {
            return Err(Error::InvalidArgument("shards must be at least 1".into()));
        }
        if self.fixed_labels.is_some() != self.moving_labels.is_some() {
            return Err(Error::InvalidArgument("fixed_labels and moving_labels must be given together".into()));
        }
        if self.scales.trim().is_empty() {
            return Err(Error::InvalidArgument("the deformable schedule needs at least one scale".into()));
        }
        self.affine_schedule()?.validate()?;
        self.deformable_schedule()?.validate()?;
        if self.backend == Backend::Naive && (self.shards > 1 || self.loss != LossKind::Lncc) {
            return Err(Error::InvalidArgument("the naive backend supports LNCC with one shard only".into()));
        }
        Ok(())
    }

    fn loss_config(&self, kind: LossKind) -> Result<LossConfig> {
        Ok(LossConfig {
            kind,
            lncc: LnccParams {
                window: self.window,
                eps: self.eps,
            },
            mi: MiParams {
                bins: self.bins,
                kernel: parzen_kernel(&self.parzen)?,
            },
            ants_approx: self.ants_approx,
            mi_approx_forward: self.mi_approx_forward,
        })
    }

    pub fn deformable_schedule(&self) -> Result<ScaleSchedule> {
        Ok(ScaleSchedule {
            scales: parse_scales(&self.scales)?,
            lr: self.lr,
            sigma_grad: self.sigma_grad,
            sigma_warp: self.sigma_warp,
            loss: self.loss_config(self.loss)?,
        })
    }

    pub fn affine_schedule(&self) -> Result<ScaleSchedule> {
        Ok(ScaleSchedule {
            scales: parse_scales(&self.affine_scales)?,
            lr: self.affine_lr,
            sigma_grad: 0.0,
            sigma_warp: 0.0,
            loss: self.loss_config(self.affine_loss)?,
        })
    }

    pub fn deform_options(&self) -> DeformOptions {
        DeformOptions {
            shards: self.shards,
            gp_sync: self.gp_sync,
            backend: self.backend,
        }
    }

    pub fn width(&self) -> FloatWidth {
        if self.float_width == "f32" {
            FloatWidth::F32
        } else {
            FloatWidth::F64
        }
    }
}
