//! Command-line front end: `register`, `metrics`, `synth` and `info`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ringreg_core::io::{
    read_nifti, read_nifti_file, synth_pair_with, write_label_nifti, write_nifti, write_raw_warp, FloatWidth,
    SynthConfig,
};
use ringreg_core::{AffineMap, Error, LabelVolume, Result, Volume3, WarpField};
use serde::Serialize;

use crate::config::{Overrides, RunConfig};
use crate::metrics::{dice, folding_fraction, hd90_cumulative, inv_dice_with, InvWeight};
use crate::register::{apply_transform, register, warp_labels, Aborted, ScaleTrace};

#[derive(Parser, Debug)]
#[command(name = "ringreg", version, about = "Multi-scale deformable 3-D image registration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Register a moving image to a fixed image.
    Register {
        /// Key=value settings file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: Overrides,
    },
    /// Overlap and surface distance between two label maps, as JSON.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Voxel spacing as x,y,z; defaults to the header spacing of `a`.
        #[arg(long, value_delimiter = ',')]
        spacing: Option<Vec<f64>>,
        /// InvDice weighting: fixed or union.
        #[arg(long, default_value = "fixed")]
        weight: String,
    },
    /// Write a synthetic labelled pair with its ground-truth warp.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Lattice dims as x,y,z.
        #[arg(long, value_delimiter = ',', default_values_t = [48, 48, 48])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        labels: usize,
        /// Ground-truth warp smoothness in voxels; defaults to an eighth of
        /// the shortest axis.
        #[arg(long)]
        warp_sigma: Option<f64>,
        /// Output path prefix.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Print a NIfTI-1 header.
    Info { path: PathBuf },
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => 1,
        Error::Io(_) | Error::Format { .. } | Error::Unsupported(_) | Error::Json(_) => 2,
        Error::Numerical(_) | Error::Collective(_) => 3,
    }
}

/// Parses `args` and runs the command, returning the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Register { config, flags } => {
            let base = match &config {
                Some(p) => Overrides::from_file(p)?,
                None => Overrides::default(),
            };
            cmd_register(&RunConfig::resolve(&base.merge(&flags))?)
        }
        Command::Metrics { a, b, spacing, weight } => {
            let weight = match weight.as_str() {
                "fixed" => InvWeight::Fixed,
                "union" => InvWeight::Union,
                w => return Err(Error::InvalidArgument(format!("weight must be fixed or union, got {w:?}"))),
            };
            let la = load_labels(&a)?;
            let lb = load_labels(&b)?;
            let spacing = match spacing {
                Some(s) => triple(&s, "spacing")?,
                None => la.spacing,
            };
            let m = label_metrics(&la, &lb, spacing, weight)?;
            emit(&(serde_json::to_string_pretty(&m)? + "\n"));
            Ok(())
        }
        Command::Synth {
            seed,
            dims,
            labels,
            warp_sigma,
            output,
        } => {
            let mut cfg = SynthConfig::new(seed, triple(&dims, "dims")?, labels);
            if let Some(s) = warp_sigma {
                cfg.warp_sigma = s;
            }
            cmd_synth(&cfg, &output)
        }
        Command::Info { path } => {
            emit(&cmd_info(&path)?);
            Ok(())
        }
    }
}

fn triple<T: Copy>(v: &[T], name: &str) -> Result<[T; 3]> {
    match v {
        &[a, b, c] => Ok([a, b, c]),
        _ => Err(Error::InvalidArgument(format!("{name} needs three comma-separated values, got {}", v.len()))),
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(s: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(s.as_bytes());
}

fn load_volume(path: &Path) -> Result<Volume3> {
    Ok(read_nifti_file(path)?.0.into_volume())
}

fn load_labels(path: &Path) -> Result<LabelVolume> {
    read_nifti_file(path)?.0.into_labels()
}

/// `{prefix}{suffix}`, creating the parent directory.
pub fn output_path(prefix: &Path, suffix: &str) -> Result<PathBuf> {
    let mut name = prefix.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    let path = prefix.with_file_name(name);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelMetrics {
    pub dice: f64,
    pub inv_dice: f64,
    /// `None` when the maps share no foreground label.
    pub hd90: Option<f64>,
    pub per_label_dice: BTreeMap<u16, f64>,
}

pub fn label_metrics(a: &LabelVolume, b: &LabelVolume, spacing: [f64; 3], weight: InvWeight) -> Result<LabelMetrics> {
    let d = dice(a, b)?;
    let present = |l: &LabelVolume| l.data().iter().filter(|&&x| x > 0).copied().collect::<BTreeSet<u16>>();
    let shared = !present(a).is_disjoint(&present(b));
    Ok(LabelMetrics {
        dice: d.mean,
        inv_dice: inv_dice_with(a, b, weight)?,
        hd90: if shared { Some(hd90_cumulative(a, b, spacing)?) } else { None },
        per_label_dice: d.per_label,
    })
}

#[derive(Serialize)]
struct ScaleSummary {
    scale_index: usize,
    factor: usize,
    dims: [usize; 3],
    shards: usize,
    iterations: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
}

fn scale_summaries(trace: &[ScaleTrace]) -> Vec<ScaleSummary> {
    trace
        .iter()
        .map(|t| ScaleSummary {
            scale_index: t.scale_index,
            factor: t.factor,
            dims: t.dims,
            shards: t.shards,
            iterations: t.losses.len(),
            initial_loss: t.losses.first().copied(),
            final_loss: t.losses.last().copied(),
        })
        .collect()
}

#[derive(Serialize)]
struct LabelSummary {
    baseline_dice: f64,
    #[serde(flatten)]
    registered: LabelMetrics,
}

#[derive(Serialize)]
struct Timings {
    wall_seconds: f64,
    peak_alloc_bytes: Option<usize>,
}

#[derive(Serialize)]
struct Summary {
    config: RunConfig,
    affine: AffineMap,
    affine_scales: Vec<ScaleSummary>,
    scales: Vec<ScaleSummary>,
    folding_fraction: f64,
    labels: Option<LabelSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    timings: Option<Timings>,
}

fn write_trace(path: &Path, trace: &[ScaleTrace]) -> Result<()> {
    let mut s = String::from("scale_index,iteration,loss\n");
    for t in trace {
        for (i, l) in t.losses.iter().enumerate() {
            let _ = writeln!(s, "{},{i},{l}", t.scale_index);
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn write_traces(prefix: &Path, affine: &[ScaleTrace], deformable: &[ScaleTrace]) -> Result<()> {
    write_trace(&output_path(prefix, "_affine_trace.csv")?, affine)?;
    write_trace(&output_path(prefix, "_trace.csv")?, deformable)
}

/// Runs a registration and writes `{output}_warp.raw` (+ `.json`),
/// `{output}_moved.nii`, the trace CSVs and `{output}_summary.json`. With
/// label maps, also `{output}_moved_labels.nii`. On a numerical abort the
/// traces are still written.
pub fn cmd_register(cfg: &RunConfig) -> Result<()> {
    let f = load_volume(&cfg.fixed)?;
    let m = load_volume(&cfg.moving)?;
    let labels = match (&cfg.fixed_labels, &cfg.moving_labels) {
        (Some(a), Some(b)) => Some((load_labels(a)?, load_labels(b)?)),
        _ => None,
    };
    let out = &cfg.output;
    let result = match register(&f, &m, &cfg.affine_schedule()?, &cfg.deformable_schedule()?, &cfg.deform_options()) {
        Ok(r) => r,
        Err(Aborted {
            error,
            affine_trace,
            trace,
        }) => {
            write_traces(out, &affine_trace, &trace)?;
            return Err(error);
        }
    };
    write_traces(out, &result.affine_trace, &result.trace)?;
    write_raw_warp(&result.warp, f.spacing, f.origin, &output_path(out, "_warp.raw")?)?;
    let moved = apply_transform(&m, &result.affine, &result.warp)?.with_geometry_of(&f);
    write_nifti(&moved, &output_path(out, "_moved.nii")?, cfg.width())?;

    let labels = match labels {
        Some((lf, lm)) => {
            let warped = warp_labels(&lm, &result.affine, &result.warp)?;
            let mut warped_geom = warped.clone();
            warped_geom.spacing = lf.spacing;
            warped_geom.origin = lf.origin;
            write_label_nifti(&warped_geom, &output_path(out, "_moved_labels.nii")?)?;
            let unmoved = warp_labels(&lm, &AffineMap::IDENTITY, &WarpField::zeros(lf.dims()))?;
            Some(LabelSummary {
                baseline_dice: dice(&lf, &unmoved)?.mean,
                registered: label_metrics(&lf, &warped, lf.spacing, InvWeight::Fixed)?,
            })
        }
        None => None,
    };
    let summary = Summary {
        config: cfg.clone(),
        affine: result.affine,
        affine_scales: scale_summaries(&result.affine_trace),
        scales: scale_summaries(&result.trace),
        folding_fraction: folding_fraction(&result.warp),
        labels,
        timings: cfg.timings.then_some(Timings {
            wall_seconds: result.wall_time.as_secs_f64(),
            peak_alloc_bytes: result.peak_alloc_bytes,
        }),
    };
    std::fs::write(output_path(out, "_summary.json")?, serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

/// Writes `{prefix}_fixed.nii`, `{prefix}_moving.nii`, the two label maps and
/// `{prefix}_u_true.raw` (+ `.json`).
pub fn cmd_synth(cfg: &SynthConfig, prefix: &Path) -> Result<()> {
    let p = synth_pair_with(cfg)?;
    write_nifti(&p.fixed, &output_path(prefix, "_fixed.nii")?, FloatWidth::F64)?;
    write_nifti(&p.moving, &output_path(prefix, "_moving.nii")?, FloatWidth::F64)?;
    write_label_nifti(&p.labels_fixed, &output_path(prefix, "_fixed_labels.nii")?)?;
    write_label_nifti(&p.labels_moving, &output_path(prefix, "_moving_labels.nii")?)?;
    write_raw_warp(&p.u_true, p.fixed.spacing, p.fixed.origin, &output_path(prefix, "_u_true.raw")?)
}

/// Header dump of a NIfTI-1 file; the payload is checked as well.
pub fn cmd_info(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let (_, h) = read_nifti(&bytes)?;
    let mut s = String::new();
    let _ = writeln!(s, "path: {}", path.display());
    let _ = writeln!(s, "magic: {}", String::from_utf8_lossy(&h.magic).trim_end_matches('\0'));
    let _ = writeln!(s, "endian: {:?}", h.endian);
    let _ = writeln!(s, "dims: {:?}", h.dims);
    let _ = writeln!(s, "datatype: {} ({})", h.datatype_name(), h.datatype);
    let _ = writeln!(s, "bitpix: {}", h.bitpix);
    let _ = writeln!(s, "spacing: {:?}", h.spacing);
    let _ = writeln!(s, "origin: {:?}", h.origin);
    let _ = writeln!(s, "scl_slope: {}", h.scl_slope);
    let _ = writeln!(s, "scl_inter: {}", h.scl_inter);
    let _ = writeln!(s, "vox_offset: {}", h.vox_offset);
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::InvalidArgument("x".into())), 1);
        assert_eq!(exit_code(&Error::Format { offset: 3, message: "x".into() }), 2);
        assert_eq!(exit_code(&Error::Unsupported("x".into())), 2);
        assert_eq!(exit_code(&Error::Numerical("x".into())), 3);
        assert_eq!(exit_code(&Error::Collective("x".into())), 3);
    }

    #[test]
    fn output_path_appends_suffix() {
        let d = tempfile::tempdir().unwrap();
        let p = output_path(&d.path().join("sub/run"), "_warp.raw").unwrap();
        assert_eq!(p, d.path().join("sub/run_warp.raw"));
        assert!(d.path().join("sub").is_dir());
    }

    #[test]
    fn parse_errors_and_help() {
        assert_eq!(run(["ringreg", "--help"]), 0);
        assert_eq!(run(["ringreg", "frobnicate"]), 1);
        assert_eq!(run(["ringreg", "register", "--gp-sync", "maybe"]), 1);
        assert_eq!(run(["ringreg", "register"]), 1);
    }

    #[test]
    fn trace_csv_layout() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("t.csv");
        let t = ScaleTrace {
            scale_index: 1,
            factor: 2,
            dims: [4, 4, 4],
            shards: 1,
            losses: vec![0.5, 0.25],
        };
        write_trace(&p, &[t]).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "scale_index,iteration,loss\n1,0,0.5\n1,1,0.25\n");
    }
}
