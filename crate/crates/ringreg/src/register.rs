//! Multi-scale registration: an affine stage followed by greedy deformable
//! optimization of a displacement field, optionally sharded over a worker
//! group.

use std::time::{Duration, Instant};

use ringreg_core::alloc::{counting_installed, AllocProbe};
use ringreg_core::conv::Kernel1d;
use ringreg_core::lncc::{lncc_backward_naive, lncc_forward_naive, LnccParams};
use ringreg_core::mi::{MiLoss, MiParams};
use ringreg_core::sampler::SamplerArgs;
use ringreg_core::{
    adam_direction, adam_step, fused_sample, resample_scale, resample_warp, AdamState, AffineMap, Dims,
    Error, GradRequest, LabelVolume, Result, Volume3, WarpField,
};
use ringreg_dist::{
    dist_loss, gather, gp_gaussian_smooth, ring_sample, ring_sample_backward, shard, shard_ranges, Comm, Objective,
    ShardLayout, ShardLoss, WorkerGroup, SHARD_AXIS,
};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Lncc,
    Mi,
}

/// Implementation of the LNCC kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Fused,
    /// Node-by-node graph; single worker only.
    Naive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub lncc: LnccParams,
    pub mi: MiParams,
    pub ants_approx: bool,
    pub mi_approx_forward: bool,
}

impl LossConfig {
    pub fn lncc() -> Self {
        Self {
            kind: LossKind::Lncc,
            lncc: LnccParams::default(),
            mi: MiParams::default(),
            ants_approx: false,
            mi_approx_forward: false,
        }
    }

    pub fn mi() -> Self {
        Self {
            kind: LossKind::Mi,
            ..Self::lncc()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lncc.validate()?;
        if self.mi.bins < 2 {
            return Err(Error::InvalidArgument(format!("MI needs at least 2 bins, got {}", self.mi.bins)));
        }
        Ok(())
    }

    /// Objective for one pyramid level; MI intensity scales come from the
    /// whole level so every shard bins identically.
    fn objective(&self, f: &Volume3, m: &Volume3) -> Objective {
        match self.kind {
            LossKind::Mse => Objective::Mse,
            LossKind::Lncc => Objective::Lncc {
                params: self.lncc,
                ants_approx: self.ants_approx,
            },
            LossKind::Mi => {
                let mut cfg = MiLoss::new(self.mi, f, m);
                cfg.approx_forward = self.mi_approx_forward;
                Objective::Mi(cfg)
            }
        }
    }

    /// Widest stencil radius the loss applies along the shard axis.
    fn radius(&self) -> usize {
        match self.kind {
            LossKind::Lncc => self.lncc.window / 2,
            _ => 0,
        }
    }
}

/// LNCC variance floor of the registration defaults.
pub const DEFAULT_LNCC_EPS: f64 = 1e-12;

/// Adam floor for warp updates, in units of the voxel-summed loss gradient.
pub const WARP_ADAM_EPS: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scale {
    /// Integer downsampling factor of this level.
    pub factor: usize,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    pub scales: Vec<Scale>,
    /// Affine stage: Adam step size in normalized units. Deformable stage:
    /// Adam step size per displacement component, in half-voxels of the
    /// current level.
    pub lr: f64,
    /// Gradient smoothing width, voxels.
    pub sigma_grad: f64,
    /// Warp smoothing width, voxels.
    pub sigma_warp: f64,
    pub loss: LossConfig,
}

impl ScaleSchedule {
    /// Three-level deformable schedule with LNCC.
    pub fn deformable_default() -> Self {
        let mut loss = LossConfig::lncc();
        loss.lncc.eps = DEFAULT_LNCC_EPS;
        Self {
            scales: parse_scales("4:100,2:100,1:50").expect("default schedule parses"),
            lr: 0.5,
            sigma_grad: 1.0,
            sigma_warp: 0.5,
            loss,
        }
    }

    /// Two-level affine schedule with MI.
    pub fn affine_default() -> Self {
        Self {
            scales: parse_scales("4:50,2:50").expect("default schedule parses"),
            lr: 0.01,
            sigma_grad: 0.0,
            sigma_warp: 0.0,
            loss: LossConfig::mi(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidArgument(m));
        for (i, s) in self.scales.iter().enumerate() {
            if s.factor == 0 || s.iterations == 0 {
                return invalid(format!("scale {i}: factor and iterations must be positive, got {s:?}"));
            }
            if i > 0 && s.factor > self.scales[i - 1].factor {
                return invalid(format!("scale factors must not increase, got {:?}", self.scales));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return invalid(format!("learning rate must be positive, got {}", self.lr));
        }
        for (name, s) in [("sigma_grad", self.sigma_grad), ("sigma_warp", self.sigma_warp)] {
            if !(s.is_finite() && s >= 0.0) {
                return invalid(format!("{name} must be non-negative, got {s}"));
            }
        }
        self.loss.validate()
    }

    /// Copy of the schedule with levels finer than `factor` removed.
    pub fn truncated_at(&self, factor: usize) -> Self {
        Self {
            scales: self.scales.iter().copied().filter(|s| s.factor >= factor).collect(),
            ..self.clone()
        }
    }
}

/// Parses `factor:iterations` pairs separated by commas, e.g. `4:100,2:50`.
pub fn parse_scales(s: &str) -> Result<Vec<Scale>> {
    let bad = || Error::InvalidArgument(format!("scale schedule must look like 4:100,2:50, got {s:?}"));
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|part| {
            let (f, n) = part.trim().split_once(':').ok_or_else(bad)?;
            Ok(Scale {
                factor: f.trim().parse().map_err(|_| bad())?,
                iterations: n.trim().parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn format_scales(scales: &[Scale]) -> String {
    scales.iter().map(|s| format!("{}:{}", s.factor, s.iterations)).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeformOptions {
    /// Requested worker count.
    pub shards: usize,
    /// Exchange halos before every stencil; off only for ablation.
    pub gp_sync: bool,
    pub backend: Backend,
}

impl Default for DeformOptions {
    fn default() -> Self {
        Self {
            shards: 1,
            gp_sync: true,
            backend: Backend::Fused,
        }
    }
}

/// Loss per iteration at one pyramid level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleTrace {
    pub scale_index: usize,
    pub factor: usize,
    pub dims: [usize; 3],
    /// Workers used at this level.
    pub shards: usize,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub affine: AffineMap,
    /// Displacement field on the fixed image lattice, normalized units.
    pub warp: WarpField,
    pub affine_trace: Vec<ScaleTrace>,
    pub trace: Vec<ScaleTrace>,
    pub wall_time: Duration,
    /// Largest per-worker live allocation peak; `None` without the counting
    /// allocator.
    pub peak_alloc_bytes: Option<usize>,
}

/// A stage stopped early; the traces hold every iteration completed so far,
/// including the offending one.
#[derive(Debug)]
pub struct Aborted {
    pub error: Error,
    pub affine_trace: Vec<ScaleTrace>,
    pub trace: Vec<ScaleTrace>,
}

impl From<Error> for Aborted {
    fn from(error: Error) -> Self {
        Self {
            error,
            affine_trace: Vec::new(),
            trace: Vec::new(),
        }
    }
}

impl std::fmt::Display for Aborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for Aborted {}

fn level_volume(v: &Volume3, factor: usize) -> Result<Volume3> {
    if factor == 1 {
        Ok(v.clone())
    } else {
        resample_scale(v, 1.0 / factor as f64)
    }
}

/// Largest worker count up to `want` that gives every shard of both lattices
/// at least `need` planes.
pub fn usable_shards(want: usize, lattices: &[Dims], need: usize) -> usize {
    (1..=want.max(1))
        .rev()
        .find(|&h| {
            h == 1
                || lattices.iter().all(|d| {
                    shard_ranges(d[SHARD_AXIS], h).is_ok_and(|r| r.iter().all(|s| s.len() >= need.max(2)))
                })
        })
        .unwrap_or(1)
}

fn numerical(stage: &str, scale: usize, iteration: usize, loss: f64) -> Error {
    Error::Numerical(format!("{stage} stage: loss {loss} at scale {scale}, iteration {iteration}"))
}

fn local_loss(
    comm: &mut Comm,
    objective: &Objective,
    backend: Backend,
    f: &Volume3,
    moved: &Volume3,
    layout: &ShardLayout,
    sync: bool,
) -> Result<ShardLoss> {
    match (backend, objective) {
        (Backend::Naive, Objective::Lncc { params, .. }) if comm.world() == 1 => {
            let graph = lncc_forward_naive(f, moved, *params)?;
            let (_, grad) = lncc_backward_naive(1.0, &graph, f, moved)?;
            Ok(ShardLoss { loss: graph.loss, grad })
        }
        _ => dist_loss(comm, objective, f, moved, layout, sync),
    }
}

fn probe() -> Option<AllocProbe> {
    counting_installed().then(|| AllocProbe::start(usize::MAX))
}

/// Adam on `(A, t)` from the identity, one pass per pyramid level. The step
/// size decays linearly to zero over each level.
pub fn affine_stage(f: &Volume3, m: &Volume3, schedule: &ScaleSchedule) -> std::result::Result<(AffineMap, Vec<ScaleTrace>), Aborted> {
    schedule.validate()?;
    let mut affine = AffineMap::IDENTITY;
    let mut traces = Vec::new();
    for (index, s) in schedule.scales.iter().enumerate() {
        let fl = level_volume(f, s.factor)?;
        let ml = level_volume(m, s.factor)?;
        let objective = schedule.loss.objective(&fl, &ml);
        let zero = WarpField::zeros(fl.dims());
        let (parts, layout) = shard(&fl, 1)?;
        let spec = *layout.spec(0);
        let (_, m_layout) = shard(&ml, 1)?;
        let start = affine;
        let out = WorkerGroup::new(1)?.run_with(parts, |comm, f_local| {
            let mut a = start;
            let mut params = pack(&a);
            let mut adam = AdamState::new(12);
            let mut losses = Vec::with_capacity(s.iterations);
            for it in 0..s.iterations {
                let (moved, _) = ring_sample(comm, &ml, &m_layout, &zero, &spec, &a)?;
                let sl = dist_loss(comm, &objective, &f_local, &moved, &layout, true)?;
                losses.push(sl.loss);
                if !sl.loss.is_finite() {
                    return Ok((a, losses, Some(numerical("affine", index, it, sl.loss))));
                }
                let want = GradRequest {
                    affine: true,
                    translation: true,
                    ..GradRequest::default()
                };
                let g = ring_sample_backward(comm, sl.grad.data(), &ml, &m_layout, &zero, &spec, &a, want)?;
                let grad = pack(&AffineMap {
                    matrix: g.affine.unwrap_or_default(),
                    translation: g.translation.unwrap_or_default(),
                });
                let lr = schedule.lr * (1.0 - it as f64 / s.iterations as f64);
                adam_step(&mut params, &grad, &mut adam, lr)?;
                a = unpack(&params);
            }
            Ok((a, losses, None))
        })?;
        let (a, losses, abort) = out.into_iter().next().expect("one worker");
        affine = a;
        traces.push(ScaleTrace {
            scale_index: index,
            factor: s.factor,
            dims: fl.dims().0,
            shards: 1,
            losses,
        });
        if let Some(error) = abort {
            return Err(Aborted {
                error,
                affine_trace: traces,
                trace: Vec::new(),
            });
        }
    }
    Ok((affine, traces))
}

fn pack(a: &AffineMap) -> Vec<f64> {
    a.matrix.iter().flatten().chain(&a.translation).copied().collect()
}

fn unpack(p: &[f64]) -> AffineMap {
    AffineMap {
        matrix: std::array::from_fn(|r| std::array::from_fn(|c| p[3 * r + c])),
        translation: [p[9], p[10], p[11]],
    }
}

struct LevelOutput {
    u: WarpField,
    losses: Vec<f64>,
    abort: Option<Error>,
    peak: Option<usize>,
}

/// Greedy optimization of `u` with the affine map held fixed. Each iteration
/// samples, evaluates the loss, smooths the warp gradient, takes an Adam step
/// scaled to `lr` half-voxels per component and smooths the warp.
pub fn deformable_stage(
    f: &Volume3,
    m: &Volume3,
    affine: &AffineMap,
    schedule: &ScaleSchedule,
    opts: &DeformOptions,
) -> std::result::Result<(WarpField, Vec<ScaleTrace>, Option<usize>), Aborted> {
    schedule.validate()?;
    if opts.shards == 0 {
        return Err(Error::InvalidArgument("shard count must be at least 1".into()).into());
    }
    if opts.backend == Backend::Naive && (opts.shards > 1 || schedule.loss.kind != LossKind::Lncc) {
        return Err(Error::InvalidArgument("the naive backend runs LNCC on a single worker only".into()).into());
    }
    let radius = [schedule.sigma_grad, schedule.sigma_warp]
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| Kernel1d::gaussian(s).map(|k| k.radius()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .chain([schedule.loss.radius()])
        .max()
        .unwrap_or(0);
    let mut u: Option<WarpField> = None;
    let mut traces = Vec::new();
    let mut peak: Option<usize> = None;
    for (index, s) in schedule.scales.iter().enumerate() {
        let fl = level_volume(f, s.factor)?;
        let ml = level_volume(m, s.factor)?;
        let dims = fl.dims();
        let u0 = match u.take() {
            Some(prev) => resample_warp(&prev, dims),
            None => WarpField::zeros(dims),
        };
        let h = usable_shards(opts.shards, &[dims, ml.dims()], radius);
        let objective = schedule.loss.objective(&fl, &ml);
        let (f_parts, layout) = shard(&fl, h)?;
        let (m_parts, m_layout) = shard(&ml, h)?;
        let (u_parts, _) = shard(&u0, h)?;
        drop((fl, ml, u0));
        let inputs: Vec<_> = f_parts.into_iter().zip(m_parts).zip(u_parts).collect();
        let half_voxel: [f64; 3] = std::array::from_fn(|a| 1.0 / (dims[a] - 1) as f64);
        let mut outs = WorkerGroup::new(h)?.run_with(inputs, |comm, ((f_local, m_local), mut u_local)| {
            let probe = probe();
            let spec = *layout.spec(comm.rank());
            let mut adam = AdamState::with_hyper(u_local.data().len(), 0.9, 0.999, WARP_ADAM_EPS);
            let voxels = layout.global.len() as f64;
            let mut dir = vec![0.0; u_local.data().len()];
            let mut losses = Vec::with_capacity(s.iterations);
            let mut abort = None;
            for it in 0..s.iterations {
                let (moved, _) = ring_sample(comm, &m_local, &m_layout, &u_local, &spec, affine)?;
                let sl = local_loss(comm, &objective, opts.backend, &f_local, &moved, &layout, opts.gp_sync)?;
                drop(moved);
                losses.push(sl.loss);
                if !sl.loss.is_finite() {
                    abort = Some(numerical("deformable", index, it, sl.loss));
                    break;
                }
                let want = GradRequest {
                    warp: true,
                    ..GradRequest::default()
                };
                let grads =
                    ring_sample_backward(comm, sl.grad.data(), &m_local, &m_layout, &u_local, &spec, affine, want)?;
                drop(sl);
                let mut g = grads.warp.expect("warp gradient requested");
                gp_gaussian_smooth(comm, &mut g, &layout, schedule.sigma_grad, opts.gp_sync)?;
                g.scale(voxels);
                adam_direction(g.data(), &mut adam, &mut dir)?;
                drop(g);
                for (v, d) in u_local.data_mut().chunks_exact_mut(3).zip(dir.chunks_exact(3)) {
                    for a in 0..3 {
                        v[a] -= schedule.lr * half_voxel[a] * d[a];
                    }
                }
                gp_gaussian_smooth(comm, &mut u_local, &layout, schedule.sigma_warp, opts.gp_sync)?;
            }
            Ok(LevelOutput {
                u: u_local,
                losses,
                abort,
                peak: probe.map(|p| p.finish().peak_bytes),
            })
        })?;
        let losses = outs[0].losses.clone();
        let abort = outs.iter_mut().find_map(|o| o.abort.take());
        if let Some(p) = outs.iter().filter_map(|o| o.peak).max() {
            peak = Some(peak.map_or(p, |q: usize| q.max(p)));
        }
        let parts: Vec<WarpField> = outs.into_iter().map(|o| o.u).collect();
        let level_u = gather(&parts)?;
        traces.push(ScaleTrace {
            scale_index: index,
            factor: s.factor,
            dims: dims.0,
            shards: h,
            losses,
        });
        if let Some(error) = abort {
            return Err(Aborted {
                error,
                affine_trace: Vec::new(),
                trace: traces,
            });
        }
        if !level_u.is_finite() {
            return Err(Aborted {
                error: Error::Numerical(format!("warp became non-finite at scale {index}")),
                affine_trace: Vec::new(),
                trace: traces,
            });
        }
        u = Some(level_u);
    }
    let native = f.dims();
    let warp = match u {
        Some(u) if u.dims() == native => u,
        Some(u) => resample_warp(&u, native),
        None => WarpField::zeros(native),
    };
    Ok((warp, traces, peak))
}

/// Affine stage, then the deformable stage on top of its result.
pub fn register(
    f: &Volume3,
    m: &Volume3,
    affine_schedule: &ScaleSchedule,
    schedule: &ScaleSchedule,
    opts: &DeformOptions,
) -> std::result::Result<RegistrationResult, Aborted> {
    let t0 = Instant::now();
    let (affine, affine_trace) = affine_stage(f, m, affine_schedule)?;
    let (warp, trace, peak) = deformable_stage(f, m, &affine, schedule, opts).map_err(|mut e| {
        e.affine_trace = affine_trace.clone();
        e
    })?;
    Ok(RegistrationResult {
        affine,
        warp,
        affine_trace,
        trace,
        wall_time: t0.elapsed(),
        peak_alloc_bytes: peak,
    })
}

/// `M(A x + t + u(x))` on the warp's lattice.
pub fn apply_transform(m: &Volume3, affine: &AffineMap, u: &WarpField) -> Result<Volume3> {
    Ok(fused_sample(m, Some(u), &SamplerArgs::with_affine(*affine))?.with_geometry_of(m))
}

/// Nearest-neighbour transfer of a label map through `A x + t + u(x)`;
/// points outside the source lattice get background.
pub fn warp_labels(labels: &LabelVolume, affine: &AffineMap, u: &WarpField) -> Result<LabelVolume> {
    let src = labels.dims();
    let out = u.dims();
    let args = SamplerArgs::with_affine(*affine);
    let mut data = Vec::with_capacity(out.len());
    for i in 0..out[0] {
        for j in 0..out[1] {
            for k in 0..out[2] {
                let p = args.source_point(args.grid_point(out, i, j, k), u.get(i, j, k));
                let mut idx = [0usize; 3];
                let mut inside = true;
                for a in 0..3 {
                    let r = ((p[a] + 1.0) * (src[a] - 1) as f64 / 2.0).round();
                    inside &= r >= 0.0 && r <= (src[a] - 1) as f64;
                    idx[a] = r.max(0.0) as usize;
                }
                data.push(if inside { labels.get(idx[0], idx[1], idx[2]) } else { 0 });
            }
        }
    }
    let mut l = LabelVolume::from_vec(out, data)?.with_spacing(labels.spacing);
    l.origin = labels.origin;
    Ok(l)
}
