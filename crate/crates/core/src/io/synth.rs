//! Synthetic labelled image pairs with a known deformation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::sampler::{fused_sample, SamplerArgs};
use crate::smooth::gaussian_smooth_in_place;
use crate::volume::{Dims, DomainBounds, LabelVolume, Volume3, WarpField};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub dims: [usize; 3],
    pub labels: usize,
    /// Largest displacement norm of the ground-truth warp, normalized units.
    pub warp_max: f64,
    /// Smoothness of the ground-truth warp, in voxels.
    pub warp_sigma: f64,
    /// Ellipsoid semi-axes are drawn from this range, as fractions of the
    /// normalized half-extent.
    pub radius_range: [f64; 2],
    pub blur: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, dims: [usize; 3], labels: usize) -> Self {
        let shortest = *dims.iter().min().unwrap_or(&16) as f64;
        Self {
            seed,
            dims,
            labels,
            warp_max: 0.15,
            warp_sigma: shortest / 8.0,
            radius_range: [0.08, 0.2],
            blur: 0.75,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.dims.iter().all(|&d| d >= 16),
            "synthetic volumes need at least 16 voxels per axis, got {:?}",
            self.dims
        );
        ensure!(
            (1..=16).contains(&self.labels),
            "label count must be in 1..=16, got {}",
            self.labels
        );
        ensure!(
            self.warp_max.is_finite() && (0.0..=0.15).contains(&self.warp_max),
            "warp_max must lie in [0, 0.15], got {}",
            self.warp_max
        );
        ensure!(
            self.warp_sigma.is_finite() && self.warp_sigma > 0.0,
            "warp_sigma must be positive"
        );
        let [a, b] = self.radius_range;
        ensure!(
            a > 0.0 && a <= b && b <= 1.0,
            "radius range must satisfy 0 < min <= max <= 1, got {:?}",
            self.radius_range
        );
        ensure!(self.blur.is_finite() && self.blur >= 0.0, "blur must be non-negative");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelPrior {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub fixed: Volume3,
    pub moving: Volume3,
    pub labels_fixed: LabelVolume,
    pub labels_moving: LabelVolume,
    /// `moving(x) = fixed(x + u_true(x))`.
    pub u_true: WarpField,
    /// Intensity prior per label, background first.
    pub priors: Vec<LabelPrior>,
    /// Fixed image before the blur.
    pub fixed_unblurred: Volume3,
}

struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
    rot: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn contains(&self, x: [f64; 3]) -> bool {
        let d = [x[0] - self.centre[0], x[1] - self.centre[1], x[2] - self.centre[2]];
        let mut s = 0.0;
        for a in 0..3 {
            let p = self.rot[a][0] * d[0] + self.rot[a][1] * d[1] + self.rot[a][2] * d[2];
            s += (p / self.radii[a]).powi(2);
        }
        s <= 1.0
    }
}

fn rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    use std::f64::consts::PI;
    let (a, b, c) = (
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..PI),
        rng.random_range(0.0..2.0 * PI),
    );
    let rz = |t: f64| [[t.cos(), -t.sin(), 0.0], [t.sin(), t.cos(), 0.0], [0.0, 0.0, 1.0]];
    let ry = |t: f64| [[t.cos(), 0.0, t.sin()], [0.0, 1.0, 0.0], [-t.sin(), 0.0, t.cos()]];
    let mul = |p: [[f64; 3]; 3], q: [[f64; 3]; 3]| {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| p[i][k] * q[k][j]).sum();
            }
        }
        r
    };
    mul(mul(rz(a), ry(b)), rz(c))
}

fn rasterize(dims: Dims, shapes: &[Ellipsoid]) -> Vec<u16> {
    let b = DomainBounds::CANONICAL;
    let mut out = vec![0u16; dims.len()];
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let x = [b.coord(0, i, dims[0]), b.coord(1, j, dims[1]), b.coord(2, k, dims[2])];
                for (l, e) in shapes.iter().enumerate() {
                    if e.contains(x) {
                        out[dims.index(i, j, k)] = l as u16 + 1;
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour warp of a label map: `out(x) = labels(x + u(x))`, 0 outside.
pub fn warp_labels_nearest(labels: &LabelVolume, u: &WarpField) -> Result<LabelVolume> {
    let dims = labels.dims();
    ensure!(u.dims() == dims, "warp and label lattices differ");
    let b = DomainBounds::CANONICAL;
    let mut out = Vec::with_capacity(dims.len());
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let d = u.get(i, j, k);
                let mut idx = [0isize; 3];
                let mut inside = true;
                for (a, (&p, disp)) in [i, j, k].iter().zip(d).enumerate() {
                    let x = b.coord(a, p, dims[a]) + disp;
                    let r = ((x + 1.0) * (dims[a] - 1) as f64 / 2.0).round();
                    inside &= r >= 0.0 && r <= (dims[a] - 1) as f64;
                    idx[a] = r as isize;
                }
                out.push(if inside {
                    labels.get(idx[0] as usize, idx[1] as usize, idx[2] as usize)
                } else {
                    0
                });
            }
        }
    }
    let mut l = LabelVolume::from_vec(dims, out)?.with_spacing(labels.spacing);
    l.origin = labels.origin;
    Ok(l)
}

fn random_warp(dims: Dims, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<WarpField> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut u = WarpField::from_fn(dims, |_, _, _| {
        [normal.sample(rng), normal.sample(rng), normal.sample(rng)]
    });
    gaussian_smooth_in_place(&mut u, cfg.warp_sigma)?;
    let peak = u.max_norm();
    if peak > 0.0 {
        u.scale(cfg.warp_max / peak);
    } else {
        u.scale(0.0);
    }
    Ok(u)
}

pub fn synth_pair(seed: u64, dims: [usize; 3], labels: usize) -> Result<SynthPair> {
    synth_pair_with(&SynthConfig::new(seed, dims, labels))
}

pub fn synth_pair_with(cfg: &SynthConfig) -> Result<SynthPair> {
    cfg.validate()?;
    let dims = Dims::new(cfg.dims[0], cfg.dims[1], cfg.dims[2])?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // background prior, then one per label; label means are spread apart
    let mut priors = vec![LabelPrior {
        mean: rng.random_range(0.05..0.15),
        std: rng.random_range(0.01..0.03),
    }];
    for _ in 0..cfg.labels {
        priors.push(LabelPrior {
            mean: rng.random_range(0.25..1.0),
            std: rng.random_range(0.02..0.06),
        });
    }

    // larger shapes first so later, smaller ones stay visible
    let label_map = loop {
        let mut shapes: Vec<Ellipsoid> = (0..cfg.labels)
            .map(|_| {
                let [lo, hi] = cfg.radius_range;
                Ellipsoid {
                    centre: [
                        rng.random_range(-0.45..0.45),
                        rng.random_range(-0.45..0.45),
                        rng.random_range(-0.45..0.45),
                    ],
                    radii: [
                        rng.random_range(lo..=hi),
                        rng.random_range(lo..=hi),
                        rng.random_range(lo..=hi),
                    ],
                    rot: rotation(&mut rng),
                }
            })
            .collect();
        shapes.sort_by(|a, b| {
            let va: f64 = a.radii.iter().product();
            let vb: f64 = b.radii.iter().product();
            vb.total_cmp(&va)
        });
        let map = rasterize(dims, &shapes);
        let mut present = vec![false; cfg.labels + 1];
        map.iter().for_each(|&l| present[l as usize] = true);
        if present[1..].iter().all(|&p| p) {
            break map;
        }
    };

    let normals: Vec<Normal<f64>> = priors
        .iter()
        .map(|p| Normal::new(p.mean, p.std).expect("positive std"))
        .collect();
    let raw: Vec<f64> = label_map.iter().map(|&l| normals[l as usize].sample(&mut rng)).collect();
    let fixed_unblurred = Volume3::from_vec(dims, raw)?;
    let mut fixed = fixed_unblurred.clone();
    gaussian_smooth_in_place(&mut fixed, cfg.blur)?;

    let u_true = random_warp(dims, cfg, &mut rng)?;
    let moving = fused_sample(&fixed, Some(&u_true), &SamplerArgs::identity())?;
    let labels_fixed = LabelVolume::from_vec(dims, label_map)?;
    let labels_moving = warp_labels_nearest(&labels_fixed, &u_true)?;

    Ok(SynthPair {
        fixed,
        moving,
        labels_fixed,
        labels_moving,
        u_true,
        priors,
        fixed_unblurred,
    })
}
