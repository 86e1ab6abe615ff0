//! Label overlap and surface distance metrics.

use std::collections::BTreeMap;

use ringreg_core::{Dims, Error, LabelVolume, Result, WarpField};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_label: BTreeMap<u16, f64>,
    pub mean: f64,
}

/// Which label volume sets the inverse weights of [`inv_dice_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InvWeight {
    /// `1 / |A_l|`, over labels present in the first map.
    #[default]
    Fixed,
    /// `1 / |A_l ∪ B_l|`, over labels present in either map.
    Union,
}

#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    a: usize,
    b: usize,
    both: usize,
}

fn check_lattice(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::InvalidArgument(format!(
            "label maps live on different lattices: {:?} vs {:?}",
            a.dims().0,
            b.dims().0
        )));
    }
    Ok(())
}

fn label_counts(a: &LabelVolume, b: &LabelVolume) -> Result<BTreeMap<u16, Counts>> {
    check_lattice(a, b)?;
    let mut counts: BTreeMap<u16, Counts> = BTreeMap::new();
    for (&la, &lb) in a.data().iter().zip(b.data()) {
        if la != 0 {
            counts.entry(la).or_default().a += 1;
        }
        if lb != 0 {
            counts.entry(lb).or_default().b += 1;
        }
        if la != 0 && la == lb {
            counts.entry(la).or_default().both += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::InvalidArgument("neither label map has foreground labels".into()));
    }
    Ok(counts)
}

fn dice_of(c: &Counts) -> f64 {
    2.0 * c.both as f64 / (c.a + c.b) as f64
}

/// Per-label Dice `2|A∩B| / (|A|+|B|)` for every label `> 0` present in
/// either map, and their unweighted mean.
pub fn dice(a: &LabelVolume, b: &LabelVolume) -> Result<DiceReport> {
    let counts = label_counts(a, b)?;
    let per_label: BTreeMap<u16, f64> = counts.iter().map(|(&l, c)| (l, dice_of(c))).collect();
    let mean = per_label.values().sum::<f64>() / per_label.len() as f64;
    Ok(DiceReport { per_label, mean })
}

/// Dice averaged with weights proportional to the inverse label volume in `a`.
pub fn inv_dice(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    inv_dice_with(a, b, InvWeight::Fixed)
}

pub fn inv_dice_with(a: &LabelVolume, b: &LabelVolume, weight: InvWeight) -> Result<f64> {
    let counts = label_counts(a, b)?;
    let (mut num, mut den) = (0.0, 0.0);
    for c in counts.values() {
        let size = match weight {
            InvWeight::Fixed => c.a,
            InvWeight::Union => c.a + c.b - c.both,
        };
        if size == 0 {
            continue;
        }
        let w = 1.0 / size as f64;
        num += w * dice_of(c);
        den += w;
    }
    if den == 0.0 {
        return Err(Error::InvalidArgument("reference label map has no foreground labels".into()));
    }
    Ok(num / den)
}

/// Foreground voxels with a 6-neighbour of another label, grouped by label.
/// Neighbours outside the lattice count as background.
fn surfaces(l: &LabelVolume) -> BTreeMap<u16, Vec<[usize; 3]>> {
    let d = l.dims();
    let mut out: BTreeMap<u16, Vec<[usize; 3]>> = BTreeMap::new();
    for i in 0..d[0] {
        for j in 0..d[1] {
            for k in 0..d[2] {
                let v = l.get(i, j, k);
                if v == 0 {
                    continue;
                }
                let p = [i, j, k];
                let edge = (0..3).any(|a| {
                    [-1isize, 1].iter().any(|&s| {
                        let q = p[a] as isize + s;
                        if q < 0 || q >= d[a] as isize {
                            return true;
                        }
                        let mut n = p;
                        n[a] = q as usize;
                        l.get(n[0], n[1], n[2]) != v
                    })
                });
                if edge {
                    out.entry(v).or_default().push(p);
                }
            }
        }
    }
    out
}

fn directed_distances(
    from: &BTreeMap<u16, Vec<[usize; 3]>>,
    to: &BTreeMap<u16, Vec<[usize; 3]>>,
    spacing: [f64; 3],
) -> Vec<f64> {
    let mut out = Vec::new();
    for (label, pts) in from {
        let Some(targets) = to.get(label) else {
            continue;
        };
        for p in pts {
            let best = targets
                .iter()
                .map(|q| {
                    (0..3)
                        .map(|a| {
                            let d = (p[a] as f64 - q[a] as f64) * spacing[a];
                            d * d
                        })
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            out.push(best.sqrt());
        }
    }
    out
}

/// Mean of the smallest `k = max(floor(0.9 N), 1)` distances.
fn cumulative_90(mut d: Vec<f64>) -> f64 {
    d.sort_by(f64::total_cmp);
    let k = ((0.9 * d.len() as f64).floor() as usize).max(1);
    d[..k].iter().sum::<f64>() / k as f64
}

/// Cumulative 90th-percentile surface distance in physical units. Distances
/// run between surfaces of the same label and are pooled over labels; the
/// larger of the two directions is returned.
pub fn hd90_cumulative(a: &LabelVolume, b: &LabelVolume, spacing: [f64; 3]) -> Result<f64> {
    check_lattice(a, b)?;
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
    }
    let (sa, sb) = (surfaces(a), surfaces(b));
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::InvalidArgument("surface distance of an empty mask is undefined".into()));
    }
    let ab = directed_distances(&sa, &sb, spacing);
    let ba = directed_distances(&sb, &sa, spacing);
    if ab.is_empty() || ba.is_empty() {
        return Err(Error::InvalidArgument("label maps share no foreground label".into()));
    }
    Ok(cumulative_90(ab).max(cumulative_90(ba)))
}

/// Fraction of voxels where `x -> x + u(x)` has a non-positive Jacobian
/// determinant, by central differences (one-sided at the lattice edge).
pub fn folding_fraction(u: &WarpField) -> f64 {
    let d: Dims = u.dims();
    let h: [f64; 3] = std::array::from_fn(|a| if d[a] > 1 { 2.0 / (d[a] - 1) as f64 } else { 1.0 });
    let mut folded = 0usize;
    for i in 0..d[0] {
        for j in 0..d[1] {
            for k in 0..d[2] {
                let p = [i, j, k];
                let mut jac = [[0.0; 3]; 3];
                for a in 0..3 {
                    if d[a] < 2 {
                        jac[a][a] = 1.0;
                        continue;
                    }
                    let lo = p[a].saturating_sub(1);
                    let hi = (p[a] + 1).min(d[a] - 1);
                    let (mut pl, mut ph) = (p, p);
                    pl[a] = lo;
                    ph[a] = hi;
                    let ul = u.get(pl[0], pl[1], pl[2]);
                    let uh = u.get(ph[0], ph[1], ph[2]);
                    let step = (hi - lo) as f64 * h[a];
                    for c in 0..3 {
                        jac[c][a] = (uh[c] - ul[c]) / step + if c == a { 1.0 } else { 0.0 };
                    }
                }
                let det = jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
                    - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
                    + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0]);
                if det <= 0.0 {
                    folded += 1;
                }
            }
        }
    }
    folded as f64 / d.len() as f64
}
