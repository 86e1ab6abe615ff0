use super::*;
use crate::testutil::{rel_err, rng};
use rand::seq::SliceRandom;
use rand::Rng;

fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0.0..1.0)).collect()
}

fn correlated(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let a: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let b = a
        .iter()
        .map(|&x| (0.7 * x * x + 0.2 + r.random_range(-0.05..0.05)).clamp(0.0, 1.0))
        .collect();
    (a, b)
}

fn max_entry_diff(a: &JointHistogram, b: &JointHistogram) -> f64 {
    a.p_i
        .iter()
        .zip(&b.p_i)
        .chain(a.p_j.iter().zip(&b.p_j))
        .chain(a.p_ij.iter().zip(&b.p_ij))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn kernels_integrate_to_one() {
    for k in [
        ParzenKernel::default_gaussian(),
        ParzenKernel::gaussian(0.8).unwrap(),
        ParzenKernel::bspline3().unwrap(),
    ] {
        let r = k.radius();
        let steps = 20000;
        let h = 2.0 * r / steps as f64;
        let total: f64 = (0..steps).map(|s| k.eval(-r + (s as f64 + 0.5) * h) * h).sum();
        assert!((total - 1.0).abs() < 1e-3, "{k:?} {total}");
    }
    assert!(ParzenKernel::gaussian(0.0).is_err());
}

#[test]
fn kernel_derivatives_match_differences() {
    let h = 1e-7;
    for k in [ParzenKernel::default_gaussian(), ParzenKernel::bspline3().unwrap()] {
        for &d in &[-1.3f64, -0.7, -0.2, 0.1, 0.45, 1.2, 1.7] {
            if d.abs() >= k.radius() {
                continue;
            }
            let fd = (k.eval(d + h) - k.eval(d - h)) / (2.0 * h);
            assert!((fd - k.derivative(d)).abs() < 1e-6, "{k:?} {d}");
        }
    }
}

#[test]
fn sample_weights_partition_unity() {
    let k = ParzenKernel::default_gaussian();
    for &x in &[0.0, 0.01, 0.3, 0.5, 0.999, 1.0] {
        let w = k.sample_weights(x, 16);
        let s: f64 = w.w[..w.len].iter().sum();
        let ds: f64 = w.dw[..w.len].iter().sum();
        assert!((s - 1.0).abs() < 1e-14);
        assert!(ds.abs() < 1e-9);
    }
}

#[test]
fn block_single_bin_row() {
    let x = uniform(20, 1);
    let k = ParzenKernel::default_gaussian();
    let psi = parzen_block_naive(&x, 1, &k).unwrap();
    assert_eq!(psi.len(), 20);
    for (p, &v) in psi.iter().zip(&x) {
        assert_eq!(*p, k.eval(0.5 - v));
    }
}

#[test]
fn block_at_bin_centres() {
    let bins = 8;
    let k = ParzenKernel::default_gaussian();
    let x: Vec<f64> = (0..40).map(|s| ((s % bins) as f64 + 0.5) / bins as f64).collect();
    let psi = parzen_block_naive(&x, bins, &k).unwrap();
    let n = x.len();
    // each centre sample contributes kappa(0) to its own bin and kappa(+-1) to neighbours
    let (k0, k1) = (k.eval(0.0), k.eval(1.0));
    for j in 0..bins {
        let row: f64 = psi[j * n..(j + 1) * n].iter().sum();
        let neighbours = [j.checked_sub(1), (j + 1 < bins).then_some(j + 1)]
            .iter()
            .flatten()
            .count() as f64;
        let expect = 5.0 * (k0 + neighbours * k1);
        assert!((row - expect).abs() < 1e-12);
    }
}

#[test]
fn block_columns_nearly_constant_inside() {
    let bins = 16;
    let k = ParzenKernel::default_gaussian();
    let x: Vec<f64> = (0..200).map(|s| 0.2 + 0.6 * s as f64 / 199.0).collect();
    let psi = parzen_block_naive(&x, bins, &k).unwrap();
    let cols: Vec<f64> = (0..x.len()).map(|c| (0..bins).map(|j| psi[j * x.len() + c]).sum()).collect();
    let (lo, hi) = cols.iter().fold((f64::MAX, f64::MIN), |(a, b), &c| (a.min(c), b.max(c)));
    assert!((hi - lo) / hi < 0.05, "{lo} {hi}");
}

#[test]
fn block_rejects_out_of_range() {
    assert!(parzen_block_naive(&[0.5, 1.2], 4, &ParzenKernel::default_gaussian()).is_err());
}

#[test]
fn exact_matches_block_oracle() {
    for (n, bins, seed) in [(512, 8, 2), (4096, 32, 3), (1000, 8, 4), (3375, 32, 5)] {
        let (a, b) = correlated(n, seed);
        for kernel in [ParzenKernel::default_gaussian(), ParzenKernel::bspline3().unwrap()] {
            let p = MiParams { bins, kernel };
            let (mi, h) = mi_forward_exact(&a, &b, &p).unwrap();
            let oracle = histogram_from_blocks(
                &parzen_block_naive(&a, bins, &kernel).unwrap(),
                &parzen_block_naive(&b, bins, &kernel).unwrap(),
                bins,
            )
            .unwrap();
            assert!(max_entry_diff(&h, &oracle) <= 1e-12);
            assert!((mi - oracle.mutual_information()).abs() <= 1e-12);
            assert!(h.invariant_error() <= 1e-9);
        }
    }
}

#[test]
fn self_information_dominates_shuffled() {
    let a = uniform(4096, 6);
    let p = MiParams::default();
    let (self_mi, h) = mi_forward_exact(&a, &a, &p).unwrap();
    let mut shuffled = a.clone();
    shuffled.shuffle(&mut rng(7));
    let (mixed, _) = mi_forward_exact(&a, &shuffled, &p).unwrap();
    assert!(self_mi > mixed);
    // diagonal-concentrated joint: MI equals H(p_i) minus the joint's spread
    let h_i: f64 = -h.p_i.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    let h_ij: f64 = -h.p_ij.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    assert!((self_mi - (2.0 * h_i - h_ij)).abs() < 1e-12);
}

#[test]
fn independent_noise_has_small_mi() {
    let a = uniform(32 * 32 * 32, 8);
    let b = uniform(32 * 32 * 32, 9);
    let (mi, _) = mi_forward_exact(&a, &b, &MiParams::default()).unwrap();
    assert!(mi <= 0.05, "{mi}");
    assert!(mi >= -1e-9);
}

#[test]
fn symmetric_in_arguments() {
    let (a, b) = correlated(2000, 10);
    let p = MiParams::default();
    let (x, _) = mi_forward_exact(&a, &b, &p).unwrap();
    let (y, _) = mi_forward_exact(&b, &a, &p).unwrap();
    assert!((x - y).abs() <= 1e-12);
}

#[test]
fn too_few_bins_rejected() {
    let a = uniform(10, 1);
    let p = MiParams {
        bins: 1,
        ..Default::default()
    };
    assert!(mi_forward_exact(&a, &a, &p).is_err());
    assert!(mi_forward_exact(&a, &a[..5], &MiParams::default()).is_err());
}

#[test]
fn approx_collapses_at_bin_centres() {
    let bins = 32;
    let mut r = rng(11);
    let centre = |r: &mut rand_chacha::ChaCha8Rng| (r.random_range(0..bins) as f64 + 0.5) / bins as f64;
    let a: Vec<f64> = (0..3000).map(|_| centre(&mut r)).collect();
    let b: Vec<f64> = (0..3000).map(|_| centre(&mut r)).collect();
    let p = MiParams::default();
    let (me, he) = mi_forward_exact(&a, &b, &p).unwrap();
    let (ma, ha) = mi_forward_approx(&a, &b, &p).unwrap();
    assert!(max_entry_diff(&he, &ha) <= 1e-9);
    assert!((me - ma).abs() <= 1e-9);
}

#[test]
fn approx_write_count_is_three_per_voxel() {
    let (a, b) = correlated(4096, 12);
    let p = MiParams::default();
    let (_, ha) = mi_forward_approx(&a, &b, &p).unwrap();
    assert_eq!(ha.writes, 3 * 4096);
    let (_, he) = mi_forward_exact(&a, &b, &p).unwrap();
    assert!(he.writes > ha.writes);
    assert!(ha.invariant_error() <= 1e-9);
}

#[test]
fn approx_close_to_exact_on_random_pairs() {
    // measured: 16^3 independent pair gives ~0.11, 32^3 ~0.04; error shrinks like 1/sqrt(N)
    let p = MiParams::default();
    let l1 = |n: usize| {
        let (a, b) = (uniform(n, 13), uniform(n, 14));
        let (_, he) = mi_forward_exact(&a, &b, &p).unwrap();
        let (_, ha) = mi_forward_approx(&a, &b, &p).unwrap();
        he.p_ij.iter().zip(&ha.p_ij).map(|(x, y)| (x - y).abs()).sum::<f64>()
    };
    let small = l1(4096);
    let large = l1(32768);
    assert!(small <= 0.15, "{small}");
    assert!(large <= 0.05, "{large}");
    assert!(large < small);
}

#[test]
fn nearest_kernel_makes_paths_identical() {
    let (a, b) = correlated(3000, 14);
    let p = MiParams {
        bins: 16,
        kernel: ParzenKernel::Nearest,
    };
    let (me, he) = mi_forward_exact(&a, &b, &p).unwrap();
    let (ma, ha) = mi_forward_approx(&a, &b, &p).unwrap();
    assert!(max_entry_diff(&he, &ha) <= 1e-12);
    assert!((me - ma).abs() <= 1e-12);
}

#[test]
fn backward_vs_finite_differences() {
    let h = 1e-6;
    for (seed, kernel) in [
        (15, ParzenKernel::default_gaussian()),
        (16, ParzenKernel::default_gaussian()),
        (17, ParzenKernel::bspline3().unwrap()),
    ] {
        let (a, b) = correlated(125, seed);
        let a: Vec<f64> = a.iter().map(|x| x.clamp(0.01, 0.99)).collect();
        let b: Vec<f64> = b.iter().map(|x| x.clamp(0.01, 0.99)).collect();
        let p = MiParams { bins: 8, kernel };
        let (_, hist) = mi_forward_exact(&a, &b, &p).unwrap();
        let (da, db) = mi_backward(-1.0, &a, &b, &hist, &kernel).unwrap();
        let loss = |x: &[f64], y: &[f64]| -mi_forward_exact(x, y, &p).unwrap().0;
        let scale = da.iter().chain(&db).fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..a.len() {
            let (mut ap, mut am) = (a.clone(), a.clone());
            ap[k] += h;
            am[k] -= h;
            let fd = (loss(&ap, &b) - loss(&am, &b)) / (2.0 * h);
            assert!(rel_err(da[k], fd, 1e-3 * scale) <= 1e-5, "{} vs {fd}", da[k]);
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[k] += h;
            bm[k] -= h;
            let fd = (loss(&a, &bp) - loss(&a, &bm)) / (2.0 * h);
            assert!(rel_err(db[k], fd, 1e-3 * scale) <= 1e-5, "{} vs {fd}", db[k]);
        }
    }
}

#[test]
fn zero_upstream_zero_gradient() {
    let (a, b) = correlated(100, 18);
    let p = MiParams::default();
    let (_, hist) = mi_forward_exact(&a, &b, &p).unwrap();
    let (da, db) = mi_backward(0.0, &a, &b, &hist, &p.kernel).unwrap();
    assert!(da.iter().chain(&db).all(|&v| v == 0.0));
}

#[test]
fn constant_image_has_uniform_gradient() {
    let b = uniform(200, 19);
    let a = vec![0.37; 200];
    let p = MiParams::default();
    let (_, hist) = mi_forward_exact(&a, &b, &p).unwrap();
    let (da, _) = mi_backward(1.0, &a, &b, &hist, &p.kernel).unwrap();
    // every voxel sees the same p_i and an independent J, so the sum over n collapses
    for v in &da {
        assert!((v - da[0]).abs() < 1e-12);
    }
}

#[test]
fn payload_round_trip() {
    let (a, b) = correlated(100, 20);
    let (_, h) = mi_forward_exact(&a, &b, &MiParams::default()).unwrap();
    let payload = h.to_payload();
    assert_eq!(payload.len(), 32 * 32 + 64);
    let back = JointHistogram::from_payload(32, 100, &payload).unwrap();
    assert_eq!(back.p_ij, h.p_ij);
    assert_eq!(back.p_j, h.p_j);
}

#[test]
fn intensity_scale_includes_zero() {
    let v = Volume3::from_vec(crate::volume::Dims::new(1, 1, 3).unwrap(), vec![2.0, 4.0, 6.0]).unwrap();
    let s = IntensityScale::of_volume(&v);
    assert_eq!((s.lo, s.hi), (0.0, 6.0));
    assert_eq!(s.apply(3.0), 0.5);
    assert_eq!(s.apply(-1.0), 0.0);
    assert_eq!(s.slope(7.0), 0.0);
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(40))]

    #[test]
    fn histogram_invariants_hold(seed in 0u64..100_000, bins in 2usize..40, n in 1usize..300) {
        let a = uniform(n, seed);
        let b = uniform(n, seed + 1);
        let p = MiParams { bins, ..Default::default() };
        let (mi, h) = mi_forward_exact(&a, &b, &p).unwrap();
        proptest::prop_assert!(h.invariant_error() <= 1e-9);
        proptest::prop_assert!(mi >= -1e-9);
        let (_, ha) = mi_forward_approx(&a, &b, &p).unwrap();
        proptest::prop_assert!(ha.invariant_error() <= 1e-9);
    }
}


#[test]
fn volume_loss_gradient_vs_finite_differences() {
    let mut r = rng(40);
    let d = crate::volume::Dims::cube(5).unwrap();
    let f = crate::testutil::random_volume(d, 0.0, 2.0, &mut r);
    let m = f.map(|x| 0.5 * x * x + 0.1);
    let cfg = MiLoss::new(MiParams { bins: 8, kernel: ParzenKernel::default_gaussian() }, &f, &m);
    let (_, g) = cfg.evaluate(&f, &m).unwrap();
    let loss = |m: &Volume3| cfg.loss(&cfg.histogram(f.data(), m.data()).unwrap());
    let h = 1e-6;
    let scale = g.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    for v in 0..m.len() {
        // the clamp at the ends of the intensity range is a kink
        let x = m.data()[v];
        if x == cfg.scale_m.lo || x == cfg.scale_m.hi {
            continue;
        }
        let (mut p, mut q) = (m.clone(), m.clone());
        p.data_mut()[v] += h;
        q.data_mut()[v] -= h;
        let fd = (loss(&p) - loss(&q)) / (2.0 * h);
        let err = (fd - g[v]).abs() / fd.abs().max(g[v].abs()).max(1e-3 * scale);
        assert!(err <= 1e-5, "{v}: {} vs {fd}", g[v]);
    }
}
