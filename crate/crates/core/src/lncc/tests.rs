use super::*;
use crate::alloc::{lattice_bytes, AllocProbe};
use crate::testutil::{random_volume, rng};

fn pair(n: usize, seed: u64, hi: f64) -> (Volume3, Volume3) {
    let mut r = rng(seed);
    let d = Dims::cube(n).unwrap();
    (random_volume(d, 0.0, hi, &mut r), random_volume(d, 0.0, hi, &mut r))
}

fn norm(v: &Volume3) -> f64 {
    v.data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn max_rel(a: &Volume3, b: &Volume3) -> f64 {
    let scale = a.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-2 * scale))
        .fold(0.0, f64::max)
}

#[test]
fn self_similarity_is_exactly_one() {
    let (f, _) = pair(8, 1, 1.0);
    let p = LnccParams { window: 3, eps: 0.0 };
    let g = lncc_forward_naive(&f, &f, p).unwrap();
    for v in 0..f.len() {
        if g.var_f[v] > 0.0 {
            assert_eq!(g.ncc[v], 1.0);
        }
    }
}

#[test]
fn affine_intensity_invariance() {
    let (f, _) = pair(8, 2, 1.0);
    let m = f.map(|x| 2.5 * x + 0.75);
    let p = LnccParams { window: 5, eps: 0.0 };
    let g = lncc_forward_naive(&f, &m, p).unwrap();
    // windows reaching into the zero padding see padded zeros, not a*0+b
    for i in 2..6 {
        for j in 2..6 {
            for k in 2..6 {
                let v = f.dims().index(i, j, k);
                assert!((g.ncc[v] - 1.0).abs() < 1e-9, "{}", g.ncc[v]);
            }
        }
    }
}

#[test]
fn constant_volumes_give_unit_loss() {
    let d = Dims::cube(6).unwrap();
    // all-interior windows: use a delta window so zero padding adds no variance
    let f = Volume3::from_fn(d, |_, _, _| 2.0);
    let m = Volume3::from_fn(d, |_, _, _| -5.0);
    let p = LnccParams { window: 1, eps: 1e-5 };
    let g = lncc_forward_naive(&f, &m, p).unwrap();
    assert!(g.ncc.iter().all(|&x| x == 0.0));
    assert_eq!(g.loss, 1.0);
    let (r, _) = lncc_forward_fused(&f, &m, p).unwrap();
    assert_eq!(r.loss, 1.0);
}

#[test]
fn even_window_rejected() {
    let (f, m) = pair(4, 3, 1.0);
    let p = LnccParams { window: 4, eps: 1e-5 };
    assert!(lncc_forward_naive(&f, &m, p).is_err());
    assert!(lncc_forward_fused(&f, &m, p).is_err());
}

#[test]
fn mismatched_lattices_rejected() {
    let (f, _) = pair(4, 3, 1.0);
    let m = Volume3::<f64>::zeros(Dims::cube(5).unwrap());
    assert!(lncc_forward_fused(&f, &m, LnccParams::default()).is_err());
}

#[test]
fn fused_forward_matches_naive() {
    for seed in 0..10 {
        let (f, m) = pair(16, 100 + seed, 1.0);
        let p = LnccParams::default();
        let naive = lncc_forward_naive(&f, &m, p).unwrap();
        let (fused, state) = lncc_forward_fused(&f, &m, p).unwrap();
        assert!((naive.loss - fused.loss).abs() <= 1e-12);
        let map = state.ncc_map();
        for v in 0..f.len() {
            assert!(map.data()[v] >= 0.0 && map.data()[v] <= 1.0 + 1e-12);
        }
    }
}

#[test]
fn self_pair_loss_near_zero() {
    let (f, _) = pair(10, 4, 1.0);
    let p = LnccParams { window: 3, eps: 0.0 };
    let (r, _) = lncc_forward_fused(&f, &f, p).unwrap();
    let naive = lncc_forward_naive(&f, &f, p).unwrap();
    assert!(r.loss.abs() < 1e-12);
    assert_eq!(r.loss, naive.loss);
}

#[test]
fn fused_keeps_five_buffers_naive_many() {
    let (f, m) = pair(16, 5, 1.0);
    let bytes = lattice_bytes(f.len());
    let probe = AllocProbe::start(bytes);
    let out = lncc_forward_fused(&f, &m, LnccParams::default()).unwrap();
    let rep = probe.finish();
    drop(out);
    assert_eq!(rep.large_allocations, 5);

    let probe = AllocProbe::start(bytes);
    let g = lncc_forward_naive(&f, &m, LnccParams::default()).unwrap();
    let rep = probe.finish();
    drop(g);
    assert!(rep.large_allocations >= 14, "{}", rep.large_allocations);
    assert_eq!(rep.large_allocations, NaiveLncc::NODES);
}

#[test]
fn exact_backward_vs_finite_differences() {
    let h = 1e-6;
    for (seed, window) in [(6, 3), (7, 5), (8, 7)] {
        let (f, m) = pair(6, seed, 1.0);
        let p = LnccParams { window, eps: 1e-5 };
        let (_, state) = lncc_forward_fused(&f, &m, p).unwrap();
        let (df, dm) = lncc_backward_fused(1.0, state, &f, &m, false).unwrap();
        let loss = |a: &Volume3, b: &Volume3| lncc_forward_fused(a, b, p).unwrap().0.loss;
        let mut fd_f = f.clone();
        let mut fd_m = m.clone();
        for v in 0..f.len() {
            let (mut fp, mut fm) = (f.clone(), f.clone());
            fp.data_mut()[v] += h;
            fm.data_mut()[v] -= h;
            fd_f.data_mut()[v] = (loss(&fp, &m) - loss(&fm, &m)) / (2.0 * h);
            let (mut mp, mut mmn) = (m.clone(), m.clone());
            mp.data_mut()[v] += h;
            mmn.data_mut()[v] -= h;
            fd_m.data_mut()[v] = (loss(&f, &mp) - loss(&f, &mmn)) / (2.0 * h);
        }
        assert!(max_rel(&df, &fd_f) <= 1e-6, "{}", max_rel(&df, &fd_f));
        assert!(max_rel(&dm, &fd_m) <= 1e-6, "{}", max_rel(&dm, &fd_m));
    }
}

#[test]
fn exact_backward_matches_node_by_node() {
    for seed in 0..5 {
        let (f, m) = pair(9, 200 + seed, 1.0);
        let p = LnccParams::default();
        let graph = lncc_forward_naive(&f, &m, p).unwrap();
        let (nf, nm) = lncc_backward_naive(1.3, &graph, &f, &m).unwrap();
        let (_, state) = lncc_forward_fused(&f, &m, p).unwrap();
        let (df, dm) = lncc_backward_fused(1.3, state, &f, &m, false).unwrap();
        assert!(df.max_abs_diff(&nf) <= 1e-12);
        assert!(dm.max_abs_diff(&nm) <= 1e-12);
    }
}

#[test]
fn identical_inputs_are_near_stationary() {
    let (f, _) = pair(6, 9, 10.0);
    let p = LnccParams { window: 3, eps: 1e-5 };
    let (_, state) = lncc_forward_fused(&f, &f, p).unwrap();
    let (df, dm) = lncc_backward_fused(1.0, state, &f, &f, false).unwrap();
    let graph = lncc_forward_naive(&f, &f, p).unwrap();
    let (nf, _) = lncc_backward_naive(1.0, &graph, &f, &f).unwrap();
    assert!(norm(&df) <= 1e-6 * norm(&f), "{}", norm(&df));
    assert!(norm(&dm) <= 1e-6 * norm(&f));
    assert!(norm(&nf) <= 1e-6 * norm(&f));
}

#[test]
fn approx_equals_exact_for_delta_window() {
    let (f, m) = pair(7, 10, 1.0);
    let p = LnccParams { window: 1, eps: 1e-5 };
    let (_, s1) = lncc_forward_fused(&f, &m, p).unwrap();
    let (_, s2) = lncc_forward_fused(&f, &m, p).unwrap();
    let exact = lncc_backward_fused(1.0, s1, &f, &m, false).unwrap();
    let approx = lncc_backward_fused(1.0, s2, &f, &m, true).unwrap();
    assert_eq!(exact, approx);
}

#[test]
fn approx_differs_for_wide_window() {
    let (f, m) = pair(7, 11, 1.0);
    let p = LnccParams::default();
    let (_, s1) = lncc_forward_fused(&f, &m, p).unwrap();
    let (_, s2) = lncc_forward_fused(&f, &m, p).unwrap();
    let exact = lncc_backward_fused(1.0, s1, &f, &m, false).unwrap();
    let approx = lncc_backward_fused(1.0, s2, &f, &m, true).unwrap();
    assert!(exact.0.max_abs_diff(&approx.0) > 0.0);
}

#[test]
fn state_lattice_mismatch_rejected() {
    let (f, m) = pair(5, 12, 1.0);
    let (_, state) = lncc_forward_fused(&f, &m, LnccParams::default()).unwrap();
    let (g, h) = pair(6, 12, 1.0);
    assert!(lncc_backward_fused(1.0, state, &g, &h, false).is_err());
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

    #[test]
    fn swapping_inputs_swaps_gradients(seed in 0u64..10_000, w in 0usize..3) {
        let (f, m) = pair(6, seed, 1.0);
        let p = LnccParams { window: 2 * w + 3, eps: 1e-5 };
        let (a, sa) = lncc_forward_fused(&f, &m, p).unwrap();
        let (b, sb) = lncc_forward_fused(&m, &f, p).unwrap();
        proptest::prop_assert_eq!(a.loss, b.loss);
        let (df, dm) = lncc_backward_fused(0.7, sa, &f, &m, false).unwrap();
        let (dm2, df2) = lncc_backward_fused(0.7, sb, &m, &f, false).unwrap();
        proptest::prop_assert_eq!(df, df2);
        proptest::prop_assert_eq!(dm, dm2);
    }

    #[test]
    fn loss_non_decreasing_in_eps(seed in 0u64..10_000, e1 in 0.0f64..1e-2, de in 0.0f64..1e-2) {
        let (f, m) = pair(5, seed, 1.0);
        let lo = lncc_forward_fused(&f, &m, LnccParams { window: 3, eps: e1 }).unwrap().0.loss;
        let hi = lncc_forward_fused(&f, &m, LnccParams { window: 3, eps: e1 + de }).unwrap().0.loss;
        proptest::prop_assert!(hi >= lo);
    }
}
