use super::{check_pair, ncc_value, window_filter, LnccParams, LnccResult};
use crate::error::{ensure, Result};
use crate::volume::{Dims, Volume3};

/// The five filtered moment channels, `w*F, w*M, w*F^2, w*M^2, w*FM`.
///
/// The backward pass rewrites these buffers in place, so a state is consumed
/// by exactly one backward call.
#[derive(Clone, Debug, PartialEq)]
pub struct LnccState {
    dims: Dims,
    params: LnccParams,
    mu: [Vec<f64>; 5],
}

impl LnccState {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn params(&self) -> LnccParams {
        self.params
    }

    pub fn mu_f(&self) -> &[f64] {
        &self.mu[0]
    }
    pub fn mu_m(&self) -> &[f64] {
        &self.mu[1]
    }
    pub fn mu_ff(&self) -> &[f64] {
        &self.mu[2]
    }
    pub fn mu_mm(&self) -> &[f64] {
        &self.mu[3]
    }
    pub fn mu_fm(&self) -> &[f64] {
        &self.mu[4]
    }

    /// Per-voxel `n_i` map (allocates).
    pub fn ncc_map(&self) -> Volume3 {
        let eps = self.params.eps;
        let [f, m, ff, mm, fm] = &self.mu;
        let data = (0..self.dims.len())
            .map(|v| ncc_value(f[v], m[v], ff[v], mm[v], fm[v], eps))
            .collect();
        Volume3::from_vec(self.dims, data).expect("state buffers match dims")
    }

    /// Sum of `n_i` over the lattice.
    pub fn ncc_sum(&self) -> f64 {
        let eps = self.params.eps;
        let [f, m, ff, mm, fm] = &self.mu;
        let mut s = 0.0;
        for v in 0..self.dims.len() {
            s += ncc_value(f[v], m[v], ff[v], mm[v], fm[v], eps);
        }
        s
    }
}

pub fn lncc_forward_fused(f: &Volume3, m: &Volume3, params: LnccParams) -> Result<(LnccResult, LnccState)> {
    check_pair(f, m)?;
    let kernel = params.kernel()?;
    let mut conv = window_filter(&kernel, f.dims());
    let state = lncc_forward_fused_with(f, m, params, &mut conv)?;
    let loss = 1.0 - state.ncc_sum() / f.len() as f64;
    Ok((LnccResult { loss, ncc: None }, state))
}

/// Builds the five moment channels in one pass over `F, M` and filters each
/// with `conv`, which must apply the window to one lattice buffer in place.
pub fn lncc_forward_fused_with(
    f: &Volume3,
    m: &Volume3,
    params: LnccParams,
    conv: &mut dyn FnMut(&mut [f64]) -> Result<()>,
) -> Result<LnccState> {
    check_pair(f, m)?;
    params.validate()?;
    let n = f.len();
    let mut mu: [Vec<f64>; 5] = std::array::from_fn(|_| Vec::with_capacity(n));
    for (&x, &y) in f.data().iter().zip(m.data()) {
        mu[0].push(x);
        mu[1].push(y);
        mu[2].push(x * x);
        mu[3].push(y * y);
        mu[4].push(x * y);
    }
    for buf in mu.iter_mut() {
        conv(buf)?;
    }
    Ok(LnccState {
        dims: f.dims(),
        params,
        mu,
    })
}

/// Gradients of `g * loss` with respect to `F` and `M`.
pub fn lncc_backward_fused(
    g: f64,
    state: LnccState,
    f: &Volume3,
    m: &Volume3,
    ants_approx: bool,
) -> Result<(Volume3, Volume3)> {
    let kernel = state.params.kernel()?;
    let dims = state.dims;
    let mut conv = window_filter(&kernel, dims);
    let per_voxel = -g / dims.len() as f64;
    lncc_backward_fused_with(per_voxel, state, f, m, ants_approx, &mut conv)
}

/// Backward with an explicit `d loss / d n_i` (the same for every voxel) and
/// a caller-supplied window filter.
pub fn lncc_backward_fused_with(
    g_ncc: f64,
    mut state: LnccState,
    f: &Volume3,
    m: &Volume3,
    ants_approx: bool,
    conv: &mut dyn FnMut(&mut [f64]) -> Result<()>,
) -> Result<(Volume3, Volume3)> {
    check_pair(f, m)?;
    ensure!(
        state.dims == f.dims(),
        "LNCC state lattice {:?} does not match inputs {:?}",
        state.dims.0,
        f.dims().0
    );
    let eps = state.params.eps;
    {
        // moments -> (gamma, gamma_AB, gamma_FM, gamma_AC, gamma_MF)
        let [b0, b1, b2, b3, b4] = &mut state.mu;
        for v in 0..state.dims.len() {
            let (mu_f, mu_m, mu_ff, mu_mm, mu_fm) = (b0[v], b1[v], b2[v], b3[v], b4[v]);
            let a = mu_fm - mu_f * mu_m;
            let b = mu_ff - mu_f * mu_f;
            let c = mu_mm - mu_m * mu_m;
            let d = b * c + eps;
            let (gamma, ratio_f, ratio_m) = if d == 0.0 {
                (0.0, 0.0, 0.0)
            } else {
                (2.0 * g_ncc * a / d, a * c / d, a * b / d)
            };
            b0[v] = gamma;
            b1[v] = gamma * ratio_f;
            b2[v] = gamma * (mu_f * ratio_f - mu_m);
            b3[v] = gamma * ratio_m;
            b4[v] = gamma * (mu_m * ratio_m - mu_f);
        }
    }
    if !ants_approx {
        for buf in state.mu.iter_mut() {
            conv(buf)?;
        }
    }
    let [gamma, g_ab, g_fm, g_ac, g_mf] = &state.mu;
    let n = state.dims.len();
    let mut df = Vec::with_capacity(n);
    let mut dm = Vec::with_capacity(n);
    for v in 0..n {
        let (x, y) = (f.data()[v], m.data()[v]);
        df.push(y * gamma[v] - x * g_ab[v] + g_fm[v]);
        dm.push(x * gamma[v] - y * g_ac[v] + g_mf[v]);
    }
    Ok((
        Volume3::from_vec(state.dims, df)?.with_geometry_of(f),
        Volume3::from_vec(state.dims, dm)?.with_geometry_of(m),
    ))
}
