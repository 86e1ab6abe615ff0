//! Node-by-node LNCC graph, every intermediate kept as its own lattice buffer.
//!
//! This is what an eager tensor library does, and the backward below walks
//! the same graph in reverse one node at a time. Both serve as the reference
//! for the fused kernels and as the `naive` backend.

use super::{check_pair, LnccParams, LnccResult};
use crate::conv::{convolve_separable, EdgeMode, Kernel1d};
use crate::error::Result;
use crate::volume::{Dims, Volume3};

/// All nodes of the forward graph.
#[derive(Clone, Debug)]
pub struct NaiveLncc {
    pub dims: Dims,
    pub params: LnccParams,
    pub loss: f64,
    pub f2: Vec<f64>,
    pub m2: Vec<f64>,
    pub fm: Vec<f64>,
    pub mu_f: Vec<f64>,
    pub mu_m: Vec<f64>,
    pub mu_f2: Vec<f64>,
    pub mu_m2: Vec<f64>,
    pub mu_fm: Vec<f64>,
    pub mu_f_sq: Vec<f64>,
    pub mu_m_sq: Vec<f64>,
    pub mu_f_mu_m: Vec<f64>,
    pub cross: Vec<f64>,
    pub var_f: Vec<f64>,
    pub var_m: Vec<f64>,
    pub cross_sq: Vec<f64>,
    pub var_prod: Vec<f64>,
    pub denom: Vec<f64>,
    pub ncc: Vec<f64>,
}

impl NaiveLncc {
    /// Number of lattice-sized nodes the graph holds.
    pub const NODES: usize = 18;

    pub fn result(&self) -> LnccResult {
        LnccResult {
            loss: self.loss,
            ncc: Some(Volume3::from_vec(self.dims, self.ncc.clone()).expect("ncc matches dims")),
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn filtered(x: &[f64], dims: Dims, kernel: &Kernel1d) -> Vec<f64> {
    let mut out = x.to_vec();
    convolve_separable(&mut out, dims, 1, kernel, EdgeMode::Zero);
    out
}

pub fn lncc_forward_naive(f: &Volume3, m: &Volume3, params: LnccParams) -> Result<NaiveLncc> {
    check_pair(f, m)?;
    let kernel = params.kernel()?;
    let dims = f.dims();
    let (fd, md) = (f.data(), m.data());

    let f2 = zip_map(fd, fd, |a, b| a * b);
    let m2 = zip_map(md, md, |a, b| a * b);
    let fm = zip_map(fd, md, |a, b| a * b);
    let mu_f = filtered(fd, dims, &kernel);
    let mu_m = filtered(md, dims, &kernel);
    let mu_f2 = filtered(&f2, dims, &kernel);
    let mu_m2 = filtered(&m2, dims, &kernel);
    let mu_fm = filtered(&fm, dims, &kernel);
    let mu_f_sq = zip_map(&mu_f, &mu_f, |a, b| a * b);
    let mu_m_sq = zip_map(&mu_m, &mu_m, |a, b| a * b);
    let mu_f_mu_m = zip_map(&mu_f, &mu_m, |a, b| a * b);
    let cross = zip_map(&mu_fm, &mu_f_mu_m, |a, b| a - b);
    let var_f = zip_map(&mu_f2, &mu_f_sq, |a, b| a - b);
    let var_m = zip_map(&mu_m2, &mu_m_sq, |a, b| a - b);
    let cross_sq = zip_map(&cross, &cross, |a, b| a * b);
    let var_prod = zip_map(&var_f, &var_m, |a, b| a * b);
    let denom: Vec<f64> = var_prod.iter().map(|&x| x + params.eps).collect();
    let ncc = zip_map(&cross_sq, &denom, |a, b| if b == 0.0 { 0.0 } else { a / b });
    let loss = 1.0 - ncc.iter().sum::<f64>() / ncc.len() as f64;

    Ok(NaiveLncc {
        dims,
        params,
        loss,
        f2,
        m2,
        fm,
        mu_f,
        mu_m,
        mu_f2,
        mu_m2,
        mu_fm,
        mu_f_sq,
        mu_m_sq,
        mu_f_mu_m,
        cross,
        var_f,
        var_m,
        cross_sq,
        var_prod,
        denom,
        ncc,
    })
}

/// Reverse pass over the stored graph: gradients of `g * loss`.
pub fn lncc_backward_naive(
    g: f64,
    graph: &NaiveLncc,
    f: &Volume3,
    m: &Volume3,
) -> Result<(Volume3, Volume3)> {
    check_pair(f, m)?;
    crate::error::ensure!(graph.dims == f.dims(), "graph lattice does not match inputs");
    let kernel = graph.params.kernel()?;
    let dims = graph.dims;
    let n = dims.len();

    // loss = 1 - sum(ncc) / N
    let g_ncc = vec![-g / n as f64; n];
    // ncc = cross_sq / denom
    let mut g_cross_sq = vec![0.0; n];
    let mut g_denom = vec![0.0; n];
    for v in 0..n {
        let d = graph.denom[v];
        if d != 0.0 {
            g_cross_sq[v] = g_ncc[v] / d;
            g_denom[v] = -g_ncc[v] * graph.cross_sq[v] / (d * d);
        }
    }
    // denom = var_prod + eps
    let g_var_prod = g_denom;
    // var_prod = var_f * var_m
    let g_var_f = zip_map(&g_var_prod, &graph.var_m, |a, b| a * b);
    let g_var_m = zip_map(&g_var_prod, &graph.var_f, |a, b| a * b);
    // cross_sq = cross * cross
    let g_cross = zip_map(&g_cross_sq, &graph.cross, |a, b| 2.0 * a * b);
    // cross = mu_fm - mu_f_mu_m ; var_f = mu_f2 - mu_f_sq ; var_m = mu_m2 - mu_m_sq
    let g_mu_fm = g_cross.clone();
    let g_mu_f_mu_m: Vec<f64> = g_cross.iter().map(|x| -x).collect();
    let g_mu_f2 = g_var_f.clone();
    let g_mu_f_sq: Vec<f64> = g_var_f.iter().map(|x| -x).collect();
    let g_mu_m2 = g_var_m.clone();
    let g_mu_m_sq: Vec<f64> = g_var_m.iter().map(|x| -x).collect();
    // mu_f_mu_m = mu_f * mu_m ; mu_f_sq = mu_f^2 ; mu_m_sq = mu_m^2
    let mut g_mu_f = vec![0.0; n];
    let mut g_mu_m = vec![0.0; n];
    for v in 0..n {
        g_mu_f[v] = g_mu_f_mu_m[v] * graph.mu_m[v] + 2.0 * g_mu_f_sq[v] * graph.mu_f[v];
        g_mu_m[v] = g_mu_f_mu_m[v] * graph.mu_f[v] + 2.0 * g_mu_m_sq[v] * graph.mu_m[v];
    }
    // mu_x = w * x ; the zero-padded symmetric box filter is self-adjoint
    let g_f_direct = filtered(&g_mu_f, dims, &kernel);
    let g_m_direct = filtered(&g_mu_m, dims, &kernel);
    let g_f2 = filtered(&g_mu_f2, dims, &kernel);
    let g_m2 = filtered(&g_mu_m2, dims, &kernel);
    let g_fm = filtered(&g_mu_fm, dims, &kernel);
    // f2 = F*F ; m2 = M*M ; fm = F*M
    let (fd, md) = (f.data(), m.data());
    let mut df = vec![0.0; n];
    let mut dm = vec![0.0; n];
    for v in 0..n {
        df[v] = g_f_direct[v] + 2.0 * fd[v] * g_f2[v] + md[v] * g_fm[v];
        dm[v] = g_m_direct[v] + 2.0 * md[v] * g_m2[v] + fd[v] * g_fm[v];
    }
    Ok((
        Volume3::from_vec(dims, df)?.with_geometry_of(f),
        Volume3::from_vec(dims, dm)?.with_geometry_of(m),
    ))
}
