//! Predicted estimator quality: gate-eigenvalue covariance, the figure of
//! merit and its variance, the NRMSE distribution and the repeated-layer toy
//! model in closed form.
//!
//! All quantities are reported per unit of time-normalised shots, i.e. with
//! `S' = 1`: `trace_sigma` is `tr(Sigma) S'` and the merit is independent of
//! the budget.

use std::collections::HashMap;
use std::sync::Arc;

use faer::linalg::matmul::triangular::{self, BlockStructure};
use faer::linalg::solvers::DenseSolveCore;
use faer::{Accum, Mat, MatRef, Par, Side};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{BlockCovariance, DesignError, ExperimentalDesign, LsKind, TupleBlock};
use crate::noise::NoiseModel;

/// Largest parameter count handled by the dense merit path.
pub const DENSE_LIMIT: usize = 7000;
/// Largest covariance size for the eigenvalue-based NRMSE distribution.
pub const DISTRIBUTION_LIMIT: usize = 5000;

/// Smallest pivot of the normal matrix factorisation, relative to its
/// diagonal entry, before the design counts as rank deficient.
const PIVOT_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MeritError {
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("normal matrix is singular; columns never estimated: {0:?}")]
    RankDeficient(Vec<usize>),
    #[error("normal matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("circuit eigenvalue of row {row} in tuple {tuple} has zero variance")]
    ZeroVariance { tuple: usize, row: usize },
    #[error("{0} parameters exceed the dense limit of {DENSE_LIMIT}")]
    TooLarge(usize),
    #[error("{0} parameters exceed the distribution limit; use the moment approximation")]
    DistributionTooLarge(usize),
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("eigendecomposition failed")]
    Eigen,
    #[error("invalid toy-model parameter: {0}")]
    Toy(String),
}

/// Scale-free merit summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeritReport {
    pub ls_kind: LsKind,
    /// `tr(Sigma) S'`.
    pub trace_sigma: f64,
    /// `tr(Sigma^2) S'^2`.
    pub trace_sigma_sq: f64,
    pub merit: f64,
    pub variance: f64,
    pub n: usize,
    pub time_factor: f64,
}

impl MeritReport {
    fn from_traces(ls_kind: LsKind, t1: f64, t2: f64, n: usize, time_factor: f64) -> Self {
        let (merit, variance) = merit_from_traces(t1, t2, n);
        Self {
            ls_kind,
            trace_sigma: t1,
            trace_sigma_sq: t2,
            merit,
            variance,
            n,
            time_factor,
        }
    }

    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Second-order expressions for the expected NRMSE and its variance.
pub fn merit_from_traces(t1: f64, t2: f64, n: usize) -> (f64, f64) {
    let n = n as f64;
    let r = t2 / (t1 * t1);
    let merit = (t1 / n).sqrt() * (1.0 - r / 4.0);
    let variance = t2 / (2.0 * n * t1) * (1.0 - r / 8.0);
    (merit, variance)
}

/// `(dF/dt1, dF/dt2)`.
fn merit_trace_derivatives(t1: f64, t2: f64, n: usize) -> (f64, f64) {
    let c = 1.0 / (n as f64).sqrt();
    (
        c * (0.5 / t1.sqrt() + 0.375 * t2 / t1.powf(2.5)),
        -c * 0.25 / t1.powf(1.5),
    )
}

/// Symmetric sparse matrix stored as its upper triangle.
#[derive(Clone, Debug, Default)]
pub struct SymSparse {
    entries: Vec<(u32, u32, f64)>,
}

impl SymSparse {
    fn from_upper(mut v: Vec<(u32, u32, f64)>) -> Self {
        v.sort_unstable_by_key(|e| (e.0, e.1));
        let mut out: Vec<(u32, u32, f64)> = Vec::with_capacity(v.len());
        for e in v {
            match out.last_mut() {
                Some(l) if l.0 == e.0 && l.1 == e.1 => l.2 += e.2,
                _ => out.push(e),
            }
        }
        out.retain(|e| e.2 != 0.0);
        Self { entries: out }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// `m += alpha * self`, both triangles.
    fn add_to(&self, m: &mut Mat<f64>, alpha: f64) {
        for &(i, j, v) in &self.entries {
            let (i, j) = (i as usize, j as usize);
            m[(i, j)] += alpha * v;
            if i != j {
                m[(j, i)] += alpha * v;
            }
        }
    }
}

/// Accumulates `w a a^T` and `v (a b^T + b a^T)` for sparse integer rows.
#[derive(Default)]
struct OuterProducts {
    coo: Vec<(u32, u32, f64)>,
}

impl OuterProducts {
    fn rank_one(&mut self, (c, p): (&[u32], &[u16]), w: f64) {
        for k in 0..c.len() {
            for l in k..c.len() {
                self.coo.push((c[k], c[l], w * (p[k] as f64) * (p[l] as f64)));
            }
        }
    }

    fn rank_two(&mut self, (ca, pa): (&[u32], &[u16]), (cb, pb): (&[u32], &[u16]), v: f64) {
        for k in 0..ca.len() {
            for l in 0..cb.len() {
                let x = v * (pa[k] as f64) * (pb[l] as f64);
                let (i, j) = (ca[k].min(cb[l]), ca[k].max(cb[l]));
                self.coo.push((i, j, if i == j { 2.0 * x } else { x }));
            }
        }
    }

    fn finish(self) -> SymSparse {
        SymSparse::from_upper(self.coo)
    }
}

/// Weight-independent normal-equation terms of one tuple.
///
/// With scale-free weight `s` the block contributes `g(s) G + k(s) H` to the
/// estimator's bread and meat: WLS uses `s G, s H`, OLS `G, H / s` and GLS
/// only `s G`.
#[derive(Clone, Debug)]
pub struct BlockTerms {
    pub g: SymSparse,
    pub h: Option<SymSparse>,
}

impl BlockTerms {
    pub fn build(block: &TupleBlock, cov: &BlockCovariance, kind: LsKind, tuple: usize) -> Result<Self, MeritError> {
        if let Some(row) = cov.diag.iter().position(|&d| !(d > 0.0)) {
            return Err(MeritError::ZeroVariance { tuple, row });
        }
        let a = &block.matrix;
        Ok(match kind {
            LsKind::Ols => {
                let mut g = OuterProducts::default();
                let mut h = OuterProducts::default();
                for i in 0..a.len() {
                    g.rank_one(a.row(i), 1.0);
                    h.rank_one(a.row(i), cov.diag[i]);
                }
                for &(i, j, v) in &cov.off {
                    h.rank_two(a.row(i as usize), a.row(j as usize), v);
                }
                Self {
                    g: g.finish(),
                    h: Some(h.finish()),
                }
            }
            LsKind::Wls => {
                let mut g = OuterProducts::default();
                for i in 0..a.len() {
                    g.rank_one(a.row(i), 1.0 / cov.diag[i]);
                }
                let mut h = OuterProducts { coo: g.coo.clone() };
                for &(i, j, v) in &cov.off {
                    let w = v / (cov.diag[i as usize] * cov.diag[j as usize]);
                    h.rank_two(a.row(i as usize), a.row(j as usize), w);
                }
                Self {
                    g: g.finish(),
                    h: Some(h.finish()),
                }
            }
            LsKind::Gls => {
                let mut g = OuterProducts::default();
                for comp in covariance_components(cov) {
                    if comp.len() == 1 {
                        let i = comp[0];
                        g.rank_one(a.row(i), 1.0 / cov.diag[i]);
                        continue;
                    }
                    let m = comp.len();
                    let pos: std::collections::HashMap<usize, usize> =
                        comp.iter().enumerate().map(|(k, &r)| (r, k)).collect();
                    let mut om = Mat::<f64>::zeros(m, m);
                    for (k, &r) in comp.iter().enumerate() {
                        om[(k, k)] = cov.diag[r];
                    }
                    for &(i, j, v) in &cov.off {
                        if let (Some(&k), Some(&l)) = (pos.get(&(i as usize)), pos.get(&(j as usize))) {
                            om[(k, l)] = v;
                            om[(l, k)] = v;
                        }
                    }
                    let inv = om
                        .llt(Side::Lower)
                        .map_err(|_| MeritError::NotPositiveDefinite)?
                        .inverse();
                    for k in 0..m {
                        g.rank_one(a.row(comp[k]), inv[(k, k)]);
                        for l in k + 1..m {
                            let v = inv[(k, l)];
                            if v != 0.0 {
                                g.rank_two(a.row(comp[k]), a.row(comp[l]), v);
                            }
                        }
                    }
                }
                Self {
                    g: g.finish(),
                    h: None,
                }
            }
        })
    }
}

/// Connected components of the off-diagonal covariance graph.
fn covariance_components(cov: &BlockCovariance) -> Vec<Vec<usize>> {
    let n = cov.diag.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(i, j, _) in &cov.off {
        let (a, b) = (find(&mut parent, i as usize), find(&mut parent, j as usize));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Union of the sparsity patterns of a model's terms, with each term's
/// entries located in it.
#[derive(Clone, Debug, Default)]
struct TermPattern {
    entries: Vec<(u32, u32)>,
    g_index: Vec<Vec<u32>>,
    h_index: Vec<Vec<u32>>,
}

impl TermPattern {
    fn new(terms: &[Arc<BlockTerms>]) -> Self {
        let mut all: Vec<(u32, u32)> = terms
            .iter()
            .flat_map(|t| {
                let h = t.h.iter().flat_map(|h| h.entries.iter());
                t.g.entries.iter().chain(h).map(|e| (e.0, e.1))
            })
            .collect();
        all.sort_unstable();
        all.dedup();
        let locate = |m: &SymSparse| -> Vec<u32> {
            m.entries
                .iter()
                .map(|e| all.binary_search(&(e.0, e.1)).expect("entry in pattern") as u32)
                .collect()
        };
        let g_index = terms.iter().map(|t| locate(&t.g)).collect();
        let h_index = terms
            .iter()
            .map(|t| t.h.as_ref().map(locate).unwrap_or_default())
            .collect();
        Self {
            entries: all,
            g_index,
            h_index,
        }
    }
}

/// Merit evaluator for a fixed tuple set, noise model and estimator.
#[derive(Clone, Debug)]
pub struct MeritModel {
    kind: LsKind,
    lambda_sq: Vec<f64>,
    durations: Vec<f64>,
    terms: Vec<Arc<BlockTerms>>,
    pattern: Arc<TermPattern>,
}

/// A merit evaluation that retains the matrices needed for derivatives.
///
/// With `M` the inverse bread, `D^2 = diag(lambda^2)`, `U = D^2 M`,
/// `Y = Sigma' U` and `Z = Sigma' D^2 Sigma'`, the trace derivatives need
/// entries of `U^T M`, `U^T Sigma'`, `U^T Y` and `U^T Z`, and only on the
/// terms' sparsity patterns.
pub struct MeritEvaluation {
    pub report: MeritReport,
    kind: LsKind,
    /// Scale-free weights `s_U = Gamma_U / tau(Gamma)`.
    pub s: Vec<f64>,
    dft: (f64, f64),
    u: Mat<f64>,
    m: Mat<f64>,
    sp: Mat<f64>,
    y: Mat<f64>,
    z: Mat<f64>,
    pattern: Arc<TermPattern>,
    /// Symmetrised entries of `(P1, R1, P2, R2)` on the pattern.
    values: Vec<[f64; 4]>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, ra) = a.split_at(a.len() - a.len() % 8);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(8).zip(cb.chunks_exact(8)) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    acc.iter().sum::<f64>() + tail
}

/// Lower triangle of `a * b` mirrored to a full matrix, for products known
/// to be symmetric.
fn symmetric_product(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let n = a.nrows();
    let mut out = Mat::<f64>::zeros(n, n);
    triangular::matmul(
        out.as_mut(),
        BlockStructure::TriangularLower,
        Accum::Replace,
        a,
        BlockStructure::Rectangular,
        b,
        BlockStructure::Rectangular,
        1.0,
        Par::Seq,
    );
    for j in 0..n {
        for i in 0..j {
            out[(i, j)] = out[(j, i)];
        }
    }
    out
}

impl MeritModel {
    pub fn new(design: &ExperimentalDesign, noise: &NoiseModel, kind: LsKind) -> Result<Self, MeritError> {
        let x = noise.log_eigenvalues();
        noise
            .check_circuit(design.circuit())
            .map_err(|e| DesignError::Noise(e.to_string()))?;
        let tau_basic = design.basic_time_factor();
        let terms = design
            .blocks()
            .par_iter()
            .enumerate()
            .map(|(k, b)| {
                let cov = b.relative_covariance(&x, tau_basic);
                BlockTerms::build(b, &cov, kind, k).map(Arc::new)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_terms(kind, noise, design.durations(), terms))
    }

    pub fn from_terms(kind: LsKind, noise: &NoiseModel, durations: Vec<f64>, terms: Vec<Arc<BlockTerms>>) -> Self {
        assert_eq!(durations.len(), terms.len());
        Self {
            kind,
            lambda_sq: noise.eigenvalues().iter().map(|l| l * l).collect(),
            durations,
            pattern: Arc::new(TermPattern::new(&terms)),
            terms,
        }
    }

    pub fn kind(&self) -> LsKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.lambda_sq.len()
    }

    pub fn terms(&self) -> &[Arc<BlockTerms>] {
        &self.terms
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    fn check_weights(&self, weights: &[f64]) -> Result<(), MeritError> {
        if weights.len() != self.terms.len() {
            return Err(MeritError::Weights(format!(
                "{} weights for {} tuples",
                weights.len(),
                self.terms.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(MeritError::Weights("weights must be non-negative with positive sum".into()));
        }
        if self.dim() > DENSE_LIMIT {
            return Err(MeritError::TooLarge(self.dim()));
        }
        Ok(())
    }

    /// Scale-free weights; unnormalised input is accepted.
    fn scale_free(&self, weights: &[f64]) -> (Vec<f64>, f64) {
        let total: f64 = weights.iter().sum();
        let tau: f64 = weights.iter().zip(&self.durations).map(|(w, t)| w / total * t).sum();
        (weights.iter().map(|w| w / total / tau).collect(), tau)
    }

    fn normal_matrices(&self, s: &[f64]) -> (Mat<f64>, Option<Mat<f64>>) {
        let n = self.dim();
        let mut g = Mat::<f64>::zeros(n, n);
        let mut k = (self.kind != LsKind::Gls).then(|| Mat::<f64>::zeros(n, n));
        for (t, &s) in self.terms.iter().zip(s) {
            if s == 0.0 {
                continue;
            }
            match self.kind {
                LsKind::Ols => {
                    t.g.add_to(&mut g, 1.0);
                    t.h.as_ref().unwrap().add_to(k.as_mut().unwrap(), 1.0 / s);
                }
                LsKind::Wls => {
                    t.g.add_to(&mut g, s);
                    t.h.as_ref().unwrap().add_to(k.as_mut().unwrap(), s);
                }
                LsKind::Gls => t.g.add_to(&mut g, s),
            }
        }
        (g, k)
    }

    fn invert(&self, g: &Mat<f64>) -> Result<Mat<f64>, MeritError> {
        let n = g.nrows();
        let zero: Vec<usize> = (0..n).filter(|&i| g[(i, i)] == 0.0).collect();
        if !zero.is_empty() {
            return Err(MeritError::RankDeficient(zero));
        }
        let llt = g.llt(Side::Lower).map_err(|_| MeritError::NotPositiveDefinite)?;
        // a pivot that lost nearly all of its diagonal means a direction the
        // design cannot resolve, even if the factorisation went through
        let l = llt.L();
        let weak: Vec<usize> = (0..n).filter(|&i| l[(i, i)] * l[(i, i)] < PIVOT_FLOOR * g[(i, i)]).collect();
        if !weak.is_empty() {
            return Err(MeritError::RankDeficient(weak));
        }
        let inv = llt.inverse();
        if inv.col_iter().any(|c| c.iter().any(|x| !x.is_finite())) {
            return Err(MeritError::NotPositiveDefinite);
        }
        Ok(inv)
    }

    /// `(M, Sigma')` with `M` the inverse bread.
    fn covariance_parts(&self, s: &[f64]) -> Result<(Mat<f64>, Mat<f64>), MeritError> {
        let (g, k) = self.normal_matrices(s);
        let m = self.invert(&g)?;
        drop(g);
        let sp = match k {
            Some(k) => {
                let km = &k * &m;
                symmetric_product(m.as_ref(), km.as_ref())
            }
            None => m.clone(),
        };
        Ok((m, sp))
    }

    /// Covariance of the estimated log gate eigenvalues for the given weights.
    pub fn log_covariance(&self, weights: &[f64]) -> Result<Mat<f64>, MeritError> {
        self.check_weights(weights)?;
        let (s, _) = self.scale_free(weights);
        Ok(self.covariance_parts(&s)?.1)
    }

    /// Covariance of the estimated gate eigenvalues, the log covariance scaled by the eigenvalues on both sides.
    pub fn covariance(&self, weights: &[f64]) -> Result<Mat<f64>, MeritError> {
        let sp = self.log_covariance(weights)?;
        let l: Vec<f64> = self.lambda_sq.iter().map(|x| x.sqrt()).collect();
        Ok(Mat::from_fn(sp.nrows(), sp.ncols(), |i, j| l[i] * sp[(i, j)] * l[j]))
    }

    pub fn evaluate(&self, weights: &[f64]) -> Result<MeritReport, MeritError> {
        let sp = self.log_covariance(weights)?;
        let (_, tau) = self.scale_free(weights);
        let (t1, t2) = traces(&sp, &self.lambda_sq);
        Ok(MeritReport::from_traces(self.kind, t1, t2, self.dim(), tau))
    }

    /// Evaluates the merit and keeps what is needed for its gradient.
    pub fn evaluate_with_gradient(&self, weights: &[f64]) -> Result<MeritEvaluation, MeritError> {
        self.check_weights(weights)?;
        let (s, tau) = self.scale_free(weights);
        let (m, sp) = self.covariance_parts(&s)?;
        let d2 = &self.lambda_sq;
        let n = self.dim();
        let u = Mat::from_fn(n, n, |i, j| d2[i] * m[(i, j)]);
        let y = &sp * &u;
        let (z, t1, t2) = if self.kind == LsKind::Gls {
            // Sigma' = M, so Z = M D^2 M = Y
            let (t1, t2) = traces(&sp, d2);
            (Mat::zeros(0, 0), t1, t2)
        } else {
            let dsp = Mat::from_fn(n, n, |i, j| d2[i] * sp[(i, j)]);
            let z = symmetric_product(sp.as_ref(), dsp.as_ref());
            let t1: f64 = (0..n).map(|i| d2[i] * sp[(i, i)]).sum();
            let t2: f64 = (0..n).map(|i| d2[i] * z[(i, i)]).sum();
            (z, t1, t2)
        };
        let report = MeritReport::from_traces(self.kind, t1, t2, n, tau);
        let mut e = MeritEvaluation {
            report,
            kind: self.kind,
            s,
            dft: merit_trace_derivatives(t1, t2, n),
            u,
            m,
            sp,
            y,
            z,
            pattern: self.pattern.clone(),
            values: Vec::new(),
        };
        e.values = self
            .pattern
            .entries
            .iter()
            .map(|&(i, j)| e.entry_values(i as usize, j as usize))
            .collect();
        Ok(e)
    }

    fn ds_all(&self, e: &MeritEvaluation) -> Vec<f64> {
        (0..self.terms.len())
            .map(|k| e.ds_indexed(&self.terms[k], k, e.s[k]))
            .collect()
    }

    /// Merit and its gradient with respect to the (normalised) shot weights.
    pub fn gradient(&self, weights: &[f64]) -> Result<(MeritReport, Vec<f64>), MeritError> {
        let e = self.evaluate_with_gradient(weights)?;
        let ds = self.ds_all(&e);
        let total: f64 = weights.iter().sum();
        let gam: Vec<f64> = weights.iter().map(|w| w / total).collect();
        Ok((e.report.clone(), weight_gradient_from_s(&gam, &self.durations, &ds)))
    }

    /// Merit and its gradient with respect to the shot log-weights, with
    /// `Gamma_T = exp(-gamma_T) / sum_U exp(-gamma_U)`.
    pub fn log_weight_gradient(&self, weights: &[f64]) -> Result<(MeritReport, Vec<f64>), MeritError> {
        let (r, dg) = self.gradient(weights)?;
        let total: f64 = weights.iter().sum();
        let gam: Vec<f64> = weights.iter().map(|w| w / total).collect();
        Ok((r, log_weight_chain(&gam, &dg)))
    }
}

/// `dF/dGamma` from `dF/ds` with `s_U = Gamma_U / sum_V Gamma_V tau_V`.
pub fn weight_gradient_from_s(gamma: &[f64], durations: &[f64], ds: &[f64]) -> Vec<f64> {
    let tau: f64 = gamma.iter().zip(durations).map(|(g, t)| g * t).sum();
    let cross: f64 = gamma.iter().zip(ds).map(|(g, d)| g * d).sum::<f64>() / (tau * tau);
    ds.iter()
        .zip(durations)
        .map(|(d, t)| d / tau - t * cross)
        .collect()
}

/// `dF/dgamma_T = sum_U dF/dGamma_U (Gamma_U Gamma_T - delta_UT Gamma_T)`.
pub fn log_weight_chain(gamma: &[f64], dgamma: &[f64]) -> Vec<f64> {
    let m: f64 = gamma.iter().zip(dgamma).map(|(g, d)| g * d).sum();
    gamma.iter().zip(dgamma).map(|(g, d)| g * (m - d)).collect()
}

/// `(tr(D Sigma' D), tr((D Sigma' D)^2))` with `D^2 = diag(d2)`.
fn traces(sp: &Mat<f64>, d2: &[f64]) -> (f64, f64) {
    let n = sp.nrows();
    let t1 = (0..n).map(|i| d2[i] * sp[(i, i)]).sum();
    let mut t2 = 0.0;
    for j in 0..n {
        let col = sp.col(j);
        for i in 0..n {
            let v = col[i];
            t2 += d2[i] * v * v * d2[j];
        }
    }
    (t1, t2)
}

impl MeritEvaluation {
    /// `P_ij + P_ji` off the diagonal and `P_ii` on it, for
    /// `P = (sym(U^T Sigma'), U^T M, sym(U^T Z), U^T Y)`.
    fn entry_values(&self, i: usize, j: usize) -> [f64; 4] {
        let ui = self.u.col_as_slice(i);
        let uj = self.u.col_as_slice(j);
        let second = |x: &Mat<f64>| -> f64 {
            if i == j {
                dot(ui, x.col_as_slice(i))
            } else {
                2.0 * dot(ui, x.col_as_slice(j))
            }
        };
        let r1 = second(&self.m);
        let r2 = second(&self.y);
        if self.kind == LsKind::Gls {
            return [0.0, r1, 0.0, r2];
        }
        let paired = |x: &Mat<f64>| -> f64 {
            if i == j {
                dot(ui, x.col_as_slice(i))
            } else {
                dot(ui, x.col_as_slice(j)) + dot(uj, x.col_as_slice(i))
            }
        };
        [paired(&self.sp), r1, paired(&self.z), r2]
    }

    fn combine(&self, dots: impl Fn(bool, usize) -> f64, s: f64) -> f64 {
        // dots(h, k): inner product of G (h = false) or H with P1, R1, P2, R2
        let (a1, a2) = self.dft;
        let (dt1, dt2) = match self.kind {
            LsKind::Gls => (-dots(false, 1), -2.0 * dots(false, 3)),
            LsKind::Wls => (
                dots(true, 1) - 2.0 * dots(false, 0),
                2.0 * dots(true, 3) - 4.0 * dots(false, 2),
            ),
            LsKind::Ols => {
                if !(s > 0.0) {
                    return f64::INFINITY;
                }
                let kp = -1.0 / (s * s);
                (kp * dots(true, 1), 2.0 * kp * dots(true, 3))
            }
        };
        a1 * dt1 + a2 * dt2
    }

    fn ds_indexed(&self, t: &BlockTerms, k: usize, s: f64) -> f64 {
        let pat = &*self.pattern;
        self.combine(
            |h, q| {
                let (m, idx) = if h {
                    (t.h.as_ref().expect("WLS and OLS terms carry H"), &pat.h_index[k])
                } else {
                    (&t.g, &pat.g_index[k])
                };
                m.entries
                    .iter()
                    .zip(idx)
                    .map(|(e, &p)| e.2 * self.values[p as usize][q])
                    .sum()
            },
            s,
        )
    }

    /// `dF/ds_U` for a block with current scale-free weight `s`.
    ///
    /// Also valid for a block outside the set at `s = 0` under WLS and GLS,
    /// giving the marginal value of adding it.
    pub fn ds(&self, t: &BlockTerms, s: f64) -> f64 {
        let mut cache: HashMap<(u32, u32), [f64; 4]> = HashMap::new();
        let mut value = |i: u32, j: u32| -> [f64; 4] {
            if let Ok(p) = self.pattern.entries.binary_search(&(i, j)) {
                return self.values[p];
            }
            *cache
                .entry((i, j))
                .or_insert_with(|| self.entry_values(i as usize, j as usize))
        };
        let mut sums = [[0.0f64; 4]; 2];
        for (h, m) in [(false, Some(&t.g)), (true, t.h.as_ref())] {
            let Some(m) = m else { continue };
            for &(i, j, v) in &m.entries {
                let x = value(i, j);
                for q in 0..4 {
                    sums[h as usize][q] += v * x[q];
                }
            }
        }
        self.combine(|h, q| sums[h as usize][q], s)
    }

    /// Exact first-order change of the merit when a new tuple of duration
    /// `tau_new` takes an infinitesimal share of the weight from the
    /// current set.
    ///
    /// Uses `sum_U s_U dF/ds_U = -F/2`, which holds because `F` is
    /// homogeneous of degree `-1/2` in `s`.
    pub fn insertion_slope(&self, t: &BlockTerms, tau_new: f64, time_factor: f64) -> f64 {
        let f = self.report.merit;
        (tau_new / time_factor) * f / 2.0 + self.ds(t, 0.0) / time_factor
    }
}

/// Merit and gradient by dense matrices, for cross-checking: builds the
/// full design matrix and `Omega'` and returns `(F, dF/dGamma)` using the
/// derivative of the traces with respect to `Omega'`.
pub fn dense_reference_gradient(
    design: &ExperimentalDesign,
    noise: &NoiseModel,
    kind: LsKind,
) -> Result<(f64, Vec<f64>), MeritError> {
    let m = design.row_count();
    let n = design.parameter_count();
    if m > 6000 {
        return Err(MeritError::TooLarge(m));
    }
    let x = noise.log_eigenvalues();
    let lam: Vec<f64> = noise.eigenvalues().to_vec();
    let tau_basic = design.basic_time_factor();
    let gam = design.weights();
    let durations = design.durations();
    let tau: f64 = gam.iter().zip(&durations).map(|(g, t)| g * t).sum();
    let mut a = Mat::<f64>::zeros(m, n);
    for (r, c, v) in design.matrix_triplets() {
        a[(r, c)] = v as f64;
    }
    // Omega* blocks and the block index of each row
    let mut ostar = Mat::<f64>::zeros(m, m);
    let mut block_of = vec![0usize; m];
    for (k, b) in design.blocks().iter().enumerate() {
        let off = design.row_offset(k);
        let cov = b.relative_covariance(&x, tau_basic);
        for i in 0..b.rows() {
            ostar[(off + i, off + i)] = cov.diag[i];
            block_of[off + i] = k;
        }
        for &(i, j, v) in &cov.off {
            ostar[(off + i as usize, off + j as usize)] = v;
            ostar[(off + j as usize, off + i as usize)] = v;
        }
    }
    let omega = Mat::from_fn(m, m, |i, j| ostar[(i, j)] * tau / gam[block_of[i]]);
    let w = match kind {
        LsKind::Ols => Mat::<f64>::identity(m, m),
        LsKind::Wls => Mat::from_fn(m, m, |i, j| if i == j { 1.0 / omega[(i, i)] } else { 0.0 }),
        LsKind::Gls => omega
            .llt(Side::Lower)
            .map_err(|_| MeritError::NotPositiveDefinite)?
            .inverse(),
    };
    let at = a.transpose().to_owned();
    let atw = &at * &w;
    let bread = (&atw * &a)
        .llt(Side::Lower)
        .map_err(|_| MeritError::NotPositiveDefinite)?
        .inverse();
    let aplus = &bread * &atw;
    let astar = Mat::from_fn(n, m, |i, j| lam[i] * aplus[(i, j)]);
    let sigma = &(&astar * &omega) * astar.transpose();
    let t1: f64 = (0..n).map(|i| sigma[(i, i)]).sum();
    let t2: f64 = (0..n).map(|i| (0..n).map(|j| sigma[(i, j)].powi(2)).sum::<f64>()).sum();
    let (f, _) = merit_from_traces(t1, t2, n);
    let ata = astar.transpose() * &astar;
    let asa = &(astar.transpose() * &sigma) * &astar;
    let (d1, d2) = match kind {
        LsKind::Ols | LsKind::Gls => (ata, Mat::from_fn(m, m, |i, j| 2.0 * asa[(i, j)])),
        LsKind::Wls => {
            let resid = &(&a * &aplus) - Mat::<f64>::identity(m, m);
            let bmat = &(&omega * &w) * &resid;
            let c1 = &ata * &bmat;
            let c2 = &asa * &bmat;
            (
                Mat::from_fn(m, m, |i, j| ata[(i, j)] + if i == j { 2.0 * c1[(i, i)] } else { 0.0 }),
                Mat::from_fn(m, m, |i, j| 2.0 * asa[(i, j)] + if i == j { 4.0 * c2[(i, i)] } else { 0.0 }),
            )
        }
    };
    let (a1, a2) = merit_trace_derivatives(t1, t2, n);
    // d Omega'_U / d Gamma_T = (tau_T / Gamma_U - delta_UT tau / Gamma_T^2) Omega*_U
    let nb = design.blocks().len();
    let mut blk1 = vec![0.0; nb];
    let mut blk2 = vec![0.0; nb];
    for i in 0..m {
        for j in 0..m {
            let k = block_of[i];
            if block_of[j] != k || ostar[(i, j)] == 0.0 {
                continue;
            }
            blk1[k] += d1[(i, j)] * ostar[(i, j)];
            blk2[k] += d2[(i, j)] * ostar[(i, j)];
        }
    }
    let grad = (0..nb)
        .map(|t| {
            let mut g1 = 0.0;
            let mut g2 = 0.0;
            for u in 0..nb {
                let mut c = durations[t] / gam[u];
                if u == t {
                    c -= tau / (gam[t] * gam[t]);
                }
                g1 += c * blk1[u];
                g2 += c * blk2[u];
            }
            a1 * g1 + a2 * g2
        })
        .collect();
    Ok((f, grad))
}

/// Monte Carlo description of the predicted NRMSE distribution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NrmseDistribution {
    /// Eigenvalues of `Sigma S'`.
    pub eigenvalues: Vec<f64>,
    /// Sorted NRMSE samples.
    pub samples: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

impl NrmseDistribution {
    /// Samples `sqrt(sum_v sigma_v y_v / N)` with `y_v` chi-squared.
    pub fn from_covariance(sigma: &Mat<f64>, draws: usize, seed: u64) -> Result<Self, MeritError> {
        let n = sigma.nrows();
        if n > DISTRIBUTION_LIMIT {
            return Err(MeritError::DistributionTooLarge(n));
        }
        let eigenvalues = sigma
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|_| MeritError::Eigen)?;
        Ok(Self::from_eigenvalues(eigenvalues, draws, seed))
    }

    pub fn from_eigenvalues(eigenvalues: Vec<f64>, draws: usize, seed: u64) -> Self {
        let n = eigenvalues.len() as f64;
        let ev: Vec<f64> = eigenvalues.iter().map(|&e| e.max(0.0)).collect();
        let chunk = 4096;
        let mut samples: Vec<f64> = (0..draws.div_ceil(chunk))
            .into_par_iter()
            .flat_map_iter(|c| {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                rng.set_stream(c as u64);
                let len = chunk.min(draws - c * chunk);
                let ev = &ev;
                (0..len)
                    .map(move |_| {
                        let q: f64 = ev
                            .iter()
                            .map(|&e| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                e * z * z
                            })
                            .sum();
                        (q / n).sqrt()
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        samples.sort_unstable_by(f64::total_cmp);
        let len = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / len;
        let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (len - 1.0)).sqrt();
        Self {
            eigenvalues,
            samples,
            mean,
            sd,
        }
    }

    /// Standard error of the sample mean.
    pub fn mean_standard_error(&self) -> f64 {
        self.sd / (self.samples.len() as f64).sqrt()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.samples.partition_point(|&s| s <= x) as f64 / self.samples.len() as f64
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let k = ((p.clamp(0.0, 1.0)) * (self.samples.len() - 1) as f64).round() as usize;
        self.samples[k]
    }
}

/// Toy model of one layer of single-qubit Pauli gates in two tuples, a
/// shallow one repeated `phi1` times and a deep one repeated `phi1 + phi`
/// times. The measurement time is in units of the layer time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub gate_eigenvalue: f64,
    pub spam_eigenvalue: f64,
    pub measurement_time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyOptimum {
    /// Optimal integer repetition number of the deep tuple.
    pub repetitions: u64,
    /// Continuous optimum before rounding.
    pub repetitions_continuous: f64,
    /// Shot weight of the deep tuple.
    pub deep_weight: f64,
    pub merit: f64,
}

impl ToyModel {
    pub fn new(gate_eigenvalue: f64, spam_eigenvalue: f64, measurement_time: f64) -> Result<Self, MeritError> {
        if !(gate_eigenvalue > 0.0 && gate_eigenvalue <= 1.0) {
            return Err(MeritError::Toy(format!("gate eigenvalue {gate_eigenvalue} outside (0, 1]")));
        }
        if !(spam_eigenvalue > 0.0 && spam_eigenvalue < 1.0) {
            return Err(MeritError::Toy(format!("SPAM eigenvalue {spam_eigenvalue} outside (0, 1)")));
        }
        if !(measurement_time > 0.0) {
            return Err(MeritError::Toy(format!("measurement time {measurement_time} must be positive")));
        }
        Ok(Self {
            gate_eigenvalue,
            spam_eigenvalue,
            measurement_time,
        })
    }

    fn f_terms(&self, phi1: f64, phi: f64) -> (f64, f64) {
        let l2 = self.gate_eigenvalue * self.gate_eigenvalue;
        let m2 = self.spam_eigenvalue * self.spam_eigenvalue;
        let f1 = l2 * (self.gate_eigenvalue.powf(-2.0 * phi1) - m2) / (phi * phi);
        let f2 = l2 * (self.gate_eigenvalue.powf(-2.0 * (phi1 + phi)) - m2) / (phi * phi);
        (f1, f2)
    }

    fn check(&self, phi1: f64, phi: f64, gamma: f64) -> Result<(), MeritError> {
        if !(phi1 >= 0.0) || !(phi > 0.0) || !(gamma > 0.0 && gamma < 1.0) {
            return Err(MeritError::Toy(format!("phi1 = {phi1}, phi = {phi}, gamma = {gamma}")));
        }
        Ok(())
    }

    /// Time-accounting merit for weight `gamma` on the deep tuple.
    pub fn merit(&self, phi1: f64, phi: f64, gamma: f64) -> Result<f64, MeritError> {
        self.check(phi1, phi, gamma)?;
        let t = self.measurement_time;
        let (f1, f2) = self.f_terms(phi1, phi);
        Ok(((2.0 * t + 1.0) * (t + phi1 + gamma * phi) / (4.0 * t * (t + 1.0))
            * (f1 / (1.0 - gamma) + f2 / gamma))
            .sqrt())
    }

    /// Merit counting samples only, ignoring circuit duration.
    pub fn merit_untimed(&self, phi1: f64, phi: f64, gamma: f64) -> Result<f64, MeritError> {
        self.check(phi1, phi, gamma)?;
        let (f1, f2) = self.f_terms(phi1, phi);
        Ok(((f1 / (1.0 - gamma) + f2 / gamma) / 2.0).sqrt())
    }

    pub fn optimal_weight(&self, phi1: f64, phi: f64) -> f64 {
        let (f1, f2) = self.f_terms(phi1, phi);
        let a = ((self.measurement_time + phi1) * f2).sqrt();
        let b = ((self.measurement_time + phi1 + phi) * f1).sqrt();
        a / (a + b)
    }

    pub fn optimal_weight_untimed(&self, phi1: f64, phi: f64) -> f64 {
        let (f1, f2) = self.f_terms(phi1, phi);
        f2.sqrt() / (f1.sqrt() + f2.sqrt())
    }

    /// Merit at the optimal weight.
    pub fn merit_at_optimal_weight(&self, phi1: f64, phi: f64) -> f64 {
        let t = self.measurement_time;
        let (f1, f2) = self.f_terms(phi1, phi);
        ((2.0 * t + 1.0) / (4.0 * t * (t + 1.0))).sqrt()
            * (((t + phi1) * f1).sqrt() + ((t + phi1 + phi) * f2).sqrt())
    }

    pub fn merit_untimed_at_optimal_weight(&self, phi1: f64, phi: f64) -> f64 {
        let (f1, f2) = self.f_terms(phi1, phi);
        (f1.sqrt() + f2.sqrt()) / 2f64.sqrt()
    }

    /// Optimal repetition number with the shallow tuple empty; `timed`
    /// selects the time-accounting merit.
    pub fn optimise(&self, timed: bool) -> ToyOptimum {
        let f = |phi: f64| {
            if timed {
                self.merit_at_optimal_weight(0.0, phi)
            } else {
                self.merit_untimed_at_optimal_weight(0.0, phi)
            }
        };
        // bracket on a log grid, then golden-section search in log(phi)
        let hi = (100.0 / (1.0 - self.gate_eigenvalue).max(1e-12)).clamp(10.0, 1e9);
        let grid: Vec<f64> = (0..=400).map(|k| (hi.ln() * k as f64 / 400.0).exp()).collect();
        let k = (0..grid.len())
            .min_by(|&a, &b| f(grid[a]).total_cmp(&f(grid[b])))
            .unwrap();
        let (mut a, mut b) = (grid[k.saturating_sub(1)].ln(), grid[(k + 1).min(grid.len() - 1)].ln());
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if f(c.exp()) < f(d.exp()) {
                b = d;
            } else {
                a = c;
            }
        }
        let cont = ((a + b) / 2.0).exp();
        let lo = cont.floor().max(1.0);
        let phi = if f(lo) <= f(lo + 1.0) { lo } else { lo + 1.0 };
        let gamma = if timed {
            self.optimal_weight(0.0, phi)
        } else {
            self.optimal_weight_untimed(0.0, phi)
        };
        ToyOptimum {
            repetitions: phi as u64,
            repetitions_continuous: cont,
            deep_weight: gamma,
            merit: f(phi),
        }
    }
}
