//! Gate noise estimation from outcome counts.
//!
//! Circuit eigenvalues are pooled per design row, turned into log
//! observations `b = -log(Lambda)` and fitted to the design matrix by
//! ordinary, weighted or feasible generalised least squares. Gate channels
//! are then recovered by the inverse Walsh-Hadamard transform followed by a
//! projection onto the probability simplex.

use std::collections::BTreeMap;
use std::str::FromStr;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::matmul::sparse_sparse_matmul;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Par, Side};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{Circuit, GateId};
use crate::design::{DesignError, ExperimentalDesign};
use crate::merit::DENSE_LIMIT;
use crate::noise::{project_simplex, tvd, wht_inverse, NoiseError, NoiseModel};
use crate::pauli::GateKind;
use crate::simulate::OutcomeDataset;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("dataset does not match the design: {0}")]
    Mismatch(String),
    #[error("design is rank deficient over columns {0:?}")]
    RankDeficient(Vec<usize>),
    #[error("normal equations are not positive definite")]
    Singular,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    Ols,
    #[default]
    Wls,
    Fgls,
}

impl std::fmt::Display for FitMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FitMethod::Ols => "ols",
            FitMethod::Wls => "wls",
            FitMethod::Fgls => "fgls",
        })
    }
}

impl FromStr for FitMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ols" => Ok(FitMethod::Ols),
            "wls" => Ok(FitMethod::Wls),
            "fgls" | "gls" => Ok(FitMethod::Fgls),
            _ => Err(format!("unknown fit method {s:?} (ols, wls, fgls)")),
        }
    }
}

/// Pooled circuit eigenvalue estimates, one per design row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitEstimates {
    pub lambda: Vec<f64>,
    pub shots: Vec<u64>,
    /// `(1 - Lambda^2) / shots`, infinite for rows without shots.
    pub variance: Vec<f64>,
}

impl CircuitEstimates {
    pub fn zero_shot_rows(&self) -> Vec<usize> {
        (0..self.shots.len()).filter(|&i| self.shots[i] == 0).collect()
    }
}

/// Shot-weighted pooling of every experiment measuring each row.
pub fn estimate_circuit_eigenvalues(
    design: &ExperimentalDesign,
    data: &OutcomeDataset,
) -> Result<CircuitEstimates, EstimationError> {
    let h = &data.header;
    if h.tuples != design.tuples() {
        return Err(EstimationError::Mismatch("tuple lists differ".into()));
    }
    let block_rows: Vec<usize> = design.blocks().iter().map(|b| b.rows()).collect();
    if h.block_rows != block_rows {
        return Err(EstimationError::Mismatch("row counts differ".into()));
    }
    data.validate().map_err(|e| EstimationError::Mismatch(e.to_string()))?;
    let rows = design.row_count();
    let mut plus = vec![0u64; rows];
    let mut shots = vec![0u64; rows];
    let mut at = 0;
    for e in &h.experiments {
        let off = design.row_offset(e.tuple);
        for &r in &e.rows {
            plus[off + r as usize] += data.counts[at];
            shots[off + r as usize] += e.shots;
            at += 1;
        }
    }
    let lambda: Vec<f64> = plus
        .iter()
        .zip(&shots)
        .map(|(&p, &s)| if s == 0 { f64::NAN } else { 2.0 * p as f64 / s as f64 - 1.0 })
        .collect();
    let variance = lambda
        .iter()
        .zip(&shots)
        .map(|(&l, &s)| if s == 0 { f64::INFINITY } else { (1.0 - l * l) / s as f64 })
        .collect();
    Ok(CircuitEstimates {
        lambda,
        shots,
        variance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Largest tuple block the generalised fit whitens densely; larger
    /// designs are fitted by weighted least squares.
    pub gls_block_limit: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            tolerance: 1e-10,
            gls_block_limit: 4096,
        }
    }
}

/// Fitted gate eigenvalues with fit diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateFit {
    /// Requested method.
    pub method: FitMethod,
    /// Method actually used after size guards.
    pub method_used: FitMethod,
    /// Gate log-eigenvalues `-log(lambda)` after zeroing negatives.
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub rows_used: usize,
    pub rows_without_shots: usize,
    /// Rows whose estimate was raised to the floor `1 / (2 shots)`.
    pub rows_floored: usize,
    /// Negative log-eigenvalues set to zero, i.e. eigenvalues clipped to 1.
    pub clipped_to_one: usize,
}

/// Log observations, WLS weights and usable rows.
struct Observations {
    b: Vec<f64>,
    w: Vec<f64>,
    used: Vec<bool>,
    floored: usize,
}

fn observations(est: &CircuitEstimates) -> Observations {
    let mut floored = 0;
    let n = est.lambda.len();
    let (mut b, mut w, mut used) = (vec![0.0; n], vec![0.0; n], vec![false; n]);
    for i in 0..n {
        let s = est.shots[i];
        if s == 0 {
            continue;
        }
        let s = s as f64;
        let floor = 1.0 / (2.0 * s);
        let mut l = est.lambda[i];
        if l < floor {
            l = floor;
            floored += 1;
        }
        b[i] = -l.ln();
        // a row seen all +1 has a zero sample variance; one flip's worth
        // keeps its weight finite
        let v = (1.0 - l * l).max(1.0 / s) / (s * l * l);
        w[i] = 1.0 / v;
        used[i] = true;
    }
    Observations { b, w, used, floored }
}

/// Solves the weighted normal equations by sparse Cholesky.
fn sparse_weighted_solve(
    design: &ExperimentalDesign,
    obs: &Observations,
    weighted: bool,
) -> Result<Vec<f64>, EstimationError> {
    let n = design.parameter_count();
    let rows = design.row_count();
    let mut fwd = Vec::new();
    let mut rev = Vec::new();
    let mut rhs = vec![0.0; n];
    let mut coverage = vec![false; n];
    let mut at = 0;
    for b in design.blocks() {
        for i in 0..b.rows() {
            let g = at + i;
            if !obs.used[g] {
                continue;
            }
            let sw = if weighted { obs.w[g].sqrt() } else { 1.0 };
            let (cols, pow) = b.matrix.row(i);
            for (&c, &p) in cols.iter().zip(pow) {
                let v = sw * p as f64;
                fwd.push(Triplet::new(g, c as usize, v));
                rev.push(Triplet::new(c as usize, g, v));
                rhs[c as usize] += v * sw * obs.b[g];
                coverage[c as usize] = true;
            }
        }
        at += b.rows();
    }
    let missing: Vec<usize> = (0..n).filter(|&c| !coverage[c]).collect();
    if !missing.is_empty() {
        return Err(EstimationError::RankDeficient(missing));
    }
    let a = SparseColMat::<usize, f64>::try_new_from_triplets(rows, n, &fwd).map_err(|_| EstimationError::Singular)?;
    let at = SparseColMat::<usize, f64>::try_new_from_triplets(n, rows, &rev).map_err(|_| EstimationError::Singular)?;
    drop((fwd, rev));
    let normal = sparse_sparse_matmul(at.as_ref(), a.as_ref(), 1.0, Par::Seq).map_err(|_| EstimationError::Singular)?;
    let llt = normal.sp_cholesky(Side::Lower).map_err(|_| EstimationError::Singular)?;
    let x = llt.solve(Mat::from_fn(n, 1, |i, _| rhs[i]));
    let x: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(EstimationError::Singular);
    }
    Ok(x)
}

/// One generalised least-squares solve with the log-estimator covariance
/// evaluated at `x_model`.
fn gls_solve(
    design: &ExperimentalDesign,
    obs: &Observations,
    shots_per_experiment: &[f64],
    x_model: &[f64],
) -> Result<Vec<f64>, EstimationError> {
    let n = design.parameter_count();
    let parts = design
        .blocks()
        .par_iter()
        .enumerate()
        .map(|(t, block)| -> Result<Option<(Vec<usize>, Mat<f64>, Vec<f64>)>, EstimationError> {
            let off = design.row_offset(t);
            let rows: Vec<usize> = (0..block.rows()).filter(|&i| obs.used[off + i]).collect();
            if rows.is_empty() || shots_per_experiment[t] == 0.0 {
                return Ok(None);
            }
            let mut local = vec![usize::MAX; block.rows()];
            for (k, &i) in rows.iter().enumerate() {
                local[i] = k;
            }
            let cov = block
                .relative_covariance(x_model, 1.0)
                .scaled(1.0 / (block.experiments.len() as f64 * shots_per_experiment[t]));
            let m = rows.len();
            let mut omega = Mat::<f64>::zeros(m, m);
            for (k, &i) in rows.iter().enumerate() {
                omega[(k, k)] = cov.diag[i];
            }
            for &(i, j, v) in &cov.off {
                let (a, b) = (local[i as usize], local[j as usize]);
                if a != usize::MAX && b != usize::MAX {
                    omega[(a, b)] = v;
                    omega[(b, a)] = v;
                }
            }
            let mut cols: Vec<usize> = rows
                .iter()
                .flat_map(|&i| block.matrix.row(i).0.iter().map(|&c| c as usize))
                .collect();
            cols.sort_unstable();
            cols.dedup();
            let mut a = Mat::<f64>::zeros(m, cols.len());
            for (k, &i) in rows.iter().enumerate() {
                let (c, p) = block.matrix.row(i);
                for (&c, &p) in c.iter().zip(p) {
                    a[(k, cols.binary_search(&(c as usize)).unwrap())] = p as f64;
                }
            }
            let llt = omega.llt(Side::Lower).map_err(|_| EstimationError::Singular)?;
            let wa = llt.solve(&a);
            let wb = llt.solve(Mat::from_fn(m, 1, |k, _| obs.b[off + rows[k]]));
            let normal = a.transpose() * &wa;
            let rhs = a.transpose() * &wb;
            Ok(Some((cols, normal, (0..rhs.nrows()).map(|i| rhs[(i, 0)]).collect())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut normal = Mat::<f64>::zeros(n, n);
    let mut rhs = vec![0.0; n];
    for (cols, g, r) in parts.into_iter().flatten() {
        for (a, &ca) in cols.iter().enumerate() {
            rhs[ca] += r[a];
            for (b, &cb) in cols.iter().enumerate() {
                normal[(ca, cb)] += g[(a, b)];
            }
        }
    }
    let missing: Vec<usize> = (0..n).filter(|&c| normal[(c, c)] == 0.0).collect();
    if !missing.is_empty() {
        return Err(EstimationError::RankDeficient(missing));
    }
    let llt = normal.llt(Side::Lower).map_err(|_| EstimationError::Singular)?;
    let x = llt.solve(Mat::from_fn(n, 1, |i, _| rhs[i]));
    Ok((0..n).map(|i| x[(i, 0)]).collect())
}

/// Fits gate log-eigenvalues to the pooled circuit eigenvalues.
///
/// `shots_per_experiment` gives the shots of each experiment of a tuple; it
/// sets the covariance scale of the generalised fit and is unused otherwise.
pub fn fit_gate_eigenvalues(
    design: &ExperimentalDesign,
    est: &CircuitEstimates,
    shots_per_experiment: &[f64],
    method: FitMethod,
    cfg: &FitConfig,
) -> Result<GateFit, EstimationError> {
    if est.lambda.len() != design.row_count() {
        return Err(EstimationError::Mismatch(format!(
            "{} estimates for {} rows",
            est.lambda.len(),
            design.row_count()
        )));
    }
    let obs = observations(est);
    let too_big = design.parameter_count() > DENSE_LIMIT
        || design.blocks().iter().any(|b| b.rows() > cfg.gls_block_limit);
    let method_used = if method == FitMethod::Fgls && too_big {
        FitMethod::Wls
    } else {
        method
    };
    let mut x = sparse_weighted_solve(design, &obs, method_used != FitMethod::Ols)?;
    let mut iterations = 1;
    let mut converged = true;
    if method_used == FitMethod::Fgls {
        if shots_per_experiment.len() != design.blocks().len() {
            return Err(EstimationError::Mismatch("one shot count per tuple is needed".into()));
        }
        converged = false;
        for _ in 0..cfg.max_iterations {
            let model: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
            let next = gls_solve(design, &obs, shots_per_experiment, &model)?;
            let step = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            x = next;
            iterations += 1;
            if step < cfg.tolerance {
                converged = true;
                break;
            }
        }
    }
    let clipped_to_one = x.iter().filter(|&&v| v < 0.0).count();
    x.iter_mut().for_each(|v| *v = v.max(0.0));
    let lambda = x.iter().map(|v| (-v).exp()).collect();
    Ok(GateFit {
        method,
        method_used,
        x,
        lambda,
        iterations,
        converged,
        rows_used: obs.used.iter().filter(|&&u| u).count(),
        rows_without_shots: obs.used.iter().filter(|&&u| !u).count(),
        rows_floored: obs.floored,
        clipped_to_one,
    })
}

/// Gate grouping used in summaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateType {
    /// Pauli gates and padded identities.
    Pauli,
    Hadamard,
    Phase,
    Measurement,
    /// Controlled-Z and controlled-X.
    Controlled,
}

impl GateType {
    pub fn of(circuit: &Circuit, id: GateId) -> Self {
        match id {
            GateId::Spam { .. } => GateType::Measurement,
            GateId::Gate { layer, gate } => match circuit.layers[layer].gates[gate].kind {
                GateKind::H => GateType::Hadamard,
                GateKind::S => GateType::Phase,
                GateKind::CX | GateKind::CZ => GateType::Controlled,
                _ => GateType::Pauli,
            },
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            GateType::Pauli => "pauli",
            GateType::Hadamard => "hadamard",
            GateType::Phase => "phase",
            GateType::Measurement => "measurement",
            GateType::Controlled => "controlled",
        }
    }
}

/// Recovered error distribution of one gate or measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDistribution {
    pub gate_id: GateId,
    pub gate_type: GateType,
    /// Indexed by local symplectic Pauli index; `(1 - p, p)` for
    /// measurements.
    pub probabilities: Vec<f64>,
    /// Whether the simplex projection changed the inverse transform.
    pub projected: bool,
}

/// Per-gate distributions from a full gate-eigenvalue vector.
pub fn recover_probabilities(circuit: &Circuit, lambda: &[f64]) -> Result<Vec<GateDistribution>, EstimationError> {
    let index = circuit.parameters();
    if lambda.len() != index.len() {
        return Err(EstimationError::Mismatch(format!(
            "{} eigenvalues for {} parameters",
            lambda.len(),
            index.len()
        )));
    }
    index
        .gates()
        .iter()
        .map(|&(id, off, count)| {
            let raw = match id {
                GateId::Spam { .. } => {
                    let p = (1.0 - lambda[off]) / 2.0;
                    vec![1.0 - p, p]
                }
                GateId::Gate { .. } => {
                    let mut ev = Vec::with_capacity(count + 1);
                    ev.push(1.0);
                    ev.extend_from_slice(&lambda[off..off + count]);
                    wht_inverse(&ev)?
                }
            };
            let probabilities = project_simplex(&raw);
            let projected = raw.iter().zip(&probabilities).any(|(a, b)| (a - b).abs() > 1e-12);
            Ok(GateDistribution {
                gate_id: id,
                gate_type: GateType::of(circuit, id),
                probabilities,
                projected,
            })
        })
        .collect()
}

/// Comparison against a known noise model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthMetrics {
    /// `sqrt(S' / N) |lambda_est - lambda|`.
    pub nrmse: f64,
    pub normalised_budget: f64,
    /// Per gate channel, in parameter order.
    pub tvd: Vec<f64>,
    pub median_tvd: BTreeMap<GateType, f64>,
}

pub fn report_metrics(
    distributions: &[GateDistribution],
    lambda: &[f64],
    truth: &NoiseModel,
    normalised_budget: f64,
) -> Result<TruthMetrics, EstimationError> {
    let reference = truth.eigenvalues();
    if reference.len() != lambda.len() || truth.channels().len() != distributions.len() {
        return Err(EstimationError::Mismatch("truth does not cover the estimates".into()));
    }
    let sq: f64 = lambda.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum();
    let nrmse = (normalised_budget / lambda.len() as f64).sqrt() * sq.sqrt();
    let mut tvds = Vec::with_capacity(distributions.len());
    let mut by_type: BTreeMap<GateType, Vec<f64>> = BTreeMap::new();
    for (d, ch) in distributions.iter().zip(truth.channels()) {
        if d.gate_id != ch.gate_id {
            return Err(EstimationError::Mismatch(format!("{:?} against {:?}", d.gate_id, ch.gate_id)));
        }
        let t = tvd(&d.probabilities, &ch.probabilities)?;
        tvds.push(t);
        by_type.entry(d.gate_type).or_default().push(t);
    }
    let median_tvd = by_type.into_iter().map(|(k, v)| (k, median(v))).collect();
    Ok(TruthMetrics {
        nrmse,
        normalised_budget,
        tvd: tvds,
        median_tvd,
    })
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Full estimation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub circuit_eigenvalues: CircuitEstimates,
    pub fit: GateFit,
    pub distributions: Vec<GateDistribution>,
    pub projected_channels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<TruthMetrics>,
}

impl EstimationReport {
    /// `gate,pauli,p_true,p_est`, one line per Pauli of each channel;
    /// `p_true` is empty without a reference model.
    pub fn distributions_csv(&self, circuit: &Circuit, truth: Option<&NoiseModel>) -> String {
        let mut out = String::from("gate,pauli,p_true,p_est\n");
        for (k, d) in self.distributions.iter().enumerate() {
            let label = gate_label(circuit, d.gate_id);
            for (a, p) in d.probabilities.iter().enumerate() {
                let pauli = match d.gate_id {
                    GateId::Spam { .. } => ["no_flip", "flip"][a].to_string(),
                    GateId::Gate { layer, gate } => {
                        crate::pauli::local_label(a, circuit.layers[layer].gates[gate].arity())
                    }
                };
                let t = truth
                    .map(|m| format!("{:.12e}", m.channels()[k].probabilities[a]))
                    .unwrap_or_default();
                out.push_str(&format!("{label},{pauli},{t},{p:.12e}\n"));
            }
        }
        out
    }

    /// `gate_type,count,median_tvd` from the truth comparison.
    pub fn metrics_csv(&self) -> Option<String> {
        let m = self.metrics.as_ref()?;
        let mut counts: BTreeMap<GateType, usize> = BTreeMap::new();
        for d in &self.distributions {
            *counts.entry(d.gate_type).or_default() += 1;
        }
        let mut out = String::from("gate_type,count,median_tvd\n");
        for (k, v) in &m.median_tvd {
            out.push_str(&format!("{},{},{v:.12e}\n", k.label(), counts[k]));
        }
        Some(out)
    }
}

/// `L<layer>G<gate>` for gates, `M<qubit><basis>` for measurements.
pub fn gate_label(circuit: &Circuit, id: GateId) -> String {
    match id {
        GateId::Gate { layer, gate } => {
            let g = &circuit.layers[layer].gates[gate];
            format!("L{layer}G{gate}:{g}")
        }
        GateId::Spam { qubit, basis } => format!("M{qubit}{basis:?}"),
    }
}

/// Eigenvalue pooling, fit, channel recovery and optional truth comparison.
pub fn estimate(
    design: &ExperimentalDesign,
    data: &OutcomeDataset,
    method: FitMethod,
    cfg: &FitConfig,
    truth: Option<&NoiseModel>,
) -> Result<EstimationReport, EstimationError> {
    let est = estimate_circuit_eigenvalues(design, data)?;
    let mut shots = vec![0.0; design.blocks().len()];
    let mut seen = vec![0usize; design.blocks().len()];
    for e in &data.header.experiments {
        shots[e.tuple] += e.shots as f64;
        seen[e.tuple] += 1;
    }
    for (s, &k) in shots.iter_mut().zip(&seen) {
        if k > 0 {
            *s /= k as f64;
        }
    }
    let fit = fit_gate_eigenvalues(design, &est, &shots, method, cfg)?;
    let distributions = recover_probabilities(design.circuit(), &fit.lambda)?;
    let metrics = match truth {
        Some(t) => {
            let budget = design.shot_allocation(data.header.budget)?.normalised;
            Some(report_metrics(&distributions, &fit.lambda, t, budget)?)
        }
        None => None,
    };
    Ok(EstimationReport {
        projected_channels: distributions.iter().filter(|d| d.projected).count(),
        circuit_eigenvalues: est,
        fit,
        distributions,
        metrics,
    })
}
