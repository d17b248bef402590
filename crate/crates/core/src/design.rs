//! Experimental designs: Pauli preparation sets, experiment packing, the
//! design matrix, shot allocation and the circuit-eigenvalue covariance.

use std::cmp::Reverse;
use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{Circuit, CircuitError, LayerTuple};
use crate::noise::NoiseModel;
use crate::pauli::{local_pauli, Basis, Pauli1, PauliError, SparsePauli};

#[derive(Debug, Error)]
pub enum DesignError {
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Pauli(#[from] PauliError),
    #[error("invalid shot weights: {0}")]
    Weights(String),
    #[error("measurement budget must be positive, got {0}")]
    Budget(f64),
    #[error("design has no tuples")]
    Empty,
    #[error("noise model does not cover the circuit: {0}")]
    Noise(String),
    #[error("design file: {0}")]
    File(String),
}

/// Compressed rows of small non-negative integer entries.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SparseRows {
    ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<u16>,
}

impl SparseRows {
    fn new() -> Self {
        Self {
            ptr: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    fn push_row(&mut self, entries: impl IntoIterator<Item = (u32, u16)>) {
        for (c, v) in entries {
            self.cols.push(c);
            self.vals.push(v);
        }
        self.ptr.push(self.cols.len());
    }

    pub fn len(&self) -> usize {
        self.ptr.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// `(columns, values)` of row `i`, columns increasing.
    #[inline]
    pub fn row(&self, i: usize) -> (&[u32], &[u16]) {
        let (a, b) = (self.ptr[i], self.ptr[i + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    /// `sum_c A[i, c] x[c]` for every row.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&c, &v)| v as f64 * x[c as usize]).sum()
            })
            .collect()
    }
}

/// Propagates sparse Paulis through rearranged circuits.
struct Propagator<'c> {
    circuit: &'c Circuit,
    codes: Vec<u8>,
    touched: Vec<u32>,
}

struct Propagation {
    out: SparsePauli,
    entries: Vec<(u32, u16)>,
    cone: Vec<u32>,
}

impl<'c> Propagator<'c> {
    fn new(circuit: &'c Circuit) -> Self {
        Self {
            circuit,
            codes: vec![0; circuit.n],
            touched: Vec::new(),
        }
    }

    /// Pushes `a` through the tuple, returning the signed image, the design
    /// row (gate and measurement columns with powers) and the qubits of every
    /// gate that saw a non-identity Pauli.
    fn run(&mut self, tuple: &LayerTuple, a: &SparsePauli) -> Propagation {
        let c = self.circuit;
        let params = c.parameters();
        let mut active: Vec<u32> = a.qubits().collect();
        for &(q, p) in a.terms() {
            self.codes[q as usize] = p.code();
        }
        let mut negative = a.is_negative();
        let mut cols: Vec<u32> = Vec::new();
        let mut cone: Vec<u32> = active.clone();
        let mut gates: Vec<usize> = Vec::new();
        for &layer_id in tuple.entries() {
            let layer = &c.layers[layer_id];
            gates.clear();
            gates.extend(active.iter().map(|&q| c.gate_on(layer_id, q as usize)));
            gates.sort_unstable();
            gates.dedup();
            self.touched.clear();
            for &j in &gates {
                let g = &layer.gates[j];
                let b = g.arity();
                let mut xm = 0usize;
                let mut zm = 0usize;
                for &q in &g.qubits {
                    let code = self.codes[q] as usize;
                    xm = (xm << 1) | (code >> 1);
                    zm = (zm << 1) | (code & 1);
                }
                let idx = (xm << b) | zm;
                if idx == 0 {
                    continue;
                }
                cols.push(params.gate_column(layer_id, j, idx) as u32);
                let (image, neg) = g.kind.table().expect("validated circuit")[idx];
                negative ^= neg;
                for (k, &q) in g.qubits.iter().enumerate() {
                    let p = local_pauli(image, b, k);
                    self.codes[q] = p.code();
                    cone.push(q as u32);
                    if p != Pauli1::I {
                        self.touched.push(q as u32);
                    }
                }
            }
            std::mem::swap(&mut active, &mut self.touched);
        }
        active.sort_unstable();
        let mut terms = Vec::with_capacity(active.len());
        for &q in &active {
            let p = Pauli1::from_code(self.codes[q as usize]);
            self.codes[q as usize] = 0;
            let basis = p.basis().expect("active qubits carry a Pauli");
            cols.push(params.spam_column(q as usize, basis) as u32);
            terms.push((q, p));
        }
        let mut out = SparsePauli::new(terms);
        out.set_negative(negative);
        cols.sort_unstable();
        let mut entries: Vec<(u32, u16)> = Vec::new();
        for c in cols {
            match entries.last_mut() {
                Some(e) if e.0 == c => e.1 += 1,
                _ => entries.push((c, 1)),
            }
        }
        cone.sort_unstable();
        cone.dedup();
        Propagation {
            out,
            entries,
            cone,
        }
    }
}

/// The Paulis whose circuit eigenvalues a tuple estimates: every
/// non-identity Pauli supported on a gate of the rearranged circuit, or the
/// `3n` single-qubit Paulis for the empty tuple. Sorted by qubit terms.
pub fn pauli_preparation_set(c: &Circuit, t: &LayerTuple) -> Result<Vec<SparsePauli>, DesignError> {
    c.check_tuple(t)?;
    let mut set: BTreeSet<Vec<(u32, Pauli1)>> = BTreeSet::new();
    if t.is_empty() {
        for q in 0..c.n as u32 {
            for p in [Pauli1::X, Pauli1::Y, Pauli1::Z] {
                set.insert(vec![(q, p)]);
            }
        }
    } else {
        let mut ids = t.entries().to_vec();
        ids.sort_unstable();
        ids.dedup();
        for id in ids {
            for g in &c.layers[id].gates {
                let b = g.arity();
                for idx in 1..1usize << (2 * b) {
                    let terms: Vec<(u32, Pauli1)> = g
                        .qubits
                        .iter()
                        .enumerate()
                        .map(|(k, &q)| (q as u32, local_pauli(idx, b, k)))
                        .filter(|t| t.1 != Pauli1::I)
                        .collect();
                    let mut terms = terms;
                    terms.sort_unstable_by_key(|t| t.0);
                    set.insert(terms);
                }
            }
        }
    }
    Ok(set.into_iter().map(SparsePauli::new).collect())
}

/// Whether two sparse Paulis agree wherever both are non-identity.
fn agree_on_overlap(a: &SparsePauli, b: &SparsePauli) -> bool {
    let (x, y) = (a.terms(), b.terms());
    let (mut i, mut j) = (0, 0);
    while i < x.len() && j < y.len() {
        match x[i].0.cmp(&y[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                if x[i].1 != y[j].1 {
                    return false;
                }
                i += 1;
                j += 1;
            }
        }
    }
    true
}

/// One packed experiment: the rows it estimates and its combined
/// single-qubit preparation and measurement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Experiment {
    pub rows: Vec<u32>,
    pub prep: SparsePauli,
    pub meas: SparsePauli,
}

/// Co-measured row pair with overlapping light cones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowPair {
    pub i: u32,
    pub j: u32,
    /// Number of experiments measuring both rows.
    pub count: u32,
}

#[derive(Clone, Debug, Default)]
pub struct PairTerms {
    pub pairs: Vec<RowPair>,
    /// Design rows of the product Paulis `a + a'`, aligned with `pairs`.
    pub sums: SparseRows,
}

/// Everything the design needs for one tuple.
#[derive(Debug)]
pub struct TupleBlock {
    pub tuple: LayerTuple,
    pub duration_ns: f64,
    /// Prepared Paulis `a`, one per row.
    pub prep: Vec<SparsePauli>,
    /// Signed propagated Paulis `T(a)`.
    pub meas: Vec<SparsePauli>,
    /// Design matrix rows.
    pub matrix: SparseRows,
    cones: SparseRows,
    pub experiments: Vec<Experiment>,
    /// Number of experiments containing each row.
    pub multiplicity: Vec<u32>,
    pairs: OnceLock<PairTerms>,
    circuit: Arc<Circuit>,
}

impl TupleBlock {
    pub fn build(circuit: &Arc<Circuit>, tuple: &LayerTuple) -> Result<Self, DesignError> {
        let duration_ns = circuit.tuple_duration(tuple)?;
        let prep = pauli_preparation_set(circuit, tuple)?;
        let mut prop = Propagator::new(circuit);
        let mut meas = Vec::with_capacity(prep.len());
        let mut matrix = SparseRows::new();
        let mut cones = SparseRows::new();
        for a in &prep {
            let p = prop.run(tuple, a);
            meas.push(p.out);
            matrix.push_row(p.entries);
            cones.push_row(p.cone.into_iter().map(|q| (q, 0)));
        }
        let experiments = pack_rows(circuit.n, &prep, &meas);
        let mut multiplicity = vec![0u32; prep.len()];
        for e in &experiments {
            for &r in &e.rows {
                multiplicity[r as usize] += 1;
            }
        }
        Ok(Self {
            tuple: tuple.clone(),
            duration_ns,
            prep,
            meas,
            matrix,
            cones,
            experiments,
            multiplicity,
            pairs: OnceLock::new(),
            circuit: circuit.clone(),
        })
    }

    pub fn rows(&self) -> usize {
        self.prep.len()
    }

    pub fn circuit(&self) -> &Arc<Circuit> {
        &self.circuit
    }

    /// Whether `T(a)` flips sign for row `i`.
    pub fn sign_negative(&self, i: usize) -> bool {
        self.meas[i].is_negative()
    }

    /// Gate-support light cone of row `i`.
    pub fn cone(&self, i: usize) -> &[u32] {
        self.cones.row(i).0
    }

    /// Co-measured pairs whose light cones meet, with the design rows of
    /// their products. Computed on first use.
    pub fn pair_terms(&self) -> &PairTerms {
        self.pairs.get_or_init(|| self.compute_pairs())
    }

    fn compute_pairs(&self) -> PairTerms {
        let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
        let mut by_qubit: HashMap<u32, Vec<u32>> = HashMap::new();
        let mut seen: Vec<u32> = Vec::new();
        for e in &self.experiments {
            by_qubit.clear();
            for &r in &e.rows {
                for &q in self.cone(r as usize) {
                    by_qubit.entry(q).or_default().push(r);
                }
            }
            for &r in &e.rows {
                seen.clear();
                for &q in self.cone(r as usize) {
                    for &s in &by_qubit[&q] {
                        if s > r {
                            seen.push(s);
                        }
                    }
                }
                seen.sort_unstable();
                seen.dedup();
                for &s in &seen {
                    *counts.entry((r, s)).or_insert(0) += 1;
                }
            }
        }
        let mut pairs: Vec<RowPair> = counts
            .into_iter()
            .map(|((i, j), count)| RowPair { i, j, count })
            .collect();
        pairs.sort_unstable_by_key(|p| (p.i, p.j));
        let mut prop = Propagator::new(&self.circuit);
        let mut sums = SparseRows::new();
        for p in &pairs {
            let s = self.prep[p.i as usize].xor(&self.prep[p.j as usize]);
            sums.push_row(prop.run(&self.tuple, &s).entries);
        }
        PairTerms { pairs, sums }
    }

    /// Circuit eigenvalues of the rows given gate log-eigenvalues `x = -log(lambda)`.
    pub fn circuit_eigenvalues(&self, log_eigenvalues: &[f64]) -> Vec<f64> {
        self.matrix
            .mul_vec(log_eigenvalues)
            .into_iter()
            .map(|y| (-y).exp())
            .collect()
    }

    /// Scale-free relative covariance of the rows.
    ///
    /// With `s = Gamma_T S' / tau(Gamma)` the log-eigenvalue covariance of the
    /// block is `cov / s`. `tau_basic` is the basic design's time factor.
    pub fn relative_covariance(&self, log_eigenvalues: &[f64], tau_basic: f64) -> BlockCovariance {
        let lam = self.circuit_eigenvalues(log_eigenvalues);
        let e = self.experiments.len() as f64;
        let diag = lam
            .iter()
            .zip(&self.multiplicity)
            .map(|(&l, &m)| e * (1.0 - l * l) / (tau_basic * m as f64 * l * l))
            .collect();
        let terms = self.pair_terms();
        let sums = terms.sums.mul_vec(log_eigenvalues);
        let off = terms
            .pairs
            .iter()
            .zip(sums)
            .filter_map(|(p, y)| {
                let (i, j) = (p.i as usize, p.j as usize);
                let (li, lj) = (lam[i], lam[j]);
                let v = e * p.count as f64 * ((-y).exp() - li * lj)
                    / (tau_basic * (self.multiplicity[i] * self.multiplicity[j]) as f64 * li * lj);
                (v != 0.0).then_some((p.i, p.j, v))
            })
            .collect();
        BlockCovariance { diag, off, lambda: lam }
    }
}

/// Symmetric covariance block: diagonal plus upper-triangle entries.
#[derive(Clone, Debug, Default)]
pub struct BlockCovariance {
    pub diag: Vec<f64>,
    pub off: Vec<(u32, u32, f64)>,
    /// Circuit eigenvalues of the rows.
    pub lambda: Vec<f64>,
}

impl BlockCovariance {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.diag[i];
        }
        let (a, b) = if i < j { (i as u32, j as u32) } else { (j as u32, i as u32) };
        self.off
            .iter()
            .find(|e| e.0 == a && e.1 == b)
            .map_or(0.0, |e| e.2)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            diag: self.diag.iter().map(|d| d * factor).collect(),
            off: self.off.iter().map(|&(i, j, v)| (i, j, v * factor)).collect(),
            lambda: self.lambda.clone(),
        }
    }
}

/// Greedy packing of rows into mutually consistent experiments.
fn pack_rows(n: usize, prep: &[SparsePauli], meas: &[SparsePauli]) -> Vec<Experiment> {
    let m = prep.len();
    let mut order: Vec<u32> = (0..m as u32).collect();
    order.sort_by(|&a, &b| {
        meas[b as usize]
            .weight()
            .cmp(&meas[a as usize].weight())
            .then_with(|| prep[a as usize].text_cmp(&prep[b as usize]))
    });
    let mut rank = vec![0u32; m];
    for (k, &r) in order.iter().enumerate() {
        rank[r as usize] = k as u32;
    }
    let mut prep_at: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut meas_at: Vec<Vec<u32>> = vec![Vec::new(); n];
    for r in 0..m {
        for q in prep[r].qubits() {
            prep_at[q as usize].push(r as u32);
        }
        for q in meas[r].qubits() {
            meas_at[q as usize].push(r as u32);
        }
    }
    let consistent = |a: usize, b: usize| {
        agree_on_overlap(&prep[a], &prep[b]) && agree_on_overlap(&meas[a], &meas[b])
    };

    let mut unadded = vec![true; m];
    let mut n_unadded = m;
    let mut experiments = Vec::new();
    let mut in_q = vec![false; m];
    let mut score = vec![0u32; m];
    let mut covered = vec![false; n];
    let mut covered_list: Vec<usize> = Vec::new();
    while n_unadded > 0 {
        in_q.iter_mut().for_each(|x| *x = true);
        score.iter_mut().for_each(|x| *x = 0);
        for &q in &covered_list {
            covered[q] = false;
        }
        covered_list.clear();
        let key = |r: usize, s: u32| (Reverse(s), rank[r]);
        let mut heap_q: BTreeSet<(Reverse<u32>, u32)> = (0..m).map(|r| key(r, 0)).collect();
        let mut heap_u: BTreeSet<(Reverse<u32>, u32)> =
            (0..m).filter(|&r| unadded[r]).map(|r| key(r, 0)).collect();
        let mut rows = Vec::new();
        loop {
            let pick = heap_u.first().or_else(|| heap_q.first()).copied();
            let Some((_, k)) = pick else { break };
            let r = order[k as usize] as usize;
            rows.push(r as u32);
            if unadded[r] {
                unadded[r] = false;
                n_unadded -= 1;
            }
            let drop = |s: usize,
                            in_q: &mut Vec<bool>,
                            heap_q: &mut BTreeSet<(Reverse<u32>, u32)>,
                            heap_u: &mut BTreeSet<(Reverse<u32>, u32)>| {
                in_q[s] = false;
                let kk = key(s, score[s]);
                heap_q.remove(&kk);
                heap_u.remove(&kk);
            };
            drop(r, &mut in_q, &mut heap_q, &mut heap_u);
            for q in prep[r].qubits() {
                for &s in &prep_at[q as usize] {
                    let s = s as usize;
                    if in_q[s] && !consistent(r, s) {
                        drop(s, &mut in_q, &mut heap_q, &mut heap_u);
                    }
                }
            }
            for q in meas[r].qubits() {
                for &s in &meas_at[q as usize] {
                    let s = s as usize;
                    if in_q[s] && !consistent(r, s) {
                        drop(s, &mut in_q, &mut heap_q, &mut heap_u);
                    }
                }
            }
            for q in meas[r].qubits() {
                let q = q as usize;
                if covered[q] {
                    continue;
                }
                covered[q] = true;
                covered_list.push(q);
                for &s in &meas_at[q] {
                    let s = s as usize;
                    if !in_q[s] {
                        continue;
                    }
                    let old = key(s, score[s]);
                    score[s] += 1;
                    let new = key(s, score[s]);
                    if heap_q.remove(&old) {
                        heap_q.insert(new);
                    }
                    if heap_u.remove(&old) {
                        heap_u.insert(new);
                    }
                }
            }
        }
        let mut prep_terms = Vec::new();
        let mut meas_terms = Vec::new();
        for &r in &rows {
            prep_terms.extend_from_slice(prep[r as usize].terms());
            meas_terms.extend_from_slice(meas[r as usize].terms());
        }
        experiments.push(Experiment {
            rows,
            prep: SparsePauli::new(prep_terms),
            meas: SparsePauli::new(meas_terms),
        });
    }
    experiments
}

/// Whether two Paulis of a tuple can share an experiment.
pub fn t_consistent(c: &Circuit, t: &LayerTuple, a: &SparsePauli, b: &SparsePauli) -> Result<bool, DesignError> {
    c.check_tuple(t)?;
    let mut prop = Propagator::new(c);
    let ta = prop.run(t, a).out;
    let tb = prop.run(t, b).out;
    Ok(agree_on_overlap(a, b) && agree_on_overlap(&ta, &tb))
}

/// Propagated Pauli, sign and design row of a single Pauli under a tuple.
pub fn propagate(
    c: &Circuit,
    t: &LayerTuple,
    a: &SparsePauli,
) -> Result<(SparsePauli, Vec<(u32, u16)>), DesignError> {
    c.check_tuple(t)?;
    let p = Propagator::new(c).run(t, a);
    Ok((p.out, p.entries))
}

/// Packs a tuple's preparation set greedily.
pub fn pack_experiments(c: &Circuit, t: &LayerTuple) -> Result<Vec<Experiment>, DesignError> {
    let arc = Arc::new(c.clone());
    Ok(TupleBlock::build(&arc, t)?.experiments)
}

/// The empty tuple plus one single-layer tuple per unique layer.
pub fn basic_tuple_set(c: &Circuit) -> Vec<LayerTuple> {
    let mut v: Vec<LayerTuple> = c
        .unique_layers()
        .iter()
        .map(|&i| LayerTuple::new(vec![i]))
        .collect();
    v.push(LayerTuple::empty());
    v
}

/// Time factor of the basic tuple set under default weights.
pub fn basic_time_factor(c: &Circuit) -> f64 {
    let durations: Vec<f64> = basic_tuple_set(c)
        .iter()
        .map(|t| c.tuple_duration(t).expect("basic tuples are valid"))
        .collect();
    default_time_factor(&durations)
}

/// `sum Gamma_T tau_T` with `Gamma_T` proportional to `1/tau_T`.
pub fn default_time_factor(durations: &[f64]) -> f64 {
    durations.len() as f64 / durations.iter().map(|t| 1.0 / t).sum::<f64>()
}

/// Weights proportional to `1/tau_T`, so each tuple is measured for the same time.
pub fn default_weights(durations: &[f64]) -> Vec<f64> {
    let inv: Vec<f64> = durations.iter().map(|t| 1.0 / t).collect();
    let s: f64 = inv.iter().sum();
    inv.into_iter().map(|x| x / s).collect()
}

/// Origin of a tuple in a design.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TupleOrigin {
    Basic,
    Repeated { base: LayerTuple, repetitions: usize },
    Random,
    Given,
}

/// Which least-squares estimator a design is tuned for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LsKind {
    Ols,
    Wls,
    Gls,
}

impl std::fmt::Display for LsKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LsKind::Ols => "OLS",
            LsKind::Wls => "WLS",
            LsKind::Gls => "GLS",
        })
    }
}

impl std::str::FromStr for LsKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ols" => Ok(LsKind::Ols),
            "wls" => Ok(LsKind::Wls),
            "gls" => Ok(LsKind::Gls),
            _ => Err(format!("unknown estimator {s:?}")),
        }
    }
}

/// Tuple set with shot weights and all derived per-tuple structure.
#[derive(Clone, Debug)]
pub struct ExperimentalDesign {
    circuit: Arc<Circuit>,
    blocks: Vec<Arc<TupleBlock>>,
    origins: Vec<TupleOrigin>,
    weights: Vec<f64>,
    pub ls_kind: LsKind,
    tau_basic: f64,
    row_offsets: Vec<usize>,
}

impl ExperimentalDesign {
    /// Packs and propagates every tuple; weights default to `1/tau_T`.
    pub fn build(circuit: Arc<Circuit>, tuples: &[LayerTuple]) -> Result<Self, DesignError> {
        let origins = vec![TupleOrigin::Given; tuples.len()];
        Self::build_with_origins(circuit, tuples, origins)
    }

    pub fn build_with_origins(
        circuit: Arc<Circuit>,
        tuples: &[LayerTuple],
        origins: Vec<TupleOrigin>,
    ) -> Result<Self, DesignError> {
        let blocks = tuples
            .par_iter()
            .map(|t| TupleBlock::build(&circuit, t).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_blocks(circuit, blocks, origins)
    }

    pub fn basic(circuit: Arc<Circuit>) -> Result<Self, DesignError> {
        let tuples = basic_tuple_set(&circuit);
        let origins = vec![TupleOrigin::Basic; tuples.len()];
        Self::build_with_origins(circuit, &tuples, origins)
    }

    /// Assembles a design from prebuilt blocks with default weights.
    pub fn from_blocks(
        circuit: Arc<Circuit>,
        blocks: Vec<Arc<TupleBlock>>,
        origins: Vec<TupleOrigin>,
    ) -> Result<Self, DesignError> {
        if blocks.is_empty() {
            return Err(DesignError::Empty);
        }
        assert_eq!(blocks.len(), origins.len());
        let durations: Vec<f64> = blocks.iter().map(|b| b.duration_ns).collect();
        let mut row_offsets = vec![0];
        for b in &blocks {
            row_offsets.push(row_offsets.last().unwrap() + b.rows());
        }
        Ok(Self {
            tau_basic: basic_time_factor(&circuit),
            circuit,
            blocks,
            origins,
            weights: default_weights(&durations),
            ls_kind: LsKind::Wls,
            row_offsets,
        })
    }

    pub fn circuit(&self) -> &Arc<Circuit> {
        &self.circuit
    }

    pub fn blocks(&self) -> &[Arc<TupleBlock>] {
        &self.blocks
    }

    pub fn origins(&self) -> &[TupleOrigin] {
        &self.origins
    }

    pub fn tuples(&self) -> Vec<LayerTuple> {
        self.blocks.iter().map(|b| b.tuple.clone()).collect()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn durations(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.duration_ns).collect()
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<(), DesignError> {
        if weights.len() != self.blocks.len() {
            return Err(DesignError::Weights(format!(
                "{} weights for {} tuples",
                weights.len(),
                self.blocks.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(DesignError::Weights("negative or NaN weight".into()));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(DesignError::Weights(format!("weights sum to {s}")));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self, DesignError> {
        self.set_weights(weights)?;
        Ok(self)
    }

    pub fn reset_weights(&mut self) {
        self.weights = default_weights(&self.durations());
    }

    /// Time factor `tau(Gamma) = sum Gamma_T tau_T` in nanoseconds.
    pub fn time_factor(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.blocks)
            .map(|(w, b)| w * b.duration_ns)
            .sum()
    }

    /// Time factor of the circuit's basic design, the budget reference.
    pub fn basic_time_factor(&self) -> f64 {
        self.tau_basic
    }

    pub fn row_count(&self) -> usize {
        *self.row_offsets.last().unwrap()
    }

    pub fn row_offset(&self, block: usize) -> usize {
        self.row_offsets[block]
    }

    pub fn parameter_count(&self) -> usize {
        self.circuit.parameter_count()
    }

    pub fn experiment_count(&self) -> usize {
        self.blocks.iter().map(|b| b.experiments.len()).sum()
    }

    /// Design matrix rows of all tuples, concatenated in tuple order.
    pub fn matrix_triplets(&self) -> Vec<(usize, usize, u16)> {
        let mut out = Vec::new();
        for (k, b) in self.blocks.iter().enumerate() {
            let off = self.row_offsets[k];
            for i in 0..b.rows() {
                let (c, v) = b.matrix.row(i);
                out.extend(c.iter().zip(v).map(|(&c, &v)| (off + i, c as usize, v)));
            }
        }
        out
    }

    /// Circuit eigenvalues of every row under `noise`.
    pub fn circuit_eigenvalues(&self, noise: &NoiseModel) -> Result<Vec<f64>, DesignError> {
        noise
            .check_circuit(&self.circuit)
            .map_err(|e| DesignError::Noise(e.to_string()))?;
        let x = noise.log_eigenvalues();
        Ok(self
            .blocks
            .iter()
            .flat_map(|b| b.circuit_eigenvalues(&x))
            .collect())
    }

    /// Per-tuple budgets for a total budget of `S` shots.
    pub fn shot_allocation(&self, total: f64) -> Result<ShotAllocation, DesignError> {
        if !(total > 0.0) {
            return Err(DesignError::Budget(total));
        }
        let mut per_experiment = Vec::with_capacity(self.blocks.len());
        let mut used = 0.0;
        for (w, b) in self.weights.iter().zip(&self.blocks) {
            let s = (total * w / b.experiments.len() as f64).floor();
            used += s * b.experiments.len() as f64;
            per_experiment.push(s as u64);
        }
        Ok(ShotAllocation {
            total,
            normalised: total * self.time_factor() / self.tau_basic,
            per_experiment,
            dropped: total - used,
        })
    }

    /// Per-block covariance of the circuit log-eigenvalue estimators for a
    /// budget of `total` shots.
    pub fn covariance(&self, noise: &NoiseModel, total: f64) -> Result<CovarianceModel, DesignError> {
        noise
            .check_circuit(&self.circuit)
            .map_err(|e| DesignError::Noise(e.to_string()))?;
        let alloc = self.shot_allocation(total)?;
        let x = noise.log_eigenvalues();
        let tau = self.time_factor();
        let blocks = self
            .blocks
            .par_iter()
            .zip(&self.weights)
            .map(|(b, &w)| {
                let s = w * alloc.normalised / tau;
                b.relative_covariance(&x, self.tau_basic).scaled(1.0 / s)
            })
            .collect();
        Ok(CovarianceModel {
            blocks,
            time_factor: tau,
            allocation: alloc,
        })
    }

    /// Same tuples and weights on a different circuit of the same family.
    pub fn transfer(&self, circuit: Arc<Circuit>) -> Result<Self, DesignError> {
        if circuit.unique_layers() != self.circuit.unique_layers() {
            return Err(DesignError::File(format!(
                "unique-layer structure {:?} differs from {:?}",
                circuit.unique_layers(),
                self.circuit.unique_layers()
            )));
        }
        let mut d = Self::build_with_origins(circuit, &self.tuples(), self.origins.clone())?;
        d.weights = self.weights.clone();
        d.ls_kind = self.ls_kind;
        Ok(d)
    }

    pub fn to_file(&self, include_experiments: bool, include_matrix: bool) -> DesignFile {
        let n = self.circuit.n;
        let tuples = self
            .blocks
            .iter()
            .zip(&self.origins)
            .zip(&self.weights)
            .map(|((b, o), &w)| TupleEntry {
                layers: b.tuple.clone(),
                weight: w,
                origin: o.clone(),
            })
            .collect();
        let experiments = include_experiments.then(|| {
            self.blocks
                .iter()
                .enumerate()
                .flat_map(|(k, b)| {
                    let off = self.row_offsets[k];
                    b.experiments.iter().map(move |e| ExperimentEntry {
                        tuple: k,
                        prep: e.prep.to_text(n),
                        meas: e.meas.to_text(n),
                        rows: e.rows.iter().map(|&r| off + r as usize).collect(),
                    })
                })
                .collect()
        });
        let rows = include_experiments.then(|| {
            self.blocks
                .iter()
                .enumerate()
                .flat_map(|(k, b)| {
                    (0..b.rows()).map(move |i| RowEntry {
                        tuple: k,
                        prep: sparse_label(&b.prep[i]),
                        meas: sparse_label(&b.meas[i]),
                    })
                })
                .collect()
        });
        let matrix = include_matrix.then(|| MatrixEntry {
            rows: self.row_count(),
            cols: self.parameter_count(),
            entries: self.matrix_triplets(),
        });
        DesignFile {
            version: DESIGN_FORMAT_VERSION,
            ls_kind: self.ls_kind,
            circuit: (*self.circuit).clone(),
            tuples,
            summary: DesignSummary {
                tuples: self.blocks.len(),
                rows: self.row_count(),
                columns: self.parameter_count(),
                experiments: self.experiment_count(),
            },
            experiments,
            rows,
            matrix,
        }
    }

    /// Rebuilds a design from its file; derived sections are recomputed.
    pub fn from_file(f: DesignFile) -> Result<Self, DesignError> {
        if f.version != DESIGN_FORMAT_VERSION {
            return Err(DesignError::File(format!("unsupported version {}", f.version)));
        }
        let circuit = Arc::new(f.circuit);
        let tuples: Vec<LayerTuple> = f.tuples.iter().map(|t| t.layers.clone()).collect();
        let origins = f.tuples.iter().map(|t| t.origin.clone()).collect();
        let weights: Vec<f64> = f.tuples.iter().map(|t| t.weight).collect();
        let mut d = Self::build_with_origins(circuit, &tuples, origins)?;
        let s: f64 = weights.iter().sum();
        d.set_weights(weights.iter().map(|w| w / s).collect())?;
        d.ls_kind = f.ls_kind;
        Ok(d)
    }

    pub fn summary(&self) -> DesignSummary {
        DesignSummary {
            tuples: self.blocks.len(),
            rows: self.row_count(),
            columns: self.parameter_count(),
            experiments: self.experiment_count(),
        }
    }
}

/// Spectral summary of a design matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixConditioning {
    pub rank: usize,
    pub condition_number: f64,
    /// Spectral norm of the pseudoinverse, `1 / sigma_min`.
    pub pinv_norm: f64,
    pub sigma_max: f64,
}

/// Largest design handled by [`ExperimentalDesign::conditioning`].
pub const CONDITIONING_LIMIT: usize = 4_000_000;

impl ExperimentalDesign {
    /// Singular-value summary of the design matrix via the dense Gram matrix.
    pub fn conditioning(&self) -> Result<MatrixConditioning, DesignError> {
        let n = self.parameter_count();
        if n * n > CONDITIONING_LIMIT * 16 {
            return Err(DesignError::File(format!("{n} columns is too many for a dense spectrum")));
        }
        let mut g = faer::Mat::<f64>::zeros(n, n);
        for b in &self.blocks {
            for i in 0..b.rows() {
                let (c, v) = b.matrix.row(i);
                for k in 0..c.len() {
                    for l in 0..c.len() {
                        g[(c[k] as usize, c[l] as usize)] += v[k] as f64 * v[l] as f64;
                    }
                }
            }
        }
        let ev = g
            .self_adjoint_eigenvalues(faer::Side::Lower)
            .map_err(|_| DesignError::File("eigendecomposition failed".into()))?;
        let top = ev.last().copied().unwrap_or(0.0).max(0.0);
        let tol = top * n as f64 * f64::EPSILON * 16.0;
        let rank = ev.iter().filter(|&&e| e > tol).count();
        let smin = ev[0].max(0.0).sqrt();
        let smax = top.sqrt();
        Ok(MatrixConditioning {
            rank,
            condition_number: smax / smin,
            pinv_norm: 1.0 / smin,
            sigma_max: smax,
        })
    }
}

/// Compact label for a sparse Pauli, e.g. `-X3Z17`; `+I` for the identity.
pub fn sparse_label(p: &SparsePauli) -> String {
    let mut s = String::from(if p.is_negative() { "-" } else { "+" });
    if p.is_identity() {
        s.push('I');
    }
    for &(q, c) in p.terms() {
        s.push(c.to_char());
        s.push_str(&q.to_string());
    }
    s
}

/// Shots per experiment for each tuple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotAllocation {
    /// Budget `S`.
    pub total: f64,
    /// Time-normalised budget `S'`.
    pub normalised: f64,
    /// `S_T` for each tuple, rounded down.
    pub per_experiment: Vec<u64>,
    /// Shots lost to rounding.
    pub dropped: f64,
}

/// Block-diagonal covariance of circuit log-eigenvalue estimators.
#[derive(Clone, Debug)]
pub struct CovarianceModel {
    pub blocks: Vec<BlockCovariance>,
    pub time_factor: f64,
    pub allocation: ShotAllocation,
}

pub const DESIGN_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSummary {
    pub tuples: usize,
    pub rows: usize,
    pub columns: usize,
    pub experiments: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TupleEntry {
    pub layers: LayerTuple,
    pub weight: f64,
    #[serde(flatten)]
    pub origin: TupleOrigin,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentEntry {
    pub tuple: usize,
    pub prep: String,
    pub meas: String,
    pub rows: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RowEntry {
    pub tuple: usize,
    pub prep: String,
    pub meas: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, u16)>,
}

/// Canonical JSON form of a design.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DesignFile {
    pub version: u32,
    pub ls_kind: LsKind,
    pub circuit: Circuit,
    pub tuples: Vec<TupleEntry>,
    pub summary: DesignSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiments: Option<Vec<ExperimentEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<RowEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<MatrixEntry>,
}

/// Basis of each measured qubit of an experiment.
pub fn measured_bases(e: &Experiment) -> Vec<(u32, Basis)> {
    e.meas
        .terms()
        .iter()
        .map(|&(q, p)| (q, p.basis().expect("non-identity")))
        .collect()
}
