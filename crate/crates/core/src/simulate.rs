//! Monte Carlo simulation of designs by Pauli-frame propagation.
//!
//! Frames hold one bit per shot in `u64` words, so a layer of Clifford gates
//! is a handful of XORs per qubit and word. Gate errors are placed by
//! geometric skipping over the shots of a chunk and drawn from an alias
//! table over the non-identity Paulis of the channel.
//!
//! Randomness is keyed by `(seed, tuple, experiment, chunk)`: every chunk of
//! [`CHUNK_SHOTS`] shots owns a ChaCha8 generator whose key packs those four
//! numbers, so results do not depend on scheduling.

use std::io::{Read, Write};
use std::str::FromStr;

use rand::distributions::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use rand_distr::{Binomial, WeightedAliasIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{Circuit, GateId, LayerTuple};
use crate::design::{DesignError, Experiment, ExperimentalDesign, TupleBlock};
use crate::noise::NoiseModel;
use crate::pauli::{Basis, GateKind};

/// Words per frame chunk.
const CHUNK_WORDS: usize = 64;
/// Shots per chunk.
pub const CHUNK_SHOTS: u64 = 64 * CHUNK_WORDS as u64;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const DATASET_MAGIC: &[u8; 8] = b"ACESOUT1";

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("noise model does not cover the circuit: {0}")]
    Noise(String),
    #[error("shot count must be positive")]
    NoShots,
    #[error("tuple {tuple} experiment {experiment} is not in the design")]
    UnknownExperiment { tuple: usize, experiment: usize },
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulationMode {
    /// Pauli-frame propagation with correlated outcomes.
    #[default]
    Frame,
    /// Each row an independent binomial draw at its analytic eigenvalue.
    Independent,
}

impl std::fmt::Display for SimulationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SimulationMode::Frame => "frame",
            SimulationMode::Independent => "independent",
        })
    }
}

impl FromStr for SimulationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "frame" => Ok(SimulationMode::Frame),
            "independent" => Ok(SimulationMode::Independent),
            _ => Err(format!("unknown simulation mode {s:?} (frame, independent)")),
        }
    }
}

/// Error source at one position: a gate channel or a measurement flip.
#[derive(Clone, Debug)]
struct ErrorSource {
    qubits: [usize; 2],
    arity: usize,
    /// `None` when the channel never errs.
    gap: Option<Skip>,
    /// Non-identity Paulis by local symplectic index minus one.
    pauli: Option<WeightedAliasIndex<f64>>,
}

impl ErrorSource {
    fn new(qubits: &[usize], probabilities: &[f64]) -> Self {
        let rate = (1.0 - probabilities[0]).clamp(0.0, 1.0);
        let mut q = [0; 2];
        q[..qubits.len()].copy_from_slice(qubits);
        let gap = (rate > 0.0).then(|| Skip::new(rate));
        let pauli = if qubits.is_empty() || gap.is_none() {
            None
        } else {
            Some(WeightedAliasIndex::new(probabilities[1..].to_vec()).expect("non-identity mass is positive"))
        };
        Self {
            qubits: q,
            arity: qubits.len(),
            gap,
            pauli,
        }
    }

    /// Calls `hit(shot, local_index)` for every erring shot below `shots`.
    #[inline]
    fn for_each_error(&self, shots: u64, rng: &mut ChaCha8Rng, mut hit: impl FnMut(u64, usize)) {
        let Some(gap) = &self.gap else { return };
        let mut s = gap.draw(rng);
        while s < shots {
            let e = match &self.pauli {
                Some(a) => a.sample(rng) + 1,
                None => 1,
            };
            hit(s, e);
            s = s.saturating_add(1).saturating_add(gap.draw(rng));
        }
    }
}

/// Geometric gaps between errors, by inversion: `floor(ln U / ln(1 - p))`.
/// One uniform and one logarithm per draw, which beats rejection-based
/// samplers at the rates met here.
#[derive(Clone, Copy, Debug)]
struct Skip {
    inv_log: f64,
}

impl Skip {
    fn new(rate: f64) -> Self {
        let inv_log = if rate >= 1.0 { 0.0 } else { 1.0 / (-rate).ln_1p() };
        Self { inv_log }
    }

    #[inline]
    fn draw(&self, rng: &mut ChaCha8Rng) -> u64 {
        // 1 - U lies in (0, 1]
        let u = 1.0 - rng.gen::<f64>();
        let g = u.ln() * self.inv_log;
        if g < u64::MAX as f64 {
            g as u64
        } else {
            u64::MAX
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum FrameOp {
    Swap(usize),
    ZOfX(usize),
    Cx(usize, usize),
    Cz(usize, usize),
}

#[derive(Clone, Debug, Default)]
struct LayerProgram {
    errors: Vec<ErrorSource>,
    ops: Vec<FrameOp>,
}

/// Bit-packed Pauli frames for one chunk, `x[q * words + w]`.
struct Frames {
    words: usize,
    x: Vec<u64>,
    z: Vec<u64>,
}

impl Frames {
    fn new(n: usize, words: usize) -> Self {
        Self {
            words,
            x: vec![0; n * words],
            z: vec![0; n * words],
        }
    }

    #[inline]
    fn flip(&mut self, q: usize, shot: u64, x: bool, z: bool) {
        let i = q * self.words + (shot / 64) as usize;
        let bit = 1u64 << (shot % 64);
        if x {
            self.x[i] ^= bit;
        }
        if z {
            self.z[i] ^= bit;
        }
    }

    fn apply(&mut self, op: FrameOp) {
        let w = self.words;
        match op {
            FrameOp::Swap(q) => {
                let r = q * w..(q + 1) * w;
                self.x[r.clone()].swap_with_slice(&mut self.z[r]);
            }
            FrameOp::ZOfX(q) => {
                for k in q * w..(q + 1) * w {
                    self.z[k] ^= self.x[k];
                }
            }
            FrameOp::Cx(c, t) => {
                for k in 0..w {
                    self.x[t * w + k] ^= self.x[c * w + k];
                    self.z[c * w + k] ^= self.z[t * w + k];
                }
            }
            FrameOp::Cz(a, b) => {
                for k in 0..w {
                    let (xa, xb) = (self.x[a * w + k], self.x[b * w + k]);
                    self.z[a * w + k] ^= xb;
                    self.z[b * w + k] ^= xa;
                }
            }
        }
    }
}

/// Compiled frame simulator for a circuit under a noise model.
#[derive(Clone, Debug)]
pub struct FrameSimulator {
    n: usize,
    layers: Vec<LayerProgram>,
    /// Measurement flip sources by `3 q + basis`.
    measurement: Vec<ErrorSource>,
}

impl FrameSimulator {
    pub fn new(circuit: &Circuit, noise: &NoiseModel) -> Result<Self, SimulationError> {
        noise
            .check_circuit(circuit)
            .map_err(|e| SimulationError::Noise(e.to_string()))?;
        let mut layers = vec![LayerProgram::default(); circuit.layers.len()];
        let mut measurement = Vec::with_capacity(3 * circuit.n);
        for ((id, _, _), ch) in circuit.parameters().gates().iter().zip(noise.channels()) {
            match *id {
                GateId::Gate { layer, gate } => {
                    let g = &circuit.layers[layer].gates[gate];
                    layers[layer].errors.push(ErrorSource::new(&g.qubits, &ch.probabilities));
                }
                GateId::Spam { .. } => measurement.push(ErrorSource::new(&[], &ch.probabilities)),
            }
        }
        for &id in circuit.unique_layers() {
            layers[id].ops = circuit.layers[id]
                .gates
                .iter()
                .filter_map(|g| match g.kind {
                    GateKind::H => Some(FrameOp::Swap(g.qubits[0])),
                    GateKind::S => Some(FrameOp::ZOfX(g.qubits[0])),
                    GateKind::CX => Some(FrameOp::Cx(g.qubits[0], g.qubits[1])),
                    GateKind::CZ => Some(FrameOp::Cz(g.qubits[0], g.qubits[1])),
                    // Pauli gates only change frame signs
                    _ => None,
                })
                .collect();
        }
        Ok(Self {
            n: circuit.n,
            layers,
            measurement,
        })
    }

    /// `+1` outcome counts for each row of `experiment`, in its row order.
    pub fn run_experiment(
        &self,
        block: &TupleBlock,
        experiment: &Experiment,
        key: ExperimentKey,
        shots: u64,
    ) -> Vec<u64> {
        let chunks = shots.div_ceil(CHUNK_SHOTS);
        let rows = experiment.rows.len();
        (0..chunks)
            .into_par_iter()
            .map(|chunk| {
                let len = CHUNK_SHOTS.min(shots - chunk * CHUNK_SHOTS);
                let mut rng = key.chunk_rng(chunk);
                let mut frames = Frames::new(self.n, CHUNK_WORDS);
                self.run_chunk(block, experiment, len, &mut rng, &mut frames)
            })
            .reduce(|| vec![0; rows], add_counts)
    }

    fn run_chunk(
        &self,
        block: &TupleBlock,
        experiment: &Experiment,
        shots: u64,
        rng: &mut ChaCha8Rng,
        frames: &mut Frames,
    ) -> Vec<u64> {
        let words = shots.div_ceil(64) as usize;
        for &layer in block.tuple.entries() {
            let program = &self.layers[layer];
            for src in &program.errors {
                let b = src.arity;
                src.for_each_error(shots, rng, |s, e| {
                    for k in 0..b {
                        let x = (e >> (2 * b - 1 - k)) & 1 == 1;
                        let z = (e >> (b - 1 - k)) & 1 == 1;
                        frames.flip(src.qubits[k], s, x, z);
                    }
                });
            }
            for &op in &program.ops {
                frames.apply(op);
            }
        }
        // outcome flips per measured qubit, in the order of the experiment's terms
        let terms = experiment.meas.terms();
        let mut flips = vec![0u64; terms.len() * CHUNK_WORDS];
        for (slot, &(q, p)) in terms.iter().enumerate() {
            let q = q as usize;
            let out = &mut flips[slot * CHUNK_WORDS..(slot + 1) * CHUNK_WORDS];
            let (xs, zs) = (
                &frames.x[q * frames.words..][..words],
                &frames.z[q * frames.words..][..words],
            );
            let basis = p.basis().expect("measured qubits carry a Pauli");
            for w in 0..words {
                out[w] = match basis {
                    Basis::X => zs[w],
                    Basis::Z => xs[w],
                    Basis::Y => xs[w] ^ zs[w],
                };
            }
            self.measurement[3 * q + basis.index()].for_each_error(shots, rng, |s, _| {
                out[(s / 64) as usize] ^= 1u64 << (s % 64);
            });
        }
        let last_mask = if shots % 64 == 0 { u64::MAX } else { (1u64 << (shots % 64)) - 1 };
        let mut parity = vec![0u64; words];
        experiment
            .rows
            .iter()
            .map(|&r| {
                parity.fill(0);
                for q in block.meas[r as usize].qubits() {
                    let slot = terms.binary_search_by_key(&q, |t| t.0).expect("row qubit is measured");
                    for (p, f) in parity.iter_mut().zip(&flips[slot * CHUNK_WORDS..]) {
                        *p ^= f;
                    }
                }
                parity[words - 1] &= last_mask;
                let odd: u64 = parity.iter().map(|w| w.count_ones() as u64).sum();
                shots - odd
            })
            .collect()
    }
}

fn add_counts(mut a: Vec<u64>, b: Vec<u64>) -> Vec<u64> {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
    a
}

/// Identifies an experiment's random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExperimentKey {
    pub seed: u64,
    pub tuple: u64,
    pub experiment: u64,
}

impl ExperimentKey {
    fn chunk_rng(&self, chunk: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.tuple.to_le_bytes());
        key[16..24].copy_from_slice(&self.experiment.to_le_bytes());
        key[24..].copy_from_slice(&chunk.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

/// Frame-simulates one experiment of a design for `shots` shots.
pub fn simulate_experiment(
    design: &ExperimentalDesign,
    noise: &NoiseModel,
    tuple: usize,
    experiment: usize,
    shots: u64,
    seed: u64,
) -> Result<Vec<u64>, SimulationError> {
    if shots == 0 {
        return Err(SimulationError::NoShots);
    }
    let block = design
        .blocks()
        .get(tuple)
        .ok_or(SimulationError::UnknownExperiment { tuple, experiment })?;
    let e = block
        .experiments
        .get(experiment)
        .ok_or(SimulationError::UnknownExperiment { tuple, experiment })?;
    let sim = FrameSimulator::new(design.circuit(), noise)?;
    let key = ExperimentKey {
        seed,
        tuple: tuple as u64,
        experiment: experiment as u64,
    };
    Ok(sim.run_experiment(block, e, key, shots))
}

/// Shots and `+1` counts of one simulated experiment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub tuple: usize,
    pub experiment: usize,
    pub shots: u64,
    /// Block-local rows, aligned with the experiment's slice of `counts`.
    pub rows: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseProvenance {
    pub generator: String,
    pub params: serde_json::Value,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub mode: SimulationMode,
    pub seed: u64,
    /// Requested measurement budget.
    pub budget: f64,
    pub noise: NoiseProvenance,
    pub tuples: Vec<LayerTuple>,
    /// Row count of each tuple block.
    pub block_rows: Vec<usize>,
    pub experiments: Vec<ExperimentRecord>,
}

/// Simulated outcomes of a whole design.
///
/// On disk: the 8 bytes `ACESOUT1`, the header length as a little-endian
/// `u64`, the header as JSON, then `counts` as little-endian `u64`s. The
/// counts run over experiments in header order and, within one, over its
/// `rows`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeDataset {
    pub header: DatasetHeader,
    pub counts: Vec<u64>,
}

impl OutcomeDataset {
    /// Offsets of each experiment's counts, plus the total.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.header.experiments.len() + 1);
        let mut at = 0;
        out.push(0);
        for e in &self.header.experiments {
            at += e.rows.len();
            out.push(at);
        }
        out
    }

    pub fn experiment_counts(&self, k: usize) -> &[u64] {
        let off = self.offsets();
        &self.counts[off[k]..off[k + 1]]
    }

    pub fn total_shots(&self) -> u64 {
        self.header.experiments.iter().map(|e| e.shots).sum()
    }

    /// Checks counts against shots and the layout against the header.
    pub fn validate(&self) -> Result<(), SimulationError> {
        let h = &self.header;
        if h.version != DATASET_FORMAT_VERSION {
            return Err(SimulationError::Format(format!("unsupported version {}", h.version)));
        }
        if h.block_rows.len() != h.tuples.len() {
            return Err(SimulationError::Format("block row counts do not match tuples".into()));
        }
        let expected: usize = h.experiments.iter().map(|e| e.rows.len()).sum();
        if expected != self.counts.len() {
            return Err(SimulationError::Format(format!(
                "{} counts for {expected} experiment rows",
                self.counts.len()
            )));
        }
        let mut at = 0;
        for e in &h.experiments {
            let rows = *h.block_rows.get(e.tuple).ok_or(SimulationError::Format(format!(
                "experiment refers to tuple {}",
                e.tuple
            )))?;
            for &r in &e.rows {
                if r as usize >= rows {
                    return Err(SimulationError::Format(format!("row {r} outside tuple {}", e.tuple)));
                }
                if self.counts[at] > e.shots {
                    return Err(SimulationError::Format(format!(
                        "count {} above {} shots",
                        self.counts[at], e.shots
                    )));
                }
                at += 1;
            }
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), SimulationError> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(8 * self.counts.len());
        for c in &self.counts {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, SimulationError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(SimulationError::Format("not an outcome dataset".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: DatasetHeader = serde_json::from_slice(&header)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if rest.len() % 8 != 0 {
            return Err(SimulationError::Format("truncated count array".into()));
        }
        let counts = rest
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let d = Self { header, counts };
        d.validate()?;
        Ok(d)
    }

    /// `tuple,experiment,row,shots,plus` with block-local rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tuple,experiment,row,shots,plus\n");
        let mut at = 0;
        for e in &self.header.experiments {
            for &r in &e.rows {
                out.push_str(&format!("{},{},{},{},{}\n", e.tuple, e.experiment, r, e.shots, self.counts[at]));
                at += 1;
            }
        }
        out
    }
}

/// Simulates every experiment of `design` with shots allocated from the
/// budget `total`.
pub fn simulate_design(
    design: &ExperimentalDesign,
    noise: &NoiseModel,
    total: f64,
    seed: u64,
    mode: SimulationMode,
) -> Result<OutcomeDataset, SimulationError> {
    let alloc = design.shot_allocation(total)?;
    let sim = match mode {
        SimulationMode::Frame => Some(FrameSimulator::new(design.circuit(), noise)?),
        SimulationMode::Independent => {
            noise
                .check_circuit(design.circuit())
                .map_err(|e| SimulationError::Noise(e.to_string()))?;
            None
        }
    };
    let x = noise.log_eigenvalues();
    let mut jobs = Vec::new();
    for (t, b) in design.blocks().iter().enumerate() {
        for k in 0..b.experiments.len() {
            jobs.push((t, k));
        }
    }
    let counts: Vec<Vec<u64>> = jobs
        .par_iter()
        .map(|&(t, k)| {
            let block = &design.blocks()[t];
            let e = &block.experiments[k];
            let shots = alloc.per_experiment[t];
            let key = ExperimentKey {
                seed,
                tuple: t as u64,
                experiment: k as u64,
            };
            if shots == 0 {
                return vec![0; e.rows.len()];
            }
            match &sim {
                Some(sim) => sim.run_experiment(block, e, key, shots),
                None => independent_counts(block, e, &x, key, shots),
            }
        })
        .collect();
    let experiments = jobs
        .iter()
        .map(|&(t, k)| ExperimentRecord {
            tuple: t,
            experiment: k,
            shots: alloc.per_experiment[t],
            rows: design.blocks()[t].experiments[k].rows.clone(),
        })
        .collect();
    Ok(OutcomeDataset {
        header: DatasetHeader {
            version: DATASET_FORMAT_VERSION,
            mode,
            seed,
            budget: total,
            noise: NoiseProvenance {
                generator: noise.generator.clone(),
                params: noise.params.clone(),
                seed: noise.seed,
            },
            tuples: design.tuples(),
            block_rows: design.blocks().iter().map(|b| b.rows()).collect(),
            experiments,
        },
        counts: counts.into_iter().flatten().collect(),
    })
}

fn independent_counts(block: &TupleBlock, e: &Experiment, x: &[f64], key: ExperimentKey, shots: u64) -> Vec<u64> {
    let mut rng = key.chunk_rng(0);
    e.rows
        .iter()
        .map(|&r| {
            let (cols, pow) = block.matrix.row(r as usize);
            let y: f64 = cols.iter().zip(pow).map(|(&c, &p)| x[c as usize] * p as f64).sum();
            let p = ((1.0 + (-y).exp()) / 2.0).clamp(0.0, 1.0);
            Binomial::new(shots, p).expect("probability in [0, 1]").sample(&mut rng)
        })
        .collect()
}
