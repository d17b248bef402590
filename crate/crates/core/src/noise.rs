//! Pauli channels, Walsh-Hadamard transforms and noise-model generators.
//!
//! Distributions and eigenvalue vectors over the Paulis of `b` qubits are
//! indexed by the symplectic index of [`crate::pauli::local_index_of`], with
//! the identity first.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{Circuit, GateId};
use crate::pauli::local_label;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("length {0} is not a power of 4")]
    BadLength(usize),
    #[error("negative probability {0}")]
    Negative(f64),
    #[error("probabilities sum to {0}, not 1")]
    NotNormalised(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("noise model does not match circuit: {0}")]
    Mismatch(String),
    #[error("qubit {0} not in distribution support")]
    BadSubset(usize),
}

const PROB_TOL: f64 = 1e-12;

fn qubits_of_len(len: usize) -> Result<usize, NoiseError> {
    if len == 0 || !len.is_power_of_two() || len.trailing_zeros() % 2 != 0 {
        return Err(NoiseError::BadLength(len));
    }
    Ok(len.trailing_zeros() as usize / 2)
}

/// In-place Hadamard transform `v[k] <- sum_a (-1)^{a.k} v[a]`.
fn hadamard_in_place(v: &mut [f64]) {
    let mut h = 1;
    while h < v.len() {
        for i in (0..v.len()).step_by(2 * h) {
            for j in i..i + h {
                let (a, b) = (v[j], v[j + h]);
                v[j] = a + b;
                v[j + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// Unnormalised transform `out[a'] = sum_a (-1)^{omega(a, a')} v[a]`.
pub fn symplectic_transform(v: &[f64]) -> Result<Vec<f64>, NoiseError> {
    let b = qubits_of_len(v.len())?;
    let mut h = v.to_vec();
    hadamard_in_place(&mut h);
    let mask = (1usize << b) - 1;
    Ok((0..v.len())
        .map(|a| h[((a & mask) << b) | (a >> b)])
        .collect())
}

/// Eigenvalues of a Pauli channel from its error probabilities.
pub fn wht_forward(probabilities: &[f64]) -> Result<Vec<f64>, NoiseError> {
    validate_distribution(probabilities)?;
    let mut out = symplectic_transform(probabilities)?;
    out[0] = 1.0;
    Ok(out)
}

/// Error quasi-probabilities from channel eigenvalues.
pub fn wht_inverse(eigenvalues: &[f64]) -> Result<Vec<f64>, NoiseError> {
    let mut out = symplectic_transform(eigenvalues)?;
    let scale = 1.0 / eigenvalues.len() as f64;
    out.iter_mut().for_each(|x| *x *= scale);
    Ok(out)
}

pub fn validate_distribution(p: &[f64]) -> Result<(), NoiseError> {
    qubits_of_len(p.len())?;
    if let Some(&x) = p.iter().find(|&&x| !(x >= -PROB_TOL)) {
        return Err(NoiseError::Negative(x));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(NoiseError::NotNormalised(s));
    }
    Ok(())
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (j + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Marginal of a distribution over `n`-qubit Paulis onto `subset` (in the
/// given order).
pub fn marginalise(dist: &[f64], subset: &[usize]) -> Result<Vec<f64>, NoiseError> {
    let n = qubits_of_len(dist.len())?;
    for &q in subset {
        if q >= n {
            return Err(NoiseError::BadSubset(q));
        }
    }
    let k = subset.len();
    let mut out = vec![0.0; 1 << (2 * k)];
    for (a, &p) in dist.iter().enumerate() {
        let (xm, zm) = (a >> n, a & ((1 << n) - 1));
        let (mut lx, mut lz) = (0usize, 0usize);
        for &q in subset {
            let bit = n - 1 - q;
            lx = (lx << 1) | ((xm >> bit) & 1);
            lz = (lz << 1) | ((zm >> bit) & 1);
        }
        out[(lx << k) | lz] += p;
    }
    Ok(out)
}

/// Total variation distance.
pub fn tvd(p: &[f64], q: &[f64]) -> Result<f64, NoiseError> {
    if p.len() != q.len() {
        return Err(NoiseError::LengthMismatch(p.len(), q.len()));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Error distribution and eigenvalues of one gate or measurement.
///
/// Measurement channels hold `(1 - p_m, p_m)` and eigenvalues `(1, 1 - 2 p_m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateChannel {
    pub gate_id: GateId,
    pub probabilities: Vec<f64>,
    pub eigenvalues: Vec<f64>,
}

impl GateChannel {
    pub fn new(gate_id: GateId, probabilities: Vec<f64>) -> Result<Self, NoiseError> {
        let eigenvalues = match gate_id {
            GateId::Spam { .. } => {
                if probabilities.len() != 2 {
                    return Err(NoiseError::LengthMismatch(probabilities.len(), 2));
                }
                let pm = probabilities[1];
                if !(0.0..=1.0).contains(&pm) || (probabilities[0] + pm - 1.0).abs() > 1e-9 {
                    return Err(NoiseError::NotNormalised(probabilities[0] + pm));
                }
                vec![1.0, 1.0 - 2.0 * pm]
            }
            GateId::Gate { .. } => wht_forward(&probabilities)?,
        };
        Ok(Self {
            gate_id,
            probabilities,
            eigenvalues,
        })
    }

    /// Number of qubits for gate channels, zero for measurements.
    pub fn arity(&self) -> usize {
        match self.gate_id {
            GateId::Spam { .. } => 0,
            GateId::Gate { .. } => self.probabilities.len().trailing_zeros() as usize / 2,
        }
    }

    /// Infidelity, i.e. the total non-identity probability.
    pub fn infidelity(&self) -> f64 {
        1.0 - self.probabilities[0]
    }
}

/// Pauli noise on every gate of every unique layer plus `3n` measurements.
///
/// Channels are stored in the order of [`crate::circuit::ParameterIndex::gates`],
/// so the concatenated non-identity eigenvalues form the gate-eigenvalue
/// vector.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    pub generator: String,
    pub params: serde_json::Value,
    pub seed: Option<u64>,
    channels: Vec<GateChannel>,
    eigenvalues: Vec<f64>,
}

impl NoiseModel {
    pub fn from_channels(
        c: &Circuit,
        generator: impl Into<String>,
        params: serde_json::Value,
        seed: Option<u64>,
        channels: Vec<GateChannel>,
    ) -> Result<Self, NoiseError> {
        let index = c.parameters();
        if channels.len() != index.gates().len() {
            return Err(NoiseError::Mismatch(format!(
                "{} channels for {} gates",
                channels.len(),
                index.gates().len()
            )));
        }
        let mut eigenvalues = Vec::with_capacity(index.len());
        for (ch, &(id, offset, count)) in channels.iter().zip(index.gates()) {
            if ch.gate_id != id {
                return Err(NoiseError::Mismatch(format!(
                    "channel {:?} where {:?} expected",
                    ch.gate_id, id
                )));
            }
            if ch.eigenvalues.len() != count + 1 {
                return Err(NoiseError::Mismatch(format!(
                    "channel {:?} has {} entries, gate needs {}",
                    id,
                    ch.eigenvalues.len(),
                    count + 1
                )));
            }
            debug_assert_eq!(eigenvalues.len(), offset);
            eigenvalues.extend_from_slice(&ch.eigenvalues[1..]);
        }
        Ok(Self {
            generator: generator.into(),
            params,
            seed,
            channels,
            eigenvalues,
        })
    }

    /// Builds a model from one probability vector per gate channel.
    pub fn from_probabilities(
        c: &Circuit,
        generator: impl Into<String>,
        params: serde_json::Value,
        seed: Option<u64>,
        probabilities: Vec<Vec<f64>>,
    ) -> Result<Self, NoiseError> {
        let channels = c
            .parameters()
            .gates()
            .iter()
            .zip(probabilities)
            .map(|(&(id, _, _), p)| GateChannel::new(id, p))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_channels(c, generator, params, seed, channels)
    }

    pub fn channels(&self) -> &[GateChannel] {
        &self.channels
    }

    /// Gate-eigenvalue vector over the circuit's parameter columns.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `-log` of the gate eigenvalues.
    pub fn log_eigenvalues(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| -l.ln()).collect()
    }

    pub fn check_circuit(&self, c: &Circuit) -> Result<(), NoiseError> {
        let gates = c.parameters().gates();
        if gates.len() != self.channels.len()
            || gates.iter().zip(&self.channels).any(|(g, ch)| g.0 != ch.gate_id)
        {
            return Err(NoiseError::Mismatch(format!(
                "model has {} channels, circuit {} has {}",
                self.channels.len(),
                c.name,
                gates.len()
            )));
        }
        Ok(())
    }

    pub fn to_file(&self, c: &Circuit) -> NoiseModelFile {
        let channels = self
            .channels
            .iter()
            .map(|ch| {
                let paulis = match ch.gate_id {
                    GateId::Spam { .. } => vec!["no_flip".to_string(), "flip".to_string()],
                    GateId::Gate { layer, gate } => {
                        let b = c.layers[layer].gates[gate].arity();
                        (0..1 << (2 * b)).map(|a| local_label(a, b)).collect()
                    }
                };
                ChannelFile {
                    gate_id: ch.gate_id,
                    paulis,
                    probabilities: ch.probabilities.clone(),
                }
            })
            .collect();
        NoiseModelFile {
            generator: self.generator.clone(),
            params: self.params.clone(),
            seed: self.seed,
            channels,
        }
    }

    pub fn from_file(c: &Circuit, f: NoiseModelFile) -> Result<Self, NoiseError> {
        let channels = f
            .channels
            .into_iter()
            .map(|ch| GateChannel::new(ch.gate_id, ch.probabilities))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_channels(c, f.generator, f.params, f.seed, channels)
    }
}

/// JSON form of a noise model; eigenvalues are recomputed on load.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseModelFile {
    pub generator: String,
    pub params: serde_json::Value,
    pub seed: Option<u64>,
    pub channels: Vec<ChannelFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChannelFile {
    pub gate_id: GateId,
    pub paulis: Vec<String>,
    pub probabilities: Vec<f64>,
}

/// Average error rates for single-qubit gates, two-qubit gates and
/// measurements.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub r1: f64,
    pub r2: f64,
    pub rm: f64,
}

impl Default for ErrorRates {
    fn default() -> Self {
        Self {
            r1: 0.075e-2,
            r2: 0.5e-2,
            rm: 2e-2,
        }
    }
}

impl ErrorRates {
    fn check(&self) -> Result<(), NoiseError> {
        for (name, r) in [("r1", self.r1), ("r2", self.r2), ("rm", self.rm)] {
            if !(0.0..1.0).contains(&r) {
                return Err(NoiseError::InvalidParameter(format!("{name} = {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    fn for_arity(&self, b: usize) -> f64 {
        if b == 1 {
            self.r1
        } else {
            self.r2
        }
    }
}

/// Default total log-variance of log-normal gate infidelities.
pub fn default_log_variance() -> f64 {
    (10.0f64 / 9.0).ln()
}

/// Uniform errors: each of the `4^b - 1` non-identity Paulis has probability
/// `r_b / (4^b - 1)`, and every measurement flips with probability `rm`.
pub fn depolarising_model(c: &Circuit, rates: ErrorRates) -> Result<NoiseModel, NoiseError> {
    rates.check()?;
    let probs = c
        .parameters()
        .gates()
        .iter()
        .map(|&(id, _, count)| match id {
            GateId::Spam { .. } => vec![1.0 - rates.rm, rates.rm],
            GateId::Gate { .. } => {
                let b = (count + 1).trailing_zeros() as usize / 2;
                let r = rates.for_arity(b);
                let mut p = vec![r / count as f64; count + 1];
                p[0] = 1.0 - r;
                p
            }
        })
        .collect();
    NoiseModel::from_probabilities(
        c,
        "depolarising",
        serde_json::json!({"r1": rates.r1, "r2": rates.r2, "rm": rates.rm}),
        None,
        probs,
    )
}

/// Log-normal parameters `(mu, sigma^2)` for each non-identity Pauli error
/// probability of a `b`-qubit gate with mean infidelity `r`.
pub fn lognormal_gate_params(r: f64, b: usize, log_variance: f64) -> (f64, f64) {
    let bp = ((1usize << (2 * b)) - 1) as f64;
    let s2 = (1.0 + bp * (log_variance.exp() - 1.0)).ln();
    ((r / bp).ln() - s2 / 2.0, s2)
}

/// Log-normal parameters of a measurement flip probability.
pub fn lognormal_meas_params(rm: f64, log_variance: f64) -> (f64, f64) {
    (rm.ln() - log_variance / 2.0, log_variance)
}

/// Every non-identity error probability drawn independently log-normally.
///
/// Channel `k` is sampled from its own ChaCha stream of `seed`, so the model
/// does not depend on sampling order.
pub fn lognormal_model(
    c: &Circuit,
    rates: ErrorRates,
    log_variance: f64,
    seed: u64,
) -> Result<NoiseModel, NoiseError> {
    rates.check()?;
    if !(log_variance > 0.0) {
        return Err(NoiseError::InvalidParameter(format!(
            "log_variance = {log_variance} must be positive"
        )));
    }
    let mut probs = Vec::with_capacity(c.parameters().gates().len());
    for (k, &(id, _, count)) in c.parameters().gates().iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut draw = |mu: f64, s2: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            (mu + s2.sqrt() * z).exp()
        };
        let p = match id {
            GateId::Spam { .. } => {
                let (mu, s2) = lognormal_meas_params(rates.rm, log_variance);
                let pm = draw(mu, s2).min(0.5);
                vec![1.0 - pm, pm]
            }
            GateId::Gate { .. } => {
                let b = (count + 1).trailing_zeros() as usize / 2;
                let (mu, s2) = lognormal_gate_params(rates.for_arity(b), b, log_variance);
                let mut p = vec![0.0; count + 1];
                for x in p.iter_mut().skip(1) {
                    *x = draw(mu, s2);
                }
                let total: f64 = p.iter().sum();
                if total >= 1.0 {
                    return Err(NoiseError::InvalidParameter(format!(
                        "sampled infidelity {total} for {id:?}"
                    )));
                }
                p[0] = 1.0 - total;
                p
            }
        };
        probs.push(p);
    }
    NoiseModel::from_probabilities(
        c,
        "lognormal",
        serde_json::json!({
            "r1": rates.r1,
            "r2": rates.r2,
            "rm": rates.rm,
            "log_variance": log_variance,
        }),
        Some(seed),
        probs,
    )
}
