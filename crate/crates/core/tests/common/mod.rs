//! Dense two-qubit oracle: density-matrix evolution with explicit unitaries
//! and Pauli matrices, independent of the symplectic tables in the crate.
#![allow(dead_code)]

use std::sync::Arc;

use aces_core::circuit::{GateId, LAYER_TIME_NS, MEAS_RESET_TIME_NS};
use aces_core::design::{Experiment, TupleBlock};
use aces_core::{
    Basis, Circuit, CliffordGate, ExperimentalDesign, GateKind, Layer, LayerClass, LayerTuple,
    NoiseModel, Pauli1, SparsePauli,
};
use num_complex::Complex64 as C;
use rand::Rng;

pub const DIM: usize = 4;
pub type M = [[C; DIM]; DIM];
type M2 = [[C; 2]; 2];

const ZERO: C = C::new(0.0, 0.0);
const ONE: C = C::new(1.0, 0.0);
const I: C = C::new(0.0, 1.0);

pub fn pauli2(p: Pauli1) -> M2 {
    match p {
        Pauli1::I => [[ONE, ZERO], [ZERO, ONE]],
        Pauli1::X => [[ZERO, ONE], [ONE, ZERO]],
        Pauli1::Y => [[ZERO, -I], [I, ZERO]],
        Pauli1::Z => [[ONE, ZERO], [ZERO, -ONE]],
    }
}

fn single_unitary(kind: GateKind) -> M2 {
    let h = 0.5f64.sqrt();
    match kind {
        GateKind::I => pauli2(Pauli1::I),
        GateKind::X => pauli2(Pauli1::X),
        GateKind::Y => pauli2(Pauli1::Y),
        GateKind::Z => pauli2(Pauli1::Z),
        GateKind::H => [[C::new(h, 0.0), C::new(h, 0.0)], [C::new(h, 0.0), C::new(-h, 0.0)]],
        GateKind::S => [[ONE, ZERO], [ZERO, I]],
        k => panic!("no single-qubit unitary for {k:?}"),
    }
}

pub fn kron(a: &M2, b: &M2) -> M {
    let mut m = [[ZERO; DIM]; DIM];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    m[2 * i + k][2 * j + l] = a[i][j] * b[k][l];
                }
            }
        }
    }
    m
}

pub fn identity() -> M {
    let mut m = [[ZERO; DIM]; DIM];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = ONE;
    }
    m
}

pub fn mul(a: &M, b: &M) -> M {
    let mut m = [[ZERO; DIM]; DIM];
    for i in 0..DIM {
        for k in 0..DIM {
            for j in 0..DIM {
                m[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    m
}

pub fn dagger(a: &M) -> M {
    let mut m = [[ZERO; DIM]; DIM];
    for i in 0..DIM {
        for j in 0..DIM {
            m[i][j] = a[j][i].conj();
        }
    }
    m
}

pub fn add_scaled(acc: &mut M, a: &M, s: f64) {
    for i in 0..DIM {
        for j in 0..DIM {
            acc[i][j] += a[i][j] * s;
        }
    }
}

pub fn trace(a: &M) -> C {
    (0..DIM).map(|i| a[i][i]).sum()
}

pub fn conj_by(u: &M, a: &M) -> M {
    mul(&mul(u, a), &dagger(u))
}

/// Two-qubit Pauli matrix with qubit 0 as the left tensor factor.
pub fn pauli_matrix(p0: Pauli1, p1: Pauli1) -> M {
    kron(&pauli2(p0), &pauli2(p1))
}

pub fn sparse_matrix(p: &SparsePauli) -> M {
    let m = pauli_matrix(p.get(0), p.get(1));
    if p.is_negative() {
        let mut n = [[ZERO; DIM]; DIM];
        add_scaled(&mut n, &m, -1.0);
        n
    } else {
        m
    }
}

fn embed(u: &M2, q: usize) -> M {
    let id = pauli2(Pauli1::I);
    if q == 0 {
        kron(u, &id)
    } else {
        kron(&id, u)
    }
}

pub fn gate_unitary(g: &CliffordGate) -> M {
    match g.kind {
        GateKind::CZ => {
            let mut m = identity();
            m[3][3] = -ONE;
            m
        }
        GateKind::CX => {
            let (c, t) = (g.qubits[0], g.qubits[1]);
            let mut m = [[ZERO; DIM]; DIM];
            for b in 0..DIM {
                let bit = |q: usize, v: usize| (v >> (1 - q)) & 1;
                let out = if bit(c, b) == 1 { b ^ (1 << (1 - t)) } else { b };
                m[out][b] = ONE;
            }
            m
        }
        k => embed(&single_unitary(k), g.qubits[0]),
    }
}

pub fn layer_unitary(l: &Layer) -> M {
    l.gates
        .iter()
        .fold(identity(), |acc, g| mul(&gate_unitary(g), &acc))
}

/// Decodes a gate-local Pauli index: qubit `k` of a `b`-qubit gate has its
/// x bit at position `2b-1-k` and its z bit at `b-1-k`.
fn local_error(g: &CliffordGate, index: usize) -> M {
    let b = g.qubits.len();
    let mut p = [Pauli1::I; 2];
    for (k, &q) in g.qubits.iter().enumerate() {
        let x = (index >> (2 * b - 1 - k)) & 1 == 1;
        let z = (index >> (b - 1 - k)) & 1 == 1;
        p[q] = match (x, z) {
            (false, false) => Pauli1::I,
            (false, true) => Pauli1::Z,
            (true, false) => Pauli1::X,
            (true, true) => Pauli1::Y,
        };
    }
    pauli_matrix(p[0], p[1])
}

fn channel(noise: &NoiseModel, id: GateId) -> &[f64] {
    &noise
        .channels()
        .iter()
        .find(|ch| ch.gate_id == id)
        .expect("channel present")
        .probabilities
}

pub fn measurement_flip(noise: &NoiseModel, qubit: usize, basis: Basis) -> f64 {
    channel(noise, GateId::Spam { qubit, basis })[1]
}

/// Noisy evolution of `rho` through the layers of `tuple`: each gate's error
/// channel acts before the ideal layer.
pub fn evolve(c: &Circuit, noise: &NoiseModel, tuple: &LayerTuple, mut rho: M) -> M {
    for &id in tuple.entries() {
        let layer = &c.layers[id];
        for (j, g) in layer.gates.iter().enumerate() {
            let p = channel(noise, GateId::Gate { layer: id, gate: j });
            let mut next = [[ZERO; DIM]; DIM];
            for (idx, &pe) in p.iter().enumerate() {
                if pe != 0.0 {
                    let e = local_error(g, idx);
                    add_scaled(&mut next, &conj_by(&e, &rho), pe);
                }
            }
            rho = next;
        }
        rho = conj_by(&layer_unitary(layer), &rho);
    }
    rho
}

pub fn tuple_unitary(c: &Circuit, tuple: &LayerTuple) -> M {
    tuple
        .entries()
        .iter()
        .fold(identity(), |acc, &id| mul(&layer_unitary(&c.layers[id]), &acc))
}

/// Identifies `m` as `sign * P`; `None` if it is not a signed Pauli.
pub fn as_signed_pauli(m: &M) -> Option<(bool, Pauli1, Pauli1)> {
    const ALL: [Pauli1; 4] = [Pauli1::I, Pauli1::X, Pauli1::Y, Pauli1::Z];
    for p0 in ALL {
        for p1 in ALL {
            let ov = trace(&mul(&pauli_matrix(p0, p1), m)) / DIM as f64;
            if (ov - ONE).norm() < 1e-9 {
                return Some((false, p0, p1));
            }
            if (ov + ONE).norm() < 1e-9 {
                return Some((true, p0, p1));
            }
        }
    }
    None
}

fn basis_of(p: Pauli1) -> Basis {
    p.basis().expect("non-identity")
}

/// Density matrix of the product eigenstate of a positive Pauli, maximally
/// mixed off its support.
pub fn product_state(p: &SparsePauli) -> M {
    assert!(!p.is_negative());
    let mut factors = [pauli2(Pauli1::I); 2];
    for (q, f) in factors.iter_mut().enumerate() {
        let pq = pauli2(p.get(q as u32));
        for i in 0..2 {
            for j in 0..2 {
                let id = if i == j { ONE } else { ZERO };
                f[i][j] = (id + if p.get(q as u32) == Pauli1::I { ZERO } else { pq[i][j] }) * 0.5;
            }
        }
    }
    kron(&factors[0], &factors[1])
}

/// Exact joint law of one experiment: outcome probabilities over the signs
/// of the measured single-qubit Paulis, after measurement flips. Entry `o`
/// has bit `1 - q` set when qubit `q` reads −1.
pub fn experiment_law(
    c: &Circuit,
    noise: &NoiseModel,
    tuple: &LayerTuple,
    e: &Experiment,
) -> [f64; DIM] {
    let rho = evolve(c, noise, tuple, product_state(&e.prep));
    let mut law = [0.0; DIM];
    for (o, slot) in law.iter_mut().enumerate() {
        let mut proj = [pauli2(Pauli1::I); 2];
        for (q, f) in proj.iter_mut().enumerate() {
            let b = e.meas.get(q as u32);
            let sign = if (o >> (1 - q)) & 1 == 1 { -1.0 } else { 1.0 };
            let pb = pauli2(b);
            for i in 0..2 {
                for j in 0..2 {
                    let id = if i == j { ONE } else { ZERO };
                    f[i][j] = if b == Pauli1::I {
                        // unmeasured: only the "+1" slot carries the mass
                        if sign > 0.0 { id } else { ZERO }
                    } else {
                        (id + pb[i][j] * sign) * 0.5
                    };
                }
            }
        }
        *slot = trace(&mul(&kron(&proj[0], &proj[1]), &rho)).re;
    }
    for q in 0..2usize {
        let b = e.meas.get(q as u32);
        if b == Pauli1::I {
            continue;
        }
        let f = measurement_flip(noise, q, basis_of(b));
        let mut next = [0.0; DIM];
        for (o, &p) in law.iter().enumerate() {
            next[o] += (1.0 - f) * p;
            next[o ^ (1 << (1 - q))] += f * p;
        }
        law = next;
    }
    law
}

/// Expected value of a signed product of measured qubits under a law.
pub fn expectation(law: &[f64; DIM], qubits: &[usize], negative: bool) -> f64 {
    let v: f64 = law
        .iter()
        .enumerate()
        .map(|(o, &p)| {
            let odd = qubits.iter().filter(|&&q| (o >> (1 - q)) & 1 == 1).count() % 2;
            if odd == 1 {
                -p
            } else {
                p
            }
        })
        .sum();
    if negative {
        -v
    } else {
        v
    }
}

pub fn row_qubits(p: &SparsePauli) -> Vec<usize> {
    p.qubits().map(|q| q as usize).collect()
}

/// Ten layer options on two qubits: CZ, or one of {H, S, X} on each qubit.
pub fn micro_layers() -> Vec<Layer> {
    let mut out = vec![Layer::new(
        LayerClass::TwoQubit,
        LAYER_TIME_NS,
        vec![CliffordGate::two(GateKind::CZ, 0, 1)],
    )];
    let kinds = [GateKind::H, GateKind::S, GateKind::X];
    for a in kinds {
        for b in kinds {
            out.push(Layer::new(
                LayerClass::SingleQubit,
                LAYER_TIME_NS,
                vec![CliffordGate::one(a, 0), CliffordGate::one(b, 1)],
            ));
        }
    }
    out
}

/// Every circuit of one to `max_layers` layers over [`micro_layers`].
pub fn micro_circuits(max_layers: usize) -> Vec<Arc<Circuit>> {
    let options = micro_layers();
    let mut out = Vec::new();
    for len in 1..=max_layers {
        let count = options.len().pow(len as u32);
        for code in 0..count {
            let mut rest = code;
            let layers: Vec<Layer> = (0..len)
                .map(|_| {
                    let l = options[rest % options.len()].clone();
                    rest /= options.len();
                    l
                })
                .collect();
            let c = Circuit::new(format!("micro-{len}-{code}"), 2, layers, MEAS_RESET_TIME_NS, false, None)
                .expect("valid micro circuit");
            out.push(Arc::new(c));
        }
    }
    out
}

/// Tuple running every layer of the circuit once, in order.
pub fn full_tuple(c: &Circuit) -> LayerTuple {
    LayerTuple::new(c.unique_index().to_vec())
}

/// Random Pauli channels: gate identity mass in [0.7, 0.95] with the rest
/// spread at random; measurement flip probabilities in [0, 0.1].
pub fn random_noise(c: &Circuit, rng: &mut impl Rng) -> NoiseModel {
    let probs = c
        .parameters()
        .gates()
        .iter()
        .map(|&(id, _, count)| match id {
            GateId::Spam { .. } => {
                let p = rng.gen_range(0.0..0.1);
                vec![1.0 - p, p]
            }
            GateId::Gate { .. } => {
                let keep = rng.gen_range(0.7..0.95);
                let w: Vec<f64> = (0..count).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = w.iter().sum();
                std::iter::once(keep)
                    .chain(w.iter().map(|x| (1.0 - keep) * x / s))
                    .collect()
            }
        })
        .collect();
    NoiseModel::from_probabilities(c, "random", serde_json::Value::Null, None, probs)
        .expect("valid random channels")
}

/// Oracle eigenvalue of every row of a block, from each row's experiment.
pub fn block_eigenvalues(c: &Circuit, noise: &NoiseModel, block: &TupleBlock) -> Vec<f64> {
    let mut out = vec![f64::NAN; block.meas.len()];
    for e in &block.experiments {
        let law = experiment_law(c, noise, &block.tuple, e);
        for &r in &e.rows {
            let m = &block.meas[r as usize];
            out[r as usize] = expectation(&law, &row_qubits(m), m.is_negative());
        }
    }
    out
}

pub fn single_block_design(c: &Arc<Circuit>) -> ExperimentalDesign {
    ExperimentalDesign::build(c.clone(), &[full_tuple(c)]).expect("design builds")
}

/// Standardised deviations of frame-simulated row estimates from the oracle
/// over every row of every circuit, with a fresh random noise model per
/// circuit.
pub fn frame_deviations(circuits: &[Arc<Circuit>], shots: u64, seed: u64) -> Vec<f64> {
    use aces_core::simulate::{ExperimentKey, FrameSimulator};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut z = Vec::new();
    for (i, c) in circuits.iter().enumerate() {
        let noise = random_noise(c, &mut rng);
        let design = single_block_design(c);
        let block = &design.blocks()[0];
        let exact = block_eigenvalues(c, &noise, block);
        let sim = FrameSimulator::new(c, &noise).expect("simulator builds");
        for (k, e) in block.experiments.iter().enumerate() {
            let key = ExperimentKey {
                seed: seed ^ i as u64,
                tuple: 0,
                experiment: k as u64,
            };
            let counts = sim.run_experiment(block, e, key, shots);
            for (&r, &plus) in e.rows.iter().zip(&counts) {
                let lam = exact[r as usize];
                let est = 2.0 * plus as f64 / shots as f64 - 1.0;
                let se = ((1.0 - lam * lam).max(1e-12) / shots as f64).sqrt();
                z.push((est - lam) / se);
            }
        }
    }
    z
}

/// Largest exceedance count of `|z| > threshold` among `n` independent
/// normal deviations whose chance of being exceeded is below `alpha`.
pub fn allowed_exceedances(n: usize, threshold: f64, alpha: f64) -> u64 {
    use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};
    let tail = 2.0 * Normal::standard().sf(threshold);
    let b = Binomial::new(tail, n as u64).expect("valid binomial");
    (0..=n as u64).find(|&k| b.sf(k) < alpha).unwrap_or(n as u64)
}
