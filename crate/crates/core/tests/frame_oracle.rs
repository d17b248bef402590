mod common;

use aces_core::noise::{marginalise, wht_forward, wht_inverse};
use aces_core::simulate::{ExperimentKey, FrameSimulator};
use aces_core::Pauli1;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn measured_paulis_match_dense_conjugation() {
    for c in micro_circuits(3) {
        let design = single_block_design(&c);
        let block = &design.blocks()[0];
        let u = tuple_unitary(&c, &block.tuple);
        for (a, m) in block.prep.iter().zip(&block.meas) {
            let image = conj_by(&u, &sparse_matrix(a));
            let (neg, p0, p1) = as_signed_pauli(&image).expect("Clifford image");
            assert_eq!((neg, p0, p1), (m.is_negative(), m.get(0), m.get(1)), "{}", c.name);
        }
    }
}

#[test]
fn design_eigenvalues_match_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for c in micro_circuits(3) {
        let noise = random_noise(&c, &mut rng);
        let design = single_block_design(&c);
        let exact = block_eigenvalues(&c, &noise, &design.blocks()[0]);
        let model = design.circuit_eigenvalues(&noise).unwrap();
        for (a, b) in exact.iter().zip(&model) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-12, "worst deviation {worst:e}");
}

#[test]
fn frame_estimates_within_four_standard_errors() {
    let circuits = micro_circuits(2);
    let z = frame_deviations(&circuits, 100_000, 5);
    let over = z.iter().filter(|v| v.abs() > 4.0).count() as u64;
    let allowed = allowed_exceedances(z.len(), 4.0, 0.01);
    assert!(over <= allowed, "{over} of {} rows beyond 4 SE", z.len());
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (z.len() - 1) as f64;
    assert!(mean.abs() < 5.0 / (z.len() as f64).sqrt(), "mean {mean}");
    assert!((var - 1.0).abs() < 0.15, "variance {var}");
}

/// Pairwise covariance of co-measured rows: model, dense law and a Monte Carlo
/// estimate over repeated runs.
#[test]
fn comeasured_row_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let circuits: Vec<_> = micro_circuits(2).into_iter().filter(|c| c.layers.len() == 2).collect();
    let mut checked = 0;
    for c in &circuits {
        let noise = random_noise(c, &mut rng);
        let design = single_block_design(c);
        let block = &design.blocks()[0];
        let x = noise.log_eigenvalues();
        let lam = block.circuit_eigenvalues(&x);
        let e_count = block.experiments.len() as f64;
        // one shot per experiment: pooled log-covariance of the block
        let model = block.relative_covariance(&x, 1.0).scaled(1.0 / e_count);
        let mut dense = vec![vec![0.0; lam.len()]; lam.len()];
        for e in &block.experiments {
            let law = experiment_law(c, &noise, &block.tuple, e);
            for &i in &e.rows {
                for &j in &e.rows {
                    let (i, j) = (i as usize, j as usize);
                    let (mi, mj) = (&block.meas[i], &block.meas[j]);
                    let mut q = row_qubits(mi);
                    for s in row_qubits(mj) {
                        if let Some(p) = q.iter().position(|&t| t == s) {
                            q.remove(p);
                        } else {
                            q.push(s);
                        }
                    }
                    let joint = expectation(&law, &q, mi.is_negative() ^ mj.is_negative());
                    let cov = joint - lam[i] * lam[j];
                    let m = (block.multiplicity[i] * block.multiplicity[j]) as f64;
                    dense[i][j] += cov / (m * lam[i] * lam[j]);
                }
            }
        }
        for (i, row) in dense.iter().enumerate() {
            for (j, &d) in row.iter().enumerate() {
                let got = model.get(i, j);
                assert!((got - d).abs() < 1e-10 * (1.0 + d.abs()), "{} rows {i},{j}: {got} vs {d}", c.name);
                checked += usize::from(i != j && d != 0.0);
            }
        }
    }
    assert!(checked > 0);

    // Monte Carlo: sample covariance of two co-measured rows across runs.
    let c = circuits
        .iter()
        .find(|c| {
            let d = single_block_design(c);
            d.blocks()[0].experiments.iter().any(|e| e.rows.len() >= 3)
        })
        .expect("a circuit with a multi-row experiment");
    let noise = random_noise(c, &mut rng);
    let design = single_block_design(c);
    let block = &design.blocks()[0];
    let (k, e) = block
        .experiments
        .iter()
        .enumerate()
        .find(|(_, e)| e.rows.len() >= 3)
        .unwrap();
    let law = experiment_law(c, &noise, &block.tuple, e);
    let sim = FrameSimulator::new(c, &noise).unwrap();
    let (runs, shots) = (3000usize, 2000u64);
    let samples: Vec<Vec<f64>> = (0..runs)
        .map(|run| {
            let key = ExperimentKey { seed: 1000 + run as u64, tuple: 0, experiment: k as u64 };
            sim.run_experiment(block, e, key, shots)
                .iter()
                .map(|&p| 2.0 * p as f64 / shots as f64 - 1.0)
                .collect()
        })
        .collect();
    let rows = e.rows.len();
    let mean: Vec<f64> = (0..rows).map(|a| samples.iter().map(|s| s[a]).sum::<f64>() / runs as f64).collect();
    for a in 0..rows {
        for b in a + 1..rows {
            let (ma, mb) = (&block.meas[e.rows[a] as usize], &block.meas[e.rows[b] as usize]);
            let la = expectation(&law, &row_qubits(ma), ma.is_negative());
            let lb = expectation(&law, &row_qubits(mb), mb.is_negative());
            let mut q = row_qubits(ma);
            for s in row_qubits(mb) {
                if let Some(p) = q.iter().position(|&t| t == s) {
                    q.remove(p);
                } else {
                    q.push(s);
                }
            }
            let exact = (expectation(&law, &q, ma.is_negative() ^ mb.is_negative()) - la * lb) / shots as f64;
            let emp = samples.iter().map(|s| (s[a] - mean[a]) * (s[b] - mean[b])).sum::<f64>() / (runs - 1) as f64;
            let va = (1.0 - la * la) / shots as f64;
            let vb = (1.0 - lb * lb) / shots as f64;
            let se = ((va * vb + exact * exact) / runs as f64).sqrt();
            assert!((emp - exact).abs() < 5.0 * se, "rows {a},{b}: {emp:e} vs {exact:e} (se {se:e})");
        }
    }
}

fn random_distribution(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..1usize << (2 * n)).map(|_| rng.gen::<f64>().powi(3)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Paulis on `n` qubits in the crate's index order: x mask then z mask, qubit
/// 0 most significant.
fn paulis_of(n: usize, a: usize) -> Vec<Pauli1> {
    (0..n)
        .map(|q| {
            let x = (a >> (2 * n - 1 - q)) & 1 == 1;
            let z = (a >> (n - 1 - q)) & 1 == 1;
            Pauli1::from_bits(x, z)
        })
        .collect()
}

/// Commutation by dense matrices for up to two qubits.
fn anticommute_dense(a: &[Pauli1], b: &[Pauli1]) -> bool {
    let pad = |p: &[Pauli1]| -> (Pauli1, Pauli1) { (p[0], p.get(1).copied().unwrap_or(Pauli1::I)) };
    let (a0, a1) = pad(a);
    let (b0, b1) = pad(b);
    let (pa, pb) = (pauli_matrix(a0, a1), pauli_matrix(b0, b1));
    let ab = mul(&pa, &pb);
    let ba = mul(&pb, &pa);
    let diff: f64 = (0..DIM).flat_map(|i| (0..DIM).map(move |j| (i, j))).map(|(i, j)| (ab[i][j] + ba[i][j]).norm()).sum();
    diff < 1e-12
}

#[test]
fn transform_matches_dense_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 1..=2 {
        for _ in 0..50 {
            let p = random_distribution(n, &mut rng);
            let lam = wht_forward(&p).unwrap();
            for (b, &l) in lam.iter().enumerate() {
                let pb = paulis_of(n, b);
                let direct: f64 = p
                    .iter()
                    .enumerate()
                    .map(|(a, &pa)| if anticommute_dense(&paulis_of(n, a), &pb) { -pa } else { pa })
                    .sum();
                assert!((l - direct).abs() < 1e-14, "n={n} b={b}");
            }
            let back = wht_inverse(&lam).unwrap();
            for (x, y) in back.iter().zip(&p) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn marginal_eigenvalues_restrict_full_eigenvalues() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 3;
    for _ in 0..30 {
        let p = random_distribution(n, &mut rng);
        let full = wht_forward(&p).unwrap();
        for subset in [vec![0], vec![2], vec![0, 2], vec![2, 1], vec![1, 0, 2]] {
            let marg = marginalise(&p, &subset).unwrap();
            assert!((marg.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            let k = subset.len();
            let lm = wht_forward(&marg).unwrap();
            for (b, &l) in lm.iter().enumerate() {
                let local = paulis_of(k, b);
                let mut embedded = vec![Pauli1::I; n];
                for (j, &q) in subset.iter().enumerate() {
                    embedded[q] = local[j];
                }
                let idx = aces_core::pauli::local_index_of(embedded.into_iter());
                assert!((l - full[idx]).abs() < 1e-14);
            }
        }
    }
}
