use aces_core::noise::{marginalise, project_simplex, wht_forward, wht_inverse};
use aces_core::pauli::{conjugate, pauli_mul, symplectic_form};
use aces_core::{CliffordGate, GateKind, Pauli1, PauliString};
use proptest::prelude::*;

const N: usize = 3;

fn pauli_string(n: usize) -> impl Strategy<Value = PauliString> {
    (prop::collection::vec(0u8..4, n), any::<bool>())
        .prop_map(|(codes, neg)| {
            let p: Vec<Pauli1> = codes.into_iter().map(Pauli1::from_code).collect();
            PauliString::from_paulis(&p).with_phase(if neg { 2 } else { 0 })
        })
}

fn gate(n: usize) -> impl Strategy<Value = CliffordGate> {
    use GateKind::*;
    let one = (prop::sample::select(vec![X, Y, Z, H, S]), 0..n).prop_map(|(k, q)| CliffordGate::one(k, q));
    let two = (prop::sample::select(vec![CX, CZ]), 0..n, 1..n)
        .prop_map(move |(k, a, off)| CliffordGate::two(k, a, (a + off) % n));
    prop_oneof![one, two]
}

/// A distribution over `4^b` Paulis.
fn distribution(b: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 1 << (2 * b)).prop_filter_map("all zero", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-6).then(|| w.iter().map(|x| x / s).collect())
    })
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn multiplying_twice_by_the_same_pauli_is_identity(a in pauli_string(N), b in pauli_string(N)) {
        let ab = pauli_mul(&a, &b).unwrap();
        prop_assert_eq!(pauli_mul(&ab, &b).unwrap(), a);
    }

    #[test]
    fn conjugation_preserves_commutation(a in pauli_string(N), b in pauli_string(N), g in gate(N)) {
        let before = symplectic_form(&a, &b).unwrap();
        let after = symplectic_form(&conjugate(&g, &a).unwrap(), &conjugate(&g, &b).unwrap()).unwrap();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn conjugation_by_gate_and_inverse_restores_signed_input(a in pauli_string(N), g in gate(N)) {
        let order = if g.kind == GateKind::S { 4 } else { 2 };
        let mut p = a.clone();
        for _ in 0..order {
            p = conjugate(&g, &p).unwrap();
        }
        prop_assert_eq!(p, a);
    }

    #[test]
    fn conjugation_is_multiplicative(a in pauli_string(N), b in pauli_string(N), g in gate(N)) {
        let lhs = conjugate(&g, &pauli_mul(&a, &b).unwrap()).unwrap();
        let rhs = pauli_mul(&conjugate(&g, &a).unwrap(), &conjugate(&g, &b).unwrap()).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn transform_round_trip(p in distribution(2)) {
        let back = wht_inverse(&wht_forward(&p).unwrap()).unwrap();
        for (x, y) in p.iter().zip(&back) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn recovered_valid_channels_are_not_projected(p in distribution(1)) {
        let raw = wht_inverse(&wht_forward(&p).unwrap()).unwrap();
        let projected = project_simplex(&raw);
        for (x, y) in p.iter().zip(&projected) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn marginal_eigenvalues_are_restricted_eigenvalues(
        p in distribution(3),
        subset in prop::sample::subsequence(vec![0usize, 1, 2], 1..=2),
    ) {
        let full = wht_forward(&p).unwrap();
        let marginal = wht_forward(&marginalise(&p, &subset).unwrap()).unwrap();
        let k = subset.len();
        for (local, &ev) in marginal.iter().enumerate() {
            let (lx, lz) = (local >> k, local & ((1 << k) - 1));
            let (mut x, mut z) = (0usize, 0usize);
            for (j, &q) in subset.iter().enumerate() {
                let bit = k - 1 - j;
                x |= ((lx >> bit) & 1) << (N - 1 - q);
                z |= ((lz >> bit) & 1) << (N - 1 - q);
            }
            prop_assert!((full[(x << N) | z] - ev).abs() < 1e-12);
        }
    }

    #[test]
    fn simplex_projection_is_nearest_feasible_point(
        v in prop::collection::vec(-1.0f64..2.0, 4),
        others in prop::collection::vec(distribution(1), 20),
    ) {
        let p = project_simplex(&v);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let best = dist2(&p, &v);
        for k in 0..4 {
            let mut e = vec![0.0; 4];
            e[k] = 1.0;
            prop_assert!(best <= dist2(&e, &v) + 1e-12);
        }
        for q in &others {
            prop_assert!(best <= dist2(q, &v) + 1e-12);
        }
    }
}

/// Brute-force grid check of the projection on a few fixed vectors.
#[test]
fn simplex_projection_beats_fine_grid() {
    let cases = [[0.3, 0.3, 0.3, 0.3], [1.5, -0.2, 0.1, 0.0], [0.9, 0.05, -0.01, 0.02]];
    let steps = 1000;
    for v in cases {
        let best = dist2(&project_simplex(&v), &v);
        for i in 0..=steps {
            for j in 0..=steps - i {
                // restrict the last two coordinates to a coarser sweep to keep the loop small
                for k in (0..=steps - i - j).step_by(50) {
                    let l = steps - i - j - k;
                    let q = [i, j, k, l].map(|c| c as f64 / steps as f64);
                    assert!(best <= dist2(&q, &v) + 1e-12, "{v:?} {q:?}");
                }
            }
        }
    }
}
