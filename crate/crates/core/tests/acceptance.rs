//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test -p aces-core --test acceptance -- 3 8`.

mod common;

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use aces_core::circuit::{build_rotated_surface_circuit, build_unrotated_surface_circuit};
use aces_core::design::basic_tuple_set;
use aces_core::estimate::{estimate, FitConfig, FitMethod, GateType};
use aces_core::merit::{NrmseDistribution, ToyModel};
use aces_core::noise::{default_log_variance, depolarising_model, lognormal_model, ErrorRates};
use aces_core::optimise::{optimise_design, OptimiserConfig};
use aces_core::reference::reference_tuple_set;
use aces_core::simulate::{simulate_design, SimulationMode};
use aces_core::{Circuit, CliffordGate, ExperimentalDesign, GateKind, Layer, LayerClass, LayerTuple, LsKind, MeritModel, NoiseModel};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn rotated(d: usize) -> Arc<Circuit> {
    Arc::new(build_rotated_surface_circuit(d).expect("rotated circuit"))
}

fn lognormal_seed0(c: &Circuit) -> NoiseModel {
    lognormal_model(c, ErrorRates::default(), default_log_variance(), 0).expect("log-normal model")
}

fn merit(d: &ExperimentalDesign, noise: &NoiseModel, kind: LsKind) -> f64 {
    MeritModel::new(d, noise, kind).unwrap().evaluate(d.weights()).unwrap().merit
}

/// Least-squares slope of `y` against `x`.
fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Asymptotic Kolmogorov p-value with the usual small-sample correction.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let l = (sn + 0.12 + 0.11 / sn) * d;
    let p: f64 = (1..=100)
        .map(|k| {
            let k = k as f64;
            let sign = if k as u64 % 2 == 1 { 1.0 } else { -1.0 };
            2.0 * sign * (-2.0 * k * k * l * l).exp()
        })
        .sum();
    p.clamp(0.0, 1.0)
}

fn criterion_1() -> Outcome {
    let mut bad = Vec::new();
    for d in [3usize, 5, 7, 9, 11] {
        let r = build_rotated_surface_circuit(d).unwrap();
        if r.n != 2 * d * d - 1 || r.parameter_count() != 84 * d * d - 36 * d - 24 {
            bad.push(format!("rotated d={d}: n={} N={}", r.n, r.parameter_count()));
        }
        let u = build_unrotated_surface_circuit(d).unwrap();
        if u.n != (2 * d - 1).pow(2) || u.parameter_count() != 144 * d * d - 180 * d + 54 {
            bad.push(format!("unrotated d={d}: n={} N={}", u.n, u.parameter_count()));
        }
    }
    if bad.is_empty() {
        Outcome::new(true, "qubit and parameter counts exact for d = 3..11, both layouts")
    } else {
        Outcome::new(false, bad.join("; "))
    }
}

fn criterion_2() -> Outcome {
    let mut parts = Vec::new();
    let mut full_rank = true;
    let mut d3 = None;
    for d in [3usize, 5] {
        let c = rotated(d);
        let m = ExperimentalDesign::basic(c).unwrap().conditioning().unwrap();
        full_rank &= m.rank == 84 * d * d - 36 * d - 24;
        parts.push(format!("d={d}: rank {} cond {:.3} pinv {:.4}", m.rank, m.condition_number, m.pinv_norm));
        if d == 3 {
            d3 = Some(m);
        }
    }
    let m = d3.unwrap();
    let ok = full_rank
        && ((m.condition_number - 29.39) / 29.39).abs() < 0.02
        && ((m.pinv_norm - 5.4211) / 5.4211).abs() < 0.02;
    Outcome::new(ok, parts.join("; "))
}

fn criterion_3() -> Outcome {
    let c = rotated(3);
    let noise = depolarising_model(&c, ErrorRates::default()).unwrap();
    let basic = ExperimentalDesign::basic(c).unwrap();
    let model = MeritModel::new(&basic, &noise, LsKind::Wls).unwrap();
    let report = model.evaluate(basic.weights()).unwrap();
    let dist = NrmseDistribution::from_covariance(&model.covariance(basic.weights()).unwrap(), 200_000, 1).unwrap();
    let trials = 200;
    let mut v: Vec<f64> = (0..trials)
        .map(|seed| {
            let data = simulate_design(&basic, &noise, 1e8, seed, SimulationMode::Frame).unwrap();
            estimate(&basic, &data, FitMethod::Wls, &FitConfig::default(), Some(&noise))
                .unwrap()
                .metrics
                .unwrap()
                .nrmse
        })
        .collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd_mean = report.sd() / n.sqrt();
    let ks = v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = dist.cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    let p = ks_p_value(ks, v.len());
    let within = (mean - report.merit).abs() < 3.0 * sd_mean;
    Outcome::new(
        within && p > 0.01,
        format!(
            "F {:.4} (sd {:.4}), empirical mean {mean:.4} over {trials} trials, |diff| = {:.2} sd of the mean; KS D {ks:.4}, p {p:.3}",
            report.merit,
            report.sd(),
            (mean - report.merit).abs() / sd_mean
        ),
    )
}

/// The d = 3 design optimised for depolarising noise, shared by criteria 4 and 7.
fn optimised_d3() -> &'static ExperimentalDesign {
    static CELL: OnceLock<ExperimentalDesign> = OnceLock::new();
    CELL.get_or_init(|| {
        let c = rotated(3);
        let dep = depolarising_model(&c, ErrorRates::default()).unwrap();
        let t = Instant::now();
        let opt = optimise_design(c, &dep, &OptimiserConfig::default()).unwrap();
        eprintln!(
            "optimised d=3 design: {} tuples, F {:.4} in {:.0?}",
            opt.design.blocks().len(),
            opt.report.merit,
            t.elapsed()
        );
        opt.design
    })
}

fn criterion_4() -> Outcome {
    let c = rotated(3);
    let ln = lognormal_seed0(&c);
    let basic = ExperimentalDesign::basic(c).unwrap();
    let opt = optimised_d3();
    let (fb, fo) = (merit(&basic, &ln, LsKind::Wls), merit(opt, &ln, LsKind::Wls));
    Outcome::new(
        fb / fo >= 2.5,
        format!("F(basic) {fb:.4}, F(optimised) {fo:.4}, ratio {:.3} ({} tuples)", fb / fo, opt.blocks().len()),
    )
}

fn fd_relative_error(design: &ExperimentalDesign, noise: &NoiseModel) -> f64 {
    let w: Vec<f64> = {
        let v: Vec<f64> = design
            .weights()
            .iter()
            .enumerate()
            .map(|(k, x)| x * (1.0 + 0.25 * ((k * 5 % 7) as f64 - 3.0) / 3.0))
            .collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    };
    let mut worst = 0.0f64;
    for kind in [LsKind::Ols, LsKind::Wls, LsKind::Gls] {
        let m = MeritModel::new(design, noise, kind).unwrap();
        let (_, g) = m.gradient(&w).unwrap();
        let scale = g.iter().map(|x| x.abs()).fold(0.0, f64::max);
        for k in 0..w.len() {
            let h = 1e-5 * w[k];
            let (mut a, mut b) = (w.clone(), w.clone());
            a[k] += h;
            b[k] -= h;
            let fd = (m.evaluate(&a).unwrap().merit - m.evaluate(&b).unwrap().merit) / (2.0 * h);
            worst = worst.max((fd - g[k]).abs() / scale);
        }
    }
    worst
}

fn criterion_5() -> Outcome {
    let c = rotated(3);
    let mut tuples = basic_tuple_set(&c);
    tuples.extend([vec![1, 4], vec![0, 3, 2], vec![5, 4, 5, 4]].map(LayerTuple::new));
    let noise = depolarising_model(&c, ErrorRates::default()).unwrap();
    let d3 = ExperimentalDesign::build(c, &tuples).unwrap();
    let e3 = fd_relative_error(&d3, &noise);

    let layers = vec![
        Layer::new(LayerClass::SingleQubit, 29.0, vec![CliffordGate::one(GateKind::H, 0), CliffordGate::one(GateKind::S, 1)]),
        Layer::new(LayerClass::TwoQubit, 29.0, vec![CliffordGate::two(GateKind::CZ, 0, 1)]),
    ];
    let toy = Arc::new(Circuit::new("two-layer", 2, layers, 660.0, false, None).unwrap());
    let mut tuples = basic_tuple_set(&toy);
    tuples.extend([vec![0, 1], vec![1, 0, 1], vec![0, 0, 1, 1]].map(LayerTuple::new));
    let noise = depolarising_model(&toy, ErrorRates { r1: 0.01, r2: 0.03, rm: 0.02 }).unwrap();
    let dt = ExperimentalDesign::build(toy, &tuples).unwrap();
    let et = fd_relative_error(&dt, &noise);
    Outcome::new(
        e3 < 1e-6 && et < 1e-6,
        format!("max relative deviation from central differences: d=3 {e3:.1e}, two-layer circuit {et:.1e} (OLS, WLS, GLS)"),
    )
}

fn criterion_6() -> Outcome {
    let tau = 660.0 / 29.0;
    let lambdas = [0.99, 0.999, 0.9999];
    let opt = |l: f64, timed| ToyModel::new(l, 0.96, tau).unwrap().optimise(timed);
    let scaled: Vec<f64> = lambdas.iter().map(|&l| opt(l, false).repetitions_continuous * (1.0 - l)).collect();
    let (lo, hi) = scaled.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    let spread = (hi - lo) / hi;
    let timed: Vec<f64> = lambdas.iter().map(|&l| opt(l, true).repetitions_continuous * (1.0 - l)).collect();
    let fit = |timed, ls: &[f64]| {
        let x: Vec<f64> = ls.iter().map(|l| (1.0 - l).log10()).collect();
        let y: Vec<f64> = ls.iter().map(|&l| opt(l, timed).merit.log10()).collect();
        slope(&x, &y)
    };
    // slopes are taken over the small-infidelity decades where the laws are
    // asymptotic; the timed optimum is still drifting at 1 - lambda = 1e-2
    let asymptotic = [0.999, 0.9999, 0.99999];
    let (su, st) = (fit(false, &asymptotic), fit(true, &asymptotic));
    let (su_hi, st_hi) = (fit(false, &lambdas), fit(true, &lambdas));
    Outcome::new(
        spread < 0.1 && (su - 1.0).abs() < 0.05 && (st - 0.5).abs() < 0.05,
        format!(
            "repetitions x gate infidelity: sample-optimised {:.3?} (spread {:.1}%), time-optimised {:.3?}; log-log slopes over infidelity in [1e-5, 1e-3]: {su:.3} and {st:.3} (over [1e-4, 1e-2]: {su_hi:.3} and {st_hi:.3})",
            scaled,
            100.0 * spread,
            timed
        ),
    )
}

fn criterion_7() -> Outcome {
    let c = rotated(5);
    let noise = lognormal_seed0(&c);
    let design = optimised_d3().transfer(c).unwrap();
    let budgets = [1e6, 1e7, 1e8];
    let seeds = [0u64, 1];
    let mut medians: Vec<Vec<(GateType, f64)>> = Vec::new();
    for &s in &budgets {
        let mut acc: Vec<(GateType, f64)> = Vec::new();
        for &seed in &seeds {
            let data = simulate_design(&design, &noise, s, seed, SimulationMode::Frame).unwrap();
            let r = estimate(&design, &data, FitMethod::Wls, &FitConfig::default(), Some(&noise)).unwrap();
            for (k, v) in r.metrics.unwrap().median_tvd {
                match acc.iter_mut().find(|e| e.0 == k) {
                    Some(e) => e.1 += v / seeds.len() as f64,
                    None => acc.push((k, v / seeds.len() as f64)),
                }
            }
        }
        medians.push(acc);
    }
    let x: Vec<f64> = budgets.iter().map(|s| s.log10()).collect();
    let mut ok = true;
    let mut parts = Vec::new();
    for t in [GateType::Pauli, GateType::Measurement, GateType::Hadamard, GateType::Controlled] {
        let y: Vec<f64> = medians
            .iter()
            .map(|m| m.iter().find(|e| e.0 == t).map_or(f64::NAN, |e| e.1.log10()))
            .collect();
        let b = slope(&x, &y);
        if matches!(t, GateType::Pauli | GateType::Measurement) {
            ok &= (b + 0.5).abs() <= 0.075;
        }
        parts.push(format!("{} {b:.3}", t.label()));
    }
    Outcome::new(ok, format!("median TVD slopes vs log10 S: {}", parts.join(", ")))
}

fn criterion_8() -> Outcome {
    let circuits = common::micro_circuits(3);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(8);
    let mut exact_worst = 0.0f64;
    for c in &circuits {
        let noise = common::random_noise(c, &mut rng);
        let design = common::single_block_design(c);
        let oracle = common::block_eigenvalues(c, &noise, &design.blocks()[0]);
        for (a, b) in oracle.iter().zip(design.circuit_eigenvalues(&noise).unwrap()) {
            exact_worst = exact_worst.max((a - b).abs());
        }
    }
    let z = common::frame_deviations(&circuits, 1_000_000, 8);
    let over = z.iter().filter(|v| v.abs() > 4.0).count() as u64;
    let allowed = common::allowed_exceedances(z.len(), 4.0, 0.01);
    let max = z.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let wht = wht_checks();
    Outcome::new(
        exact_worst < 1e-12 && over <= allowed && wht < 1e-13,
        format!(
            "{} circuits, {} rows: analytic model vs dense oracle {exact_worst:.1e}; frame estimates beyond 4 SE {over} (allowed {allowed}), max |z| {max:.2}; transform and marginal identities {wht:.1e}",
            circuits.len(),
            z.len()
        ),
    )
}

/// Worst deviation in the transform round trip and the marginal-eigenvalue
/// identity over random three-qubit distributions, by dense enumeration.
fn wht_checks() -> f64 {
    use aces_core::noise::{marginalise, wht_forward, wht_inverse};
    use aces_core::pauli::local_index_of;
    use aces_core::Pauli1;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(81);
    let n = 3;
    let decode = |k: usize, a: usize| -> Vec<Pauli1> {
        (0..k)
            .map(|q| Pauli1::from_bits((a >> (2 * k - 1 - q)) & 1 == 1, (a >> (k - 1 - q)) & 1 == 1))
            .collect()
    };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let w: Vec<f64> = (0..1usize << (2 * n)).map(|_| rng.gen::<f64>().powi(3)).collect();
        let s: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|x| x / s).collect();
        let lam = wht_forward(&p).unwrap();
        for (b, &l) in lam.iter().enumerate() {
            let pb = decode(n, b);
            let direct: f64 = p
                .iter()
                .enumerate()
                .map(|(a, &pa)| {
                    let odd = decode(n, a).iter().zip(&pb).filter(|(x, y)| x.anticommutes(**y)).count() % 2;
                    if odd == 1 {
                        -pa
                    } else {
                        pa
                    }
                })
                .sum();
            worst = worst.max((l - direct).abs());
        }
        for (x, y) in wht_inverse(&lam).unwrap().iter().zip(&p) {
            worst = worst.max((x - y).abs());
        }
        for subset in [vec![1], vec![2, 0], vec![0, 1, 2]] {
            let lm = wht_forward(&marginalise(&p, &subset).unwrap()).unwrap();
            for (b, &l) in lm.iter().enumerate() {
                let local = decode(subset.len(), b);
                let mut full = vec![Pauli1::I; n];
                for (j, &q) in subset.iter().enumerate() {
                    full[q] = local[j];
                }
                worst = worst.max((l - lam[local_index_of(full.into_iter())]).abs());
            }
        }
    }
    worst
}

fn criterion_9() -> Outcome {
    let t = Instant::now();
    let c = rotated(15);
    let noise = lognormal_seed0(&c);
    let design = reference_tuple_set().to_design(c).unwrap();
    let built = t.elapsed();
    let data = simulate_design(&design, &noise, 1e6, 0, SimulationMode::Frame).unwrap();
    let simulated = t.elapsed();
    let r = estimate(&design, &data, FitMethod::Wls, &FitConfig::default(), Some(&noise)).unwrap();
    let total = t.elapsed();
    let m = r.metrics.unwrap();
    Outcome::new(
        total.as_secs_f64() < 1800.0,
        format!(
            "d=15 ({} rows, {} parameters): design {:.1?}, simulation {:.1?}, estimate {:.1?}, total {:.1?}; NRMSE {:.3}",
            design.row_count(),
            design.parameter_count(),
            built,
            simulated - built,
            total - simulated,
            total,
            m.nrmse
        ),
    )
}

fn criterion_10() -> Outcome {
    let c = rotated(25);
    let d = reference_tuple_set().to_design(c).unwrap();
    let (e, r, p) = (d.experiment_count(), d.row_count(), d.parameter_count());
    Outcome::new(
        e == 261 && r == 267_357 && p == 51_576,
        format!("{} tuples: {e} experiments, {r} rows, {p} gate eigenvalues", d.blocks().len()),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "structural counts", criterion_1),
        (2, "basic-design spectra", criterion_2),
        (3, "prediction vs simulation", criterion_3),
        (4, "optimisation gain", criterion_4),
        (5, "gradient vs finite differences", criterion_5),
        (6, "toy-model scaling", criterion_6),
        (7, "sample-efficiency trend", criterion_7),
        (8, "micro-circuit oracle", criterion_8),
        (9, "desk-scale pipeline", criterion_9),
        (10, "reference design counts", criterion_10),
    ];
    let mut failed = 0;
    for (k, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&k) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        failed += usize::from(!o.pass);
        println!(
            "criterion {k:>2} {}: {name}: {} [{:.1?}]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
