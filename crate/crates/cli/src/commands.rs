use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use aces_core::estimate::{estimate, FitConfig, FitMethod};
use aces_core::merit::{NrmseDistribution, ToyModel};
use aces_core::optimise::{optimise_design, OptimiserConfig};
use aces_core::reference::reference_tuple_set;
use aces_core::simulate::{simulate_design, SimulationMode};
use aces_core::{ExperimentalDesign, LsKind, MeritModel, MeritReport, NoiseModel};
use clap::Args;
use serde::Serialize;
use serde_json::json;

use crate::error::CliError;
use crate::inputs::{self, Layout, NoiseArgs, NoiseKind};
use crate::manifest::Recorder;

fn print_summary(value: &serde_json::Value) -> Result<(), CliError> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn ls_kind_of(method: FitMethod) -> LsKind {
    match method {
        FitMethod::Ols => LsKind::Ols,
        FitMethod::Wls => LsKind::Wls,
        FitMethod::Fgls => LsKind::Gls,
    }
}

#[derive(Debug, Args, Serialize)]
pub struct CircuitArgs {
    #[arg(long, value_enum, default_value = "rotated")]
    pub layout: Layout,
    /// Code distance (odd, at least 3)
    #[arg(long, short)]
    pub distance: usize,
    /// Output directory
    #[arg(long, short)]
    pub out: PathBuf,
}

pub fn circuit(args: CircuitArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("circuit", &args.out, &args, None)?;
    let c = inputs::surface_circuit(args.layout, args.distance)?;
    rec.stage("build");
    let summary = serde_json::to_value(c.summary())?;
    let basic = ExperimentalDesign::basic(inputs::shared(c.clone()))?;
    rec.stage("basic design");
    rec.write_json("circuit.json", &c)?;
    rec.write("basic_design.json", &inputs::design_json(&basic)?)?;
    rec.write_json("summary.json", &summary)?;
    rec.stage("write");
    rec.finish()?;
    print_summary(&summary)
}

#[derive(Debug, Args, Serialize)]
pub struct OptimiseArgs {
    /// Circuit JSON; a rotated circuit at --distance is generated otherwise
    #[arg(long, conflicts_with = "distance")]
    pub circuit: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "rotated")]
    pub layout: Layout,
    #[arg(long, short)]
    pub distance: Option<usize>,
    #[arg(long, default_value_t = aces_core::noise::ErrorRates::default().r1)]
    pub r1: f64,
    #[arg(long, default_value_t = aces_core::noise::ErrorRates::default().r2)]
    pub r2: f64,
    #[arg(long, default_value_t = aces_core::noise::ErrorRates::default().rm)]
    pub rm: f64,
    /// Estimator the design is tuned for: ols, wls or gls
    #[arg(long, default_value = "wls")]
    pub estimator: LsKind,
    #[arg(long)]
    pub seed: u64,
    /// Optimiser configuration JSON; missing fields take their defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
}

pub fn optimise(args: OptimiseArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("optimise", &args.out, &args, Some(args.seed))?;
    let c = match &args.circuit {
        Some(p) => {
            rec.input(p);
            inputs::load_circuit(p)?
        }
        None => inputs::surface_circuit(args.layout, args.distance.unwrap_or(3))?,
    };
    let mut cfg: OptimiserConfig = match &args.config {
        Some(p) => {
            rec.input(p);
            read_json(p)?
        }
        None => OptimiserConfig::default(),
    };
    cfg.ls_kind = args.estimator;
    cfg.seed = args.seed;
    let rates = aces_core::noise::ErrorRates {
        r1: args.r1,
        r2: args.r2,
        rm: args.rm,
    };
    let c = inputs::shared(c);
    let target = aces_core::noise::depolarising_model(&c, rates)?;
    rec.stage("setup");
    let opt = optimise_design(c, &target, &cfg)?;
    rec.stage("optimise");
    rec.write("design.json", &inputs::design_json(&opt.design)?)?;
    rec.write("history.csv", opt.history.to_csv().as_bytes())?;
    let summary = json!({
        "basic_merit": opt.basic_merit,
        "merit": opt.report.merit,
        "merit_sd": opt.report.sd(),
        "ratio": opt.basic_merit / opt.report.merit,
        "tuples": opt.design.blocks().len(),
        "experiments": opt.design.experiment_count(),
        "repetitions": opt.repetitions,
    });
    rec.write_json("summary.json", &summary)?;
    rec.stage("write");
    rec.finish()?;
    print_summary(&summary)
}

#[derive(Debug, Args, Serialize)]
pub struct TransferArgs {
    /// Design JSON to rebuild
    #[arg(long, required_unless_present = "reference")]
    pub design: Option<PathBuf>,
    /// Use the bundled 31-tuple distance-3 reference design instead
    #[arg(long, conflicts_with = "design")]
    pub reference: bool,
    /// Target code distance
    #[arg(long, short)]
    pub distance: usize,
    #[arg(long, short)]
    pub out: PathBuf,
}

pub fn transfer(args: TransferArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("transfer", &args.out, &args, None)?;
    let source = match &args.design {
        Some(p) => {
            rec.input(p);
            inputs::load_design(p)?
        }
        None => reference_tuple_set().to_design(inputs::shared(inputs::surface_circuit(Layout::Rotated, 3)?))?,
    };
    let target = inputs::resize(source.circuit(), args.distance)?;
    rec.stage("load");
    let moved = source.transfer(inputs::shared(target))?;
    rec.stage("transfer");
    rec.write("design.json", &inputs::design_json(&moved)?)?;
    let summary = json!({ "source": source.summary(), "target": moved.summary() });
    rec.write_json("summary.json", &summary)?;
    rec.stage("write");
    rec.finish()?;
    print_summary(&summary)
}

#[derive(Debug, Args, Serialize)]
pub struct RunArgs {
    #[arg(long)]
    pub design: PathBuf,
    #[command(flatten)]
    pub noise: NoiseArgs,
    /// Total measurement budget in shots
    #[arg(long, short)]
    pub shots: f64,
    #[arg(long)]
    pub seed: u64,
    /// frame (Pauli-frame Monte Carlo) or independent (per-row binomial)
    #[arg(long, default_value = "frame")]
    pub mode: SimulationMode,
    /// Least-squares fit: ols, wls or fgls
    #[arg(long, default_value = "wls")]
    pub method: FitMethod,
    /// Fit configuration JSON
    #[arg(long)]
    pub fit_config: Option<PathBuf>,
    /// Also write the outcome counts as CSV
    #[arg(long)]
    pub csv: bool,
    #[arg(long, short)]
    pub out: PathBuf,
}

/// Merit report, or `None` when the design is too large for the dense path.
fn predicted(design: &ExperimentalDesign, noise: &NoiseModel, kind: LsKind) -> Result<Option<MeritReport>, CliError> {
    match MeritModel::new(design, noise, kind).and_then(|m| m.evaluate(design.weights())) {
        Ok(r) => Ok(Some(r)),
        Err(aces_core::merit::MeritError::TooLarge(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn run(args: RunArgs) -> Result<(), CliError> {
    if !(args.shots >= 1.0) {
        return Err(CliError::usage(format!("--shots must be at least 1, got {}", args.shots)));
    }
    let mut rec = Recorder::new("run", &args.out, &args, Some(args.seed))?;
    rec.input(&args.design);
    if let Some(p) = &args.noise.noise_file {
        rec.input(p);
    }
    let design = inputs::load_design(&args.design)?;
    let noise = args.noise.build(design.circuit())?;
    let cfg: FitConfig = match &args.fit_config {
        Some(p) => {
            rec.input(p);
            read_json(p)?
        }
        None => FitConfig::default(),
    };
    rec.write_json("noise.json", &noise.to_file(design.circuit()))?;
    rec.stage("setup");
    let data = simulate_design(&design, &noise, args.shots, args.seed, args.mode)?;
    rec.stage("simulate");
    let mut bin = Vec::new();
    data.write_to(&mut bin)?;
    rec.write("dataset.bin", &bin)?;
    if args.csv {
        rec.write("dataset.csv", data.to_csv().as_bytes())?;
    }
    rec.stage("write dataset");
    let report = estimate(&design, &data, args.method, &cfg, Some(&noise))?;
    rec.stage("estimate");
    let prediction = predicted(&design, &noise, ls_kind_of(args.method))?;
    rec.stage("predict");
    rec.write_json("report.json", &report)?;
    rec.write("distributions.csv", report.distributions_csv(design.circuit(), Some(&noise)).as_bytes())?;
    if let Some(m) = report.metrics_csv() {
        rec.write("metrics.csv", m.as_bytes())?;
    }
    let metrics = report.metrics.as_ref();
    let summary = json!({
        "shots": data.total_shots(),
        "rows": design.row_count(),
        "parameters": design.parameter_count(),
        "method": report.fit.method,
        "method_used": report.fit.method_used,
        "nrmse": metrics.map(|m| m.nrmse),
        "predicted_merit": prediction.as_ref().map(|r| r.merit),
        "predicted_sd": prediction.as_ref().map(|r| r.sd()),
        "median_tvd": metrics.map(|m| m.median_tvd.iter().map(|(k, v)| (k.label(), *v)).collect::<std::collections::BTreeMap<_, _>>()),
        "projected_channels": report.projected_channels,
    });
    rec.write_json("summary.json", &summary)?;
    rec.stage("write report");
    rec.finish()?;
    print_summary(&summary)
}

#[derive(Debug, Args, Serialize)]
pub struct ScalingArgs {
    /// Design to evaluate, rebuilt at every distance
    #[arg(long)]
    pub design: PathBuf,
    /// Comma-separated code distances
    #[arg(long, value_delimiter = ',', required = true)]
    pub distances: Vec<usize>,
    #[command(flatten)]
    pub noise: NoiseArgs,
    /// Log-normal instances per distance, seeded from --noise-seed upwards
    #[arg(long, default_value_t = 10)]
    pub ensemble: u64,
    /// Override the design's estimator: ols, wls or gls
    #[arg(long)]
    pub estimator: Option<LsKind>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct ScalingRow {
    distance: usize,
    parameters: usize,
    merit: f64,
    merit_sd: f64,
    trace_sigma: f64,
    trace_sigma_sq: f64,
    ensemble_sd: f64,
}

/// Least-squares quadratic `a + b d + c d^2` with per-point relative residuals.
#[derive(Debug, Serialize)]
struct QuadraticFit {
    coefficients: [f64; 3],
    relative_residuals: Vec<f64>,
}

fn fit_quadratic(x: &[f64], y: &[f64]) -> Option<QuadraticFit> {
    if x.len() < 3 {
        return None;
    }
    // normal equations in a centred, scaled variable keep the 3x3 system well conditioned
    let mx = x.iter().sum::<f64>() / x.len() as f64;
    let sx = x.iter().map(|v| (v - mx).abs()).fold(0.0, f64::max).max(1.0);
    let t: Vec<f64> = x.iter().map(|v| (v - mx) / sx).collect();
    let mut a = [[0.0; 3]; 3];
    let mut r = [0.0; 3];
    for (&ti, &yi) in t.iter().zip(y) {
        let f = [1.0, ti, ti * ti];
        for i in 0..3 {
            r[i] += f[i] * yi;
            for j in 0..3 {
                a[i][j] += f[i] * f[j];
            }
        }
    }
    let c = solve3(a, r)?;
    // back to powers of d
    let (c0, c1, c2) = (c[0], c[1] / sx, c[2] / (sx * sx));
    let coefficients = [c0 - c1 * mx + c2 * mx * mx, c1 - 2.0 * c2 * mx, c2];
    let relative_residuals = t
        .iter()
        .zip(y)
        .map(|(&ti, &yi)| (c[0] + c[1] * ti + c[2] * ti * ti - yi) / yi)
        .collect();
    Some(QuadraticFit {
        coefficients,
        relative_residuals,
    })
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&a);
    if d.abs() < 1e-300 {
        return None;
    }
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut m = a;
        for i in 0..3 {
            m[i][k] = b[i];
        }
        *o = det(&m) / d;
    }
    Some(out)
}

pub fn scaling(args: ScalingArgs) -> Result<(), CliError> {
    let seed = args.noise.noise_seed;
    let mut rec = Recorder::new("scaling", &args.out, &args, seed)?;
    rec.input(&args.design);
    if args.noise.noise_file.is_some() {
        return Err(CliError::usage("scaling generates noise per distance; --noise-file is not accepted"));
    }
    if args.ensemble == 0 {
        return Err(CliError::usage("--ensemble must be at least 1"));
    }
    let source = inputs::load_design(&args.design)?;
    let kind = args.estimator.unwrap_or(source.ls_kind);
    rec.stage("load");
    let mut rows = Vec::new();
    for &d in &args.distances {
        let design = source.transfer(inputs::shared(inputs::resize(source.circuit(), d)?))?;
        let seeds: Vec<Option<u64>> = match args.noise.noise {
            NoiseKind::Depolarising => vec![None],
            NoiseKind::Lognormal => {
                let base = seed.ok_or_else(|| CliError::usage("--noise lognormal needs an explicit --noise-seed"))?;
                (0..args.ensemble).map(|k| Some(base + k)).collect()
            }
        };
        let reports = seeds
            .iter()
            .map(|&s| {
                let noise = args.noise.build_synthetic(design.circuit(), s)?;
                Ok(MeritModel::new(&design, &noise, kind)?.evaluate(design.weights())?)
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let k = reports.len() as f64;
        let mean = |f: fn(&MeritReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        let merit = mean(|r| r.merit);
        let ensemble_sd = if reports.len() > 1 {
            (reports.iter().map(|r| (r.merit - merit).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(ScalingRow {
            distance: d,
            parameters: design.parameter_count(),
            merit,
            merit_sd: mean(|r| r.sd()),
            trace_sigma: mean(|r| r.trace_sigma),
            trace_sigma_sq: mean(|r| r.trace_sigma_sq),
            ensemble_sd,
        });
        rec.stage(&format!("distance {d}"));
    }
    let mut csv = String::from("distance,parameters,merit,merit_sd,trace_sigma,trace_sigma_sq,ensemble_sd\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.distance, r.parameters, r.merit, r.merit_sd, r.trace_sigma, r.trace_sigma_sq, r.ensemble_sd
        );
    }
    let x: Vec<f64> = rows.iter().map(|r| r.distance as f64).collect();
    let fits = json!({
        "estimator": kind,
        "noise": args.noise.noise,
        "trace_sigma": fit_quadratic(&x, &rows.iter().map(|r| r.trace_sigma).collect::<Vec<_>>()),
        "trace_sigma_sq": fit_quadratic(&x, &rows.iter().map(|r| r.trace_sigma_sq).collect::<Vec<_>>()),
        "rows": rows,
    });
    rec.write("scaling.csv", csv.as_bytes())?;
    rec.write_json("fits.json", &fits)?;
    rec.stage("write");
    rec.finish()?;
    print_summary(&fits)
}

#[derive(Debug, Args, Serialize)]
pub struct MeritArgs {
    #[arg(long)]
    pub design: PathBuf,
    #[command(flatten)]
    pub noise: NoiseArgs,
    /// Override the design's estimator: ols, wls or gls
    #[arg(long)]
    pub estimator: Option<LsKind>,
    /// Monte Carlo draws of the predicted NRMSE distribution (0 skips it)
    #[arg(long, default_value_t = 0)]
    pub draws: usize,
    /// Seed of the distribution draws
    #[arg(long, default_value_t = 0)]
    pub draw_seed: u64,
    #[arg(long, short)]
    pub out: PathBuf,
}

pub fn merit(args: MeritArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("merit", &args.out, &args, args.noise.noise_seed)?;
    rec.input(&args.design);
    if let Some(p) = &args.noise.noise_file {
        rec.input(p);
    }
    let design = inputs::load_design(&args.design)?;
    let noise = args.noise.build(design.circuit())?;
    let kind = args.estimator.unwrap_or(design.ls_kind);
    rec.stage("load");
    let model = MeritModel::new(&design, &noise, kind)?;
    let report = model.evaluate(design.weights())?;
    rec.stage("merit");
    let distribution = if args.draws > 0 {
        let d = NrmseDistribution::from_covariance(&model.covariance(design.weights())?, args.draws, args.draw_seed)?;
        rec.stage("distribution");
        let quantiles: Vec<_> = [0.025, 0.25, 0.5, 0.75, 0.975]
            .iter()
            .map(|&p| json!({"p": p, "nrmse": d.quantile(p)}))
            .collect();
        Some(json!({
            "draws": args.draws,
            "mean": d.mean,
            "sd": d.sd,
            "quantiles": quantiles,
        }))
    } else {
        None
    };
    let summary = json!({
        "estimator": kind,
        "merit": report.merit,
        "merit_sd": report.sd(),
        "trace_sigma": report.trace_sigma,
        "trace_sigma_sq": report.trace_sigma_sq,
        "time_factor": report.time_factor,
        "parameters": report.n,
        "distribution": distribution,
    });
    rec.write_json("merit.json", &summary)?;
    rec.stage("write");
    rec.finish()?;
    print_summary(&summary)
}

#[derive(Debug, Args, Serialize)]
pub struct ToyArgs {
    /// Comma-separated gate eigenvalues
    #[arg(long, value_delimiter = ',', default_value = "0.99,0.999,0.9999")]
    pub eigenvalues: Vec<f64>,
    /// SPAM eigenvalue
    #[arg(long, default_value_t = 0.96)]
    pub spam_eigenvalue: f64,
    /// Measurement time in units of the layer time
    #[arg(long, default_value_t = aces_core::circuit::MEAS_RESET_TIME_NS / aces_core::circuit::LAYER_TIME_NS)]
    pub measurement_time: f64,
    /// Points per merit curve
    #[arg(long, default_value_t = 200)]
    pub points: usize,
    #[arg(long, short)]
    pub out: PathBuf,
}

pub fn toy(args: ToyArgs) -> Result<(), CliError> {
    if args.points < 2 {
        return Err(CliError::usage("--points must be at least 2"));
    }
    let mut rec = Recorder::new("toy", &args.out, &args, None)?;
    let mut optima = String::from("eigenvalue,merit_kind,repetitions,repetitions_continuous,deep_weight,merit\n");
    let mut curves = String::from("eigenvalue,repetitions,merit_timed,merit_untimed\n");
    let mut summary = Vec::new();
    for &l in &args.eigenvalues {
        let toy = ToyModel::new(l, args.spam_eigenvalue, args.measurement_time)?;
        for (kind, timed) in [("timed", true), ("untimed", false)] {
            let o = toy.optimise(timed);
            let _ = writeln!(optima, "{l},{kind},{},{},{},{}", o.repetitions, o.repetitions_continuous, o.deep_weight, o.merit);
            summary.push(json!({"eigenvalue": l, "merit_kind": kind, "optimum": o}));
        }
        // log grid up to ten times the untimed optimum
        let hi = (10.0 * toy.optimise(false).repetitions_continuous).max(10.0);
        for k in 0..args.points {
            let phi = hi.powf(k as f64 / (args.points - 1) as f64);
            let _ = writeln!(
                curves,
                "{l},{phi},{},{}",
                toy.merit_at_optimal_weight(0.0, phi),
                toy.merit_untimed_at_optimal_weight(0.0, phi)
            );
        }
    }
    rec.stage("evaluate");
    rec.write("toy_optima.csv", optima.as_bytes())?;
    rec.write("toy_curves.csv", curves.as_bytes())?;
    rec.stage("write");
    rec.finish()?;
    print_summary(&json!(summary))
}
