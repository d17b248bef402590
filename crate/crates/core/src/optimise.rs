//! Design optimisation: shot weights by Nesterov descent on log-weights,
//! repetition numbers of deep tuples by coordinate descent, random tuple
//! sampling and the greedy grow-and-shrink tuple set search.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{Circuit, GateId, LayerTuple};
use crate::design::{
    basic_time_factor, basic_tuple_set, DesignError, ExperimentalDesign, LsKind, TupleBlock, TupleOrigin,
};
use crate::merit::{BlockTerms, MeritError, MeritModel, MeritReport, ToyModel};
use crate::noise::NoiseModel;

#[derive(Debug, Error)]
pub enum OptimiseError {
    #[error(transparent)]
    Merit(#[from] MeritError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("invalid optimiser configuration: {0}")]
    Config(String),
}

/// Optimiser parameters. Defaults follow the usual published choices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimiserConfig {
    pub ls_kind: LsKind,
    /// Learning rate on the log-weights.
    pub eta: f64,
    /// Momentum coefficient.
    pub mu: f64,
    /// Learning-rate reduction factor after repeated reverts.
    pub eta_r: f64,
    pub max_steps: usize,
    /// Stop when F improved by less than this fraction over `tolerance_window` steps.
    pub tolerance: f64,
    pub tolerance_window: usize,
    /// `revert_limit` reverts within `revert_window` steps reduce the learning rate.
    pub revert_limit: usize,
    pub revert_window: usize,
    pub excursions: usize,
    pub excursion_length: usize,
    /// Target tuple set size; `None` means five times the unique layer count.
    pub set_size: Option<usize>,
    pub trial_factor: usize,
    pub seed: u64,
}

impl Default for OptimiserConfig {
    fn default() -> Self {
        Self {
            ls_kind: LsKind::Wls,
            eta: 10f64.powf(0.75),
            mu: 0.99,
            eta_r: 10f64.powf(0.25),
            max_steps: 1000,
            tolerance: 1e-6,
            tolerance_window: 10,
            revert_limit: 2,
            revert_window: 5,
            excursions: 3,
            excursion_length: 10,
            set_size: None,
            trial_factor: 20,
            seed: 0,
        }
    }
}

impl OptimiserConfig {
    pub fn validate(&self) -> Result<(), OptimiseError> {
        let bad = |m: &str| Err(OptimiseError::Config(m.into()));
        if !(self.eta > 0.0) || !(self.eta_r > 0.0) {
            return bad("eta and eta_r must be positive");
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad("mu must lie in [0, 1]");
        }
        if !(self.tolerance >= 0.0) {
            return bad("tolerance must be non-negative");
        }
        if self.max_steps == 0
            || self.tolerance_window == 0
            || self.revert_limit == 0
            || self.revert_window == 0
            || self.excursions == 0
            || self.excursion_length == 0
            || self.trial_factor == 0
            || self.set_size == Some(0)
        {
            return bad("integer parameters must be at least 1");
        }
        Ok(())
    }

    pub fn set_size_for(&self, c: &Circuit) -> usize {
        self.set_size.unwrap_or(5 * c.unique_layers().len())
    }
}

/// Something whose merit depends on normalised shot weights.
pub trait WeightObjective {
    fn merit(&self, weights: &[f64]) -> Result<f64, MeritError>;
    /// Merit and its gradient with respect to the log-weights `gamma`,
    /// `Gamma_T = exp(-gamma_T) / sum_U exp(-gamma_U)`.
    fn merit_and_log_gradient(&self, weights: &[f64]) -> Result<(f64, Vec<f64>), MeritError>;
}

impl WeightObjective for MeritModel {
    fn merit(&self, weights: &[f64]) -> Result<f64, MeritError> {
        Ok(self.evaluate(weights)?.merit)
    }

    fn merit_and_log_gradient(&self, weights: &[f64]) -> Result<(f64, Vec<f64>), MeritError> {
        let (r, g) = self.log_weight_gradient(weights)?;
        Ok((r.merit, g))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightOptimum {
    pub weights: Vec<f64>,
    pub initial_merit: f64,
    pub merit: f64,
    pub steps: usize,
    pub reverts: usize,
    /// Learning rate at termination.
    pub eta: f64,
}

fn softmax_neg(gamma: &[f64]) -> Vec<f64> {
    let m = gamma.iter().copied().filter(|g| g.is_finite()).fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = gamma.iter().map(|g| (-(g - m)).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Nesterov descent on the shot log-weights.
///
/// Written in the look-ahead variables `theta = gamma + mu v`, so every step
/// costs one merit-and-gradient evaluation: `v' = mu v - eta g(theta)` and
/// `theta' = theta + mu v' - eta g(theta)`. This generates the same iterates
/// as the usual form. A step that does not lower the merit at `theta'` is
/// reverted and zeroes the velocity; `revert_limit` reverts within
/// `revert_window` steps divide the learning rate by `eta_r`. Zero initial
/// weights stay zero.
pub fn optimise_weights<O: WeightObjective + ?Sized>(
    objective: &O,
    initial: &[f64],
    cfg: &OptimiserConfig,
) -> Result<WeightOptimum, OptimiseError> {
    cfg.validate()?;
    let total: f64 = initial.iter().sum();
    if initial.is_empty() || initial.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) {
        return Err(MeritError::Weights("weights must be non-negative with positive sum".into()).into());
    }
    let mut theta: Vec<f64> = initial.iter().map(|w| -(w / total).ln()).collect();
    let mut weights = softmax_neg(&theta);
    if initial.iter().filter(|w| **w > 0.0).count() < 2 {
        let merit = objective.merit(&weights)?;
        return Ok(WeightOptimum {
            weights,
            initial_merit: merit,
            merit,
            steps: 0,
            reverts: 0,
            eta: cfg.eta,
        });
    }
    let clean = |mut g: Vec<f64>, theta: &[f64]| {
        for (g, t) in g.iter_mut().zip(theta) {
            if !t.is_finite() || !g.is_finite() {
                *g = 0.0;
            }
        }
        g
    };
    let (initial_merit, g) = objective.merit_and_log_gradient(&weights)?;
    let mut grad = clean(g, &theta);
    let mut current = initial_merit;
    let mut out = WeightOptimum {
        weights: Vec::new(),
        initial_merit,
        merit: initial_merit,
        steps: 0,
        reverts: 0,
        eta: cfg.eta,
    };
    let mut v = vec![0.0; theta.len()];
    let mut eta = cfg.eta;
    let mut recent_reverts: VecDeque<usize> = VecDeque::new();
    let mut trace = vec![current];
    for step in 0..cfg.max_steps {
        let v_new: Vec<f64> = v.iter().zip(&grad).map(|(v, g)| cfg.mu * v - eta * g).collect();
        let cand: Vec<f64> = theta
            .iter()
            .zip(&v_new)
            .zip(&grad)
            .map(|((t, v), g)| t + cfg.mu * v - eta * g)
            .collect();
        let cand_w = softmax_neg(&cand);
        let accepted = match objective.merit_and_log_gradient(&cand_w) {
            Ok((f, g)) if f < current => {
                grad = clean(g, &cand);
                current = f;
                weights = cand_w;
                // keep the log-weights centred; the merit ignores a shift
                let shift = cand.iter().copied().filter(|x| x.is_finite()).fold(f64::INFINITY, f64::min);
                theta = cand.iter().map(|x| x - shift).collect();
                v = v_new;
                true
            }
            Ok(_) | Err(MeritError::RankDeficient(_) | MeritError::NotPositiveDefinite) => false,
            Err(e) => return Err(e.into()),
        };
        if !accepted {
            v.iter_mut().for_each(|x| *x = 0.0);
            out.reverts += 1;
            recent_reverts.push_back(step);
            while recent_reverts.front().is_some_and(|&s| s + cfg.revert_window <= step) {
                recent_reverts.pop_front();
            }
            if recent_reverts.len() >= cfg.revert_limit {
                eta /= cfg.eta_r;
                recent_reverts.clear();
            }
        }
        out.steps = step + 1;
        trace.push(current);
        let k = trace.len() - 1;
        if k >= cfg.tolerance_window && trace[k - cfg.tolerance_window] - current <= cfg.tolerance * current {
            break;
        }
    }
    out.weights = weights;
    out.merit = current;
    out.eta = eta;
    Ok(out)
}

/// Base tuples whose repetitions form the deep part of a design.
///
/// Without dynamical decoupling these are the non-empty basic tuples. With
/// it, single-qubit layers stand alone and each multi-qubit layer `m` becomes
/// `(m, dd, m, dd)`.
pub fn repeated_tuple_set(c: &Circuit) -> Vec<LayerTuple> {
    let dd = c.dd_layer().filter(|_| c.dynamically_decoupled);
    c.unique_layers()
        .iter()
        .map(|&i| match dd {
            Some(dd) if c.layers[i].has_multi_qubit_gate() => LayerTuple::new(vec![i, dd, i, dd]),
            _ => LayerTuple::new(vec![i]),
        })
        .collect()
}

fn nearest_odd(x: f64) -> usize {
    let k = ((x - 1.0) / 2.0).round().max(0.0) as usize;
    2 * k + 1
}

/// Starting repetition number for a base tuple: the nearest odd integer to
/// the toy-model optimum, using the product over the base's layers of each
/// layer's smallest gate eigenvalue and the smallest measurement eigenvalue.
pub fn initial_repetition(c: &Circuit, noise: &NoiseModel, base: &LayerTuple) -> Result<usize, OptimiseError> {
    let lam = noise.eigenvalues();
    let mut smallest: HashMap<usize, f64> = HashMap::new();
    let mut lambda_m = 1.0f64;
    for &(id, first, count) in c.parameters().gates() {
        let m = lam[first..first + count].iter().copied().fold(1.0, f64::min);
        match id {
            GateId::Gate { layer, .. } => {
                let e = smallest.entry(layer).or_insert(1.0);
                *e = e.min(m);
            }
            GateId::Spam { .. } => lambda_m = lambda_m.min(m),
        }
    }
    let lambda: f64 = base.entries().iter().map(|l| smallest.get(l).copied().unwrap_or(1.0)).product();
    let layer_time = c.tuple_duration(base).map_err(DesignError::from)? - c.meas_reset_time_ns;
    if !(lambda < 1.0) || !(layer_time > 0.0) {
        return Ok(1);
    }
    let toy = ToyModel::new(lambda, lambda_m.min(1.0 - 1e-12), c.meas_reset_time_ns / layer_time)?;
    Ok(nearest_odd(toy.optimise(true).repetitions_continuous))
}

/// One row of an optimisation trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub stage: String,
    pub action: String,
    pub tuple: String,
    pub tuples: usize,
    pub merit: f64,
}

/// Optimisation trace, exportable as CSV.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub entries: Vec<HistoryEntry>,
}

impl History {
    fn push(&mut self, stage: &str, action: &str, tuple: Option<&LayerTuple>, tuples: usize, merit: f64) {
        self.entries.push(HistoryEntry {
            step: self.entries.len(),
            stage: stage.into(),
            action: action.into(),
            tuple: tuple.map(tuple_label).unwrap_or_default(),
            tuples,
            merit,
        });
    }

    /// `step,stage,action,tuple,tuples,merit`; tuple entries are 0-based
    /// layer ids separated by spaces.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,stage,action,tuple,tuples,merit\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{},{},{},{:.12e}", e.step, e.stage, e.action, e.tuple, e.tuples, e.merit);
        }
        s
    }

    /// Merits of the entries that changed the tuple set or its weights.
    pub fn accepted_merits(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.action != "reject" && e.action != "restart")
            .map(|e| e.merit)
            .collect()
    }
}

fn tuple_label(t: &LayerTuple) -> String {
    let v: Vec<String> = t.entries().iter().map(|x| x.to_string()).collect();
    v.join(" ")
}

/// A tuple with the per-tuple structure the merit needs.
#[derive(Clone, Debug)]
pub struct SetMember {
    pub origin: TupleOrigin,
    pub block: Arc<TupleBlock>,
    pub terms: Arc<BlockTerms>,
}

impl SetMember {
    pub fn tuple(&self) -> &LayerTuple {
        &self.block.tuple
    }
}

/// Builds members for one circuit, noise model and estimator, reusing
/// members already built.
pub struct MemberFactory<'a> {
    circuit: Arc<Circuit>,
    noise: &'a NoiseModel,
    kind: LsKind,
    log_eigenvalues: Vec<f64>,
    tau_basic: f64,
    cache: HashMap<LayerTuple, (Arc<TupleBlock>, Arc<BlockTerms>)>,
}

impl<'a> MemberFactory<'a> {
    pub fn new(circuit: Arc<Circuit>, noise: &'a NoiseModel, kind: LsKind) -> Result<Self, OptimiseError> {
        noise
            .check_circuit(&circuit)
            .map_err(|e| DesignError::Noise(e.to_string()))?;
        Ok(Self {
            tau_basic: basic_time_factor(&circuit),
            log_eigenvalues: noise.log_eigenvalues(),
            circuit,
            noise,
            kind,
            cache: HashMap::new(),
        })
    }

    pub fn circuit(&self) -> &Arc<Circuit> {
        &self.circuit
    }

    pub fn kind(&self) -> LsKind {
        self.kind
    }

    /// Builds a member; `keep` stores it for reuse.
    pub fn member(&mut self, tuple: &LayerTuple, origin: TupleOrigin, keep: bool) -> Result<SetMember, OptimiseError> {
        if let Some((block, terms)) = self.cache.get(tuple) {
            return Ok(SetMember {
                origin,
                block: block.clone(),
                terms: terms.clone(),
            });
        }
        let block = Arc::new(TupleBlock::build(&self.circuit, tuple)?);
        let cov = block.relative_covariance(&self.log_eigenvalues, self.tau_basic);
        let terms = Arc::new(BlockTerms::build(&block, &cov, self.kind, 0)?);
        if keep {
            self.cache.insert(tuple.clone(), (block.clone(), terms.clone()));
        }
        Ok(SetMember { origin, block, terms })
    }

    pub fn model(&self, members: &[SetMember]) -> MeritModel {
        MeritModel::from_terms(
            self.kind,
            self.noise,
            members.iter().map(|m| m.block.duration_ns).collect(),
            members.iter().map(|m| m.terms.clone()).collect(),
        )
    }

    /// Merit of `members` at `weights`, or infinity if the set cannot
    /// estimate every gate eigenvalue.
    pub fn merit(&self, members: &[SetMember], weights: &[f64]) -> Result<f64, OptimiseError> {
        match self.model(members).evaluate(weights) {
            Ok(r) if r.merit.is_nan() => Ok(f64::INFINITY),
            Ok(r) => Ok(r.merit),
            Err(MeritError::RankDeficient(_) | MeritError::NotPositiveDefinite) => Ok(f64::INFINITY),
            Err(e) => Err(e.into()),
        }
    }

    pub fn optimise(
        &self,
        members: &[SetMember],
        initial: &[f64],
        cfg: &OptimiserConfig,
    ) -> Result<WeightOptimum, OptimiseError> {
        optimise_weights(&self.model(members), initial, cfg)
    }

    pub fn design(&self, members: &[SetMember], weights: Vec<f64>) -> Result<ExperimentalDesign, OptimiseError> {
        let mut d = ExperimentalDesign::from_blocks(
            self.circuit.clone(),
            members.iter().map(|m| m.block.clone()).collect(),
            members.iter().map(|m| m.origin.clone()).collect(),
        )?;
        let s: f64 = weights.iter().sum();
        d.set_weights(weights.iter().map(|w| w / s).collect())?;
        d.ls_kind = self.kind;
        Ok(d)
    }
}

/// A tuple set with optimised weights.
#[derive(Clone, Debug)]
pub struct TupleSet {
    pub members: Vec<SetMember>,
    pub weights: Vec<f64>,
    pub merit: f64,
}

impl TupleSet {
    pub fn tuples(&self) -> Vec<LayerTuple> {
        self.members.iter().map(|m| m.tuple().clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// The basic tuple set with optimised weights.
pub fn basic_set(f: &mut MemberFactory, cfg: &OptimiserConfig) -> Result<TupleSet, OptimiseError> {
    let members = basic_tuple_set(f.circuit())
        .iter()
        .map(|t| f.member(t, TupleOrigin::Basic, true))
        .collect::<Result<Vec<_>, _>>()?;
    let w0 = crate::design::default_weights(&members.iter().map(|m| m.block.duration_ns).collect::<Vec<_>>());
    let o = f.optimise(&members, &w0, cfg)?;
    Ok(TupleSet {
        members,
        weights: o.weights,
        merit: o.merit,
    })
}

#[derive(Clone, Debug)]
pub struct RepetitionOutcome {
    pub bases: Vec<LayerTuple>,
    pub repetitions: Vec<usize>,
    pub set: TupleSet,
    pub evaluations: usize,
}

/// Coordinate descent over odd repetition numbers of the repeated tuples,
/// with the basic tuple set always included.
///
/// Each coordinate steps by 2 in its last improving direction, doubling the
/// step after every improvement and falling back to 2, then to the other
/// direction, when a step fails. Shot weights are re-optimised, warm
/// started, before every merit evaluation. Stops after a full cycle with no
/// improvement.
pub fn optimise_repetitions(
    f: &mut MemberFactory,
    bases: &[LayerTuple],
    initial: &[usize],
    cfg: &OptimiserConfig,
    history: &mut History,
) -> Result<RepetitionOutcome, OptimiseError> {
    assert_eq!(bases.len(), initial.len());
    let basic = basic_tuple_set(f.circuit());
    let mut reps: Vec<usize> = initial.iter().map(|&r| nearest_odd(r as f64)).collect();
    let members_for = |f: &mut MemberFactory, reps: &[usize]| -> Result<Vec<SetMember>, OptimiseError> {
        let mut m = basic
            .iter()
            .map(|t| f.member(t, TupleOrigin::Basic, true))
            .collect::<Result<Vec<_>, _>>()?;
        for (b, &r) in bases.iter().zip(reps) {
            let origin = TupleOrigin::Repeated {
                base: b.clone(),
                repetitions: r,
            };
            m.push(f.member(&b.repeated(r), origin, true)?);
        }
        Ok(m)
    };
    let members = members_for(f, &reps)?;
    let w0 = crate::design::default_weights(&members.iter().map(|m| m.block.duration_ns).collect::<Vec<_>>());
    let o = f.optimise(&members, &w0, cfg)?;
    let mut best = TupleSet {
        members,
        weights: o.weights,
        merit: o.merit,
    };
    history.push("repetitions", "start", None, best.len(), best.merit);
    let mut seen: HashMap<Vec<usize>, f64> = HashMap::new();
    seen.insert(reps.clone(), best.merit);
    let mut evaluations = 1usize;
    let mut direction = vec![1i64; bases.len()];
    loop {
        let mut improved = false;
        for i in 0..bases.len() {
            let mut step = 2i64;
            let mut flipped = false;
            loop {
                let r = reps[i] as i64 + direction[i] * step;
                if r < 1 {
                    if step > 2 {
                        step = 2;
                        continue;
                    }
                    if flipped {
                        break;
                    }
                    flipped = true;
                    direction[i] = -direction[i];
                    continue;
                }
                let mut trial = reps.clone();
                trial[i] = r as usize;
                // a revisited point never beats the current one
                if !seen.contains_key(&trial) {
                    let members = members_for(f, &trial)?;
                    let o = f.optimise(&members, &best.weights, cfg)?;
                    evaluations += 1;
                    seen.insert(trial.clone(), o.merit);
                    if o.merit < best.merit {
                        best = TupleSet {
                            members,
                            weights: o.weights,
                            merit: o.merit,
                        };
                        reps = trial;
                        improved = true;
                        history.push("repetitions", "step", Some(&bases[i].repeated(reps[i])), best.len(), best.merit);
                        step *= 2;
                        flipped = true;
                        continue;
                    }
                }
                if step > 2 {
                    step = 2;
                } else if !flipped {
                    flipped = true;
                    direction[i] = -direction[i];
                } else {
                    break;
                }
            }
        }
        if !improved {
            break;
        }
    }
    Ok(RepetitionOutcome {
        bases: bases.to_vec(),
        repetitions: reps,
        set: best,
        evaluations,
    })
}

/// Generalised Zipf distribution on `1..=max` with weights `1/u^s`.
#[derive(Clone, Debug)]
pub struct Zipf {
    index: WeightedIndex<f64>,
}

impl Zipf {
    pub fn new(max: usize, s: f64) -> Self {
        let w: Vec<f64> = (1..=max.max(1)).map(|u| (u as f64).powf(-s)).collect();
        Self {
            index: WeightedIndex::new(w).expect("positive weights"),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index.sample(rng) + 1
    }
}

/// Random tuple generator over a circuit's unique layers.
///
/// Length is Zipf(1) on `1..=2l` for a circuit of `l` layers. Each tuple is
/// mirrored with probability 1/2, in which case the first
/// `floor((L - 1) / 2)` entries are followed by their reverse and one or two
/// free entries. With probability 1/2 each appended index is repeated a
/// Zipf(2) number of times, otherwise once. Dynamically decoupled circuits
/// append index pairs, never placing two multi-qubit layers next to each
/// other, and repeat a pair `ceil(k / 2)` times; entries that violate this
/// at the mirror point are redrawn with the length and rules kept.
#[derive(Clone, Debug)]
pub struct TupleSampler {
    layers: Vec<usize>,
    multi: Vec<bool>,
    dd: bool,
    max: usize,
    length: Zipf,
    copies: Zipf,
}

impl TupleSampler {
    pub fn new(c: &Circuit) -> Self {
        let layers = c.unique_layers().to_vec();
        let multi = layers.iter().map(|&i| c.layers[i].has_multi_qubit_gate()).collect();
        let max = 2 * c.layers.len();
        Self {
            layers,
            multi,
            dd: c.dynamically_decoupled && c.dd_layer().is_some(),
            max,
            length: Zipf::new(max, 1.0),
            copies: Zipf::new(max, 2.0),
        }
    }

    pub fn max_length(&self) -> usize {
        self.max
    }

    fn is_multi(&self, id: usize) -> bool {
        self.layers
            .iter()
            .position(|&l| l == id)
            .is_some_and(|k| self.multi[k])
    }

    /// Whether two multi-qubit layers are adjacent anywhere in `t`.
    pub fn violates(&self, t: &[usize]) -> bool {
        self.dd && t.windows(2).any(|w| self.is_multi(w[0]) && self.is_multi(w[1]))
    }

    fn draw_after<R: Rng + ?Sized>(&self, prev: Option<usize>, rng: &mut R) -> usize {
        let avoid_multi = self.dd && prev.is_some_and(|p| self.is_multi(p));
        let allowed: Vec<usize> = (0..self.layers.len()).filter(|&k| !(avoid_multi && self.multi[k])).collect();
        self.layers[allowed[rng.gen_range(0..allowed.len())]]
    }

    fn fill<R: Rng + ?Sized>(&self, out: &mut Vec<usize>, target: usize, multiple: bool, rng: &mut R) {
        while out.len() < target {
            let k = if multiple { self.copies.sample(rng) } else { 1 };
            if self.dd {
                let a = self.draw_after(out.last().copied(), rng);
                let b = self.draw_after(Some(a), rng);
                for _ in 0..k.div_ceil(2) {
                    out.push(a);
                    out.push(b);
                }
            } else {
                let a = self.draw_after(None, rng);
                out.extend(std::iter::repeat(a).take(k));
            }
            out.truncate(target);
        }
    }

    /// One draw of the tuple distribution.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> LayerTuple {
        let len = self.length.sample(rng);
        let mirror = rng.gen_bool(0.5);
        let multiple = rng.gen_bool(0.5);
        self.sample_with(len, mirror, multiple, rng)
    }

    /// A tuple of length `len` with the given mirror and copy rules; entries
    /// are redrawn until no two multi-qubit layers are adjacent.
    pub fn sample_with<R: Rng + ?Sized>(&self, len: usize, mirror: bool, multiple: bool, rng: &mut R) -> LayerTuple {
        assert!(len >= 1);
        loop {
            let mut t = Vec::with_capacity(len);
            if mirror {
                let half = (len - 1) / 2;
                self.fill(&mut t, half, multiple, rng);
                let rev: Vec<usize> = t.iter().rev().copied().collect();
                t.extend(rev);
            }
            self.fill(&mut t, len, multiple, rng);
            if !self.violates(&t) {
                return LayerTuple::new(t);
            }
        }
    }
}

/// Draws one random tuple from a circuit's tuple distribution.
pub fn sample_random_tuple<R: Rng + ?Sized>(c: &Circuit, rng: &mut R) -> LayerTuple {
    TupleSampler::new(c).sample(rng)
}

fn mix_in(weights: &[f64], share: f64) -> Vec<f64> {
    let mut w: Vec<f64> = weights.iter().map(|x| x * (1.0 - share)).collect();
    w.push(share);
    w
}

fn without(weights: &[f64], k: usize) -> Vec<f64> {
    let mut w = weights.to_vec();
    w.remove(k);
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter_mut().for_each(|x| *x /= s);
    }
    w
}

/// Greedy excursions that grow a tuple set with random tuples and shrink it
/// back, keeping only changes that lower the merit.
///
/// A candidate is screened by the exact first-order change in merit when it
/// takes an infinitesimal shot share (for OLS every candidate passes); those
/// that would lower the merit are added with weights re-optimised from a warm
/// start, and kept if the re-optimised merit is lower. The shrink phase ranks
/// removals by the merit with the removed weight redistributed, then
/// re-optimises the weights of the best removal. Duplicate samples are
/// redrawn without consuming a trial. The best set seen at the end of an
/// excursion is returned.
pub fn optimise_tuple_set(
    f: &mut MemberFactory,
    start: TupleSet,
    cfg: &OptimiserConfig,
    history: &mut History,
) -> Result<TupleSet, OptimiseError> {
    cfg.validate()?;
    let circuit = f.circuit().clone();
    let sampler = TupleSampler::new(&circuit);
    let l_set = cfg.set_size_for(&circuit);
    let cap = l_set + cfg.excursion_length;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut set = start;
    let mut best = set.clone();
    history.push("tuples", "start", None, set.len(), set.merit);
    for _ in 0..cfg.excursions {
        let mut trials = cfg.trial_factor * cap.saturating_sub(set.len());
        let mut screen = None;
        while set.len() < cap && trials > 0 {
            let mut duplicates = 0;
            let t = loop {
                let t = sampler.sample(&mut rng);
                if set.members.iter().all(|m| m.tuple() != &t) {
                    break Some(t);
                }
                duplicates += 1;
                if duplicates > 10_000 {
                    break None;
                }
            };
            let Some(t) = t else { break };
            trials -= 1;
            let cand = f.member(&t, TupleOrigin::Random, false)?;
            if f.kind() != LsKind::Ols {
                if screen.is_none() {
                    screen = Some(f.model(&set.members).evaluate_with_gradient(&set.weights)?);
                }
                let e = screen.as_ref().unwrap();
                let tau: f64 = set.weights.iter().zip(&set.members).map(|(w, m)| w * m.block.duration_ns).sum();
                if !(e.insertion_slope(&cand.terms, cand.block.duration_ns, tau) < 0.0) {
                    history.push("tuples", "reject", Some(&t), set.len(), set.merit);
                    continue;
                }
            }
            let mut members = set.members.clone();
            members.push(cand);
            let w0 = mix_in(&set.weights, 1.0 / members.len() as f64);
            let o = f.optimise(&members, &w0, cfg)?;
            if o.merit < set.merit {
                set = TupleSet {
                    members,
                    weights: o.weights,
                    merit: o.merit,
                };
                screen = None;
                history.push("tuples", "add", Some(&t), set.len(), set.merit);
            } else {
                history.push("tuples", "reject", Some(&t), set.len(), set.merit);
            }
        }
        while set.len() > 1 {
            let scores = (0..set.len())
                .map(|k| {
                    let mut m = set.members.clone();
                    m.remove(k);
                    f.merit(&m, &without(&set.weights, k))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let k = (0..scores.len()).min_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            if !scores[k].is_finite() {
                break;
            }
            let mut members = set.members.clone();
            let removed = members.remove(k);
            let o = f.optimise(&members, &without(&set.weights, k), cfg)?;
            if o.merit < set.merit || set.len() > l_set {
                set = TupleSet {
                    members,
                    weights: o.weights,
                    merit: o.merit,
                };
                history.push("tuples", "remove", Some(removed.tuple()), set.len(), set.merit);
            } else {
                break;
            }
        }
        if set.merit < best.merit {
            best = set.clone();
        }
        history.push("tuples", "excursion", None, set.len(), set.merit);
    }
    Ok(best)
}

/// Result of the full design optimisation.
#[derive(Clone, Debug)]
pub struct OptimisedDesign {
    pub design: ExperimentalDesign,
    pub report: MeritReport,
    pub basic_merit: f64,
    pub repetitions: Vec<(LayerTuple, usize)>,
    pub history: History,
}

/// Repetition numbers, then tuple set excursions, then final weights, all
/// against `noise`.
pub fn optimise_design(
    circuit: Arc<Circuit>,
    noise: &NoiseModel,
    cfg: &OptimiserConfig,
) -> Result<OptimisedDesign, OptimiseError> {
    cfg.validate()?;
    let mut f = MemberFactory::new(circuit.clone(), noise, cfg.ls_kind)?;
    let mut history = History::default();
    let basic = basic_set(&mut f, cfg)?;
    let basic_default = {
        let w = crate::design::default_weights(&basic.members.iter().map(|m| m.block.duration_ns).collect::<Vec<_>>());
        f.merit(&basic.members, &w)?
    };
    history.push("basic", "default", None, basic.len(), basic_default);
    history.push("basic", "weights", None, basic.len(), basic.merit);
    let bases = repeated_tuple_set(&circuit);
    let initial = bases
        .iter()
        .map(|b| initial_repetition(&circuit, noise, b))
        .collect::<Result<Vec<_>, _>>()?;
    let reps = optimise_repetitions(&mut f, &bases, &initial, cfg, &mut history)?;
    f.cache.retain(|_, _| false);
    let set = optimise_tuple_set(&mut f, reps.set, cfg, &mut history)?;
    let final_opt = f.optimise(&set.members, &set.weights, cfg)?;
    history.push("final", "weights", None, set.len(), final_opt.merit);
    let design = f.design(&set.members, final_opt.weights.clone())?;
    let report = f.model(&set.members).evaluate(design.weights())?;
    Ok(OptimisedDesign {
        design,
        report,
        basic_merit: basic_default,
        repetitions: reps.bases.into_iter().zip(reps.repetitions).collect(),
        history,
    })
}
