//! Experiment drivers and their output format.
//!
//! Results are long-format rows `experiment,repetition,step,metric,value`
//! plus a JSON manifest holding the spec and a summary. Every driver is a
//! pure function of its spec and seed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::models::{sample_batch, shard, CharLm, CharLmConfig, LinearRegression, Mlp, Split, Task};
use crate::optim::{step_in_place, AdamWConfig, AdamWSRState, EpsPlacement, Schedule};
use crate::policy::{PolicyPreset, PrecisionPolicy};
use crate::replica::{stream_id, ReplicaGroup, ROLE_DATA, ROLE_INIT, ROLE_OPT};
use crate::rounding::{round_stochastic, Address, RoundRng};
use crate::tensor::{Precision, Tensor};

const HIT_STREAM: u64 = 0x4849_5400;
const CORR_STREAM: u64 = 0x434F_5200;

/// One output row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment: String,
    pub repetition: u32,
    pub step: u64,
    pub metric: String,
    pub value: f64,
}

impl MetricsRecord {
    pub fn new(experiment: &str, repetition: u32, step: u64, metric: &str, value: f64) -> Self {
        Self {
            experiment: experiment.to_owned(),
            repetition,
            step,
            metric: metric.to_owned(),
            value,
        }
    }
}

// ---------------------------------------------------------------- hitting time

/// Hitting time of the SR random walk between two adjacent grid points.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HittingResult {
    pub epsilon: f64,
    pub empirical_mean: f64,
    pub stderr: f64,
    pub analytic_mean: f64,
    pub hits: Vec<u64>,
}

/// `3/2 + 1/(4 eps)`.
pub fn hitting_time_mean(epsilon: f64) -> f64 {
    1.5 + 0.25 / epsilon
}

/// `P(T = n)`: 1/2, 1/4, then `(1/4)(1-eps)^(n-3) eps`.
pub fn hitting_time_pmf(epsilon: f64, n: u64) -> f64 {
    match n {
        0 => 0.0,
        1 => 0.5,
        2 => 0.25,
        _ => 0.25 * (1.0 - epsilon).powi((n - 3) as i32) * epsilon,
    }
}

/// Walk from the lower of two bf16 neighbors (`1` and `1 + 2^-7`), with
/// updates of half a spacing for two steps and `epsilon` spacings after,
/// each rounded stochastically; `T` is the first step that lands on the upper
/// point.
pub fn hitting_time(epsilon: f64, repetitions: u32, rng: &RoundRng) -> Result<HittingResult> {
    if !(epsilon > 0.0 && epsilon <= 0.5) {
        return Err(Error::config("epsilon", "must lie in (0, 1/2]"));
    }
    let spacing = 2f32.powi(-7);
    let hi = 1.0 + spacing;
    let small = (epsilon as f32) * spacing;
    let hits: Vec<u64> = (0..repetitions)
        .map(|rep| {
            let mut x = 1.0f32;
            let mut t = 0u64;
            while x != hi {
                t += 1;
                let u = if t <= 2 { 0.5 * spacing } else { small };
                x = round_stochastic(x + u, rng, Address::new(HIT_STREAM, t, rep as u64))
                    .expect("finite")
                    .to_f32();
            }
            t
        })
        .collect();
    let n = hits.len().max(1) as f64;
    let mean = hits.iter().sum::<u64>() as f64 / n;
    let var = hits.iter().map(|&h| (h as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(HittingResult {
        epsilon,
        empirical_mean: mean,
        stderr: (var / n).sqrt(),
        analytic_mean: hitting_time_mean(epsilon),
        hits,
    })
}

// ----------------------------------------------------------- linear loss Adam

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearLossSpec {
    pub max_lr: f64,
    pub min_lr: f64,
    pub decay_steps: u64,
    pub x0: f64,
    pub max_steps: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for LinearLossSpec {
    fn default() -> Self {
        Self {
            max_lr: 4e-4,
            min_lr: 1e-5,
            decay_steps: 5000,
            x0: 2.0,
            max_steps: 200_000,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

impl LinearLossSpec {
    fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            alpha: self.max_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: 0.0,
            schedule: Schedule::Cosine {
                max: self.max_lr,
                min: self.min_lr,
                warmup: 0,
                total: self.decay_steps,
            },
            eps_placement: EpsPlacement::OutsideRoot,
        }
    }
}

/// Steps for Adam on `f(x) = -(x - 2) + 1` (`x < 3`, zero beyond) to first
/// reach `x >= 3`. `None` when `max_steps` is exhausted or `x` goes
/// non-finite. The optional trace records `(step, x)` every `trace_every`.
pub fn linear_loss_run(
    spec: &LinearLossSpec,
    policy: &PrecisionPolicy,
    rng: &RoundRng,
    repetition: u32,
    trace_every: u64,
    trace: &mut Vec<(u64, f32)>,
) -> Result<Option<u64>> {
    if !(spec.x0 < 3.0) {
        return Err(Error::config("x0", "must be below 3"));
    }
    let cfg = spec.adam();
    cfg.validate()?;
    policy.validate()?;
    let mut x = Tensor::from_vec(vec![spec.x0 as f32], policy.weights);
    let mut state = AdamWSRState::new(&[1], policy, stream_id(ROLE_OPT, repetition as u64, 0));
    let grad = Tensor::from_vec(vec![-1.0], policy.gradients);
    for t in 1..=spec.max_steps {
        step_in_place(&mut x, &grad, &mut state, &cfg, policy, rng)?;
        let v = x.data()[0];
        if trace_every > 0 && t % trace_every == 0 {
            trace.push((t, v));
        }
        if !v.is_finite() {
            return Ok(None);
        }
        if v >= 3.0 {
            return Ok(Some(t));
        }
    }
    Ok(None)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinearLossResult {
    pub policy: String,
    pub min_lr: f64,
    pub steps: Vec<Option<u64>>,
    pub mean_steps: f64,
    pub converged: usize,
}

pub fn linear_loss_adam(
    spec: &LinearLossSpec,
    policy: &PrecisionPolicy,
    repetitions: u32,
    rng: &RoundRng,
) -> Result<LinearLossResult> {
    let steps = (0..repetitions)
        .into_par_iter()
        .map(|r| linear_loss_run(spec, policy, rng, r, 0, &mut Vec::new()))
        .collect::<Result<Vec<_>>>()?;
    let done: Vec<u64> = steps.iter().flatten().copied().collect();
    Ok(LinearLossResult {
        policy: policy.id(),
        min_lr: spec.min_lr,
        mean_steps: done.iter().sum::<u64>() as f64 / done.len().max(1) as f64,
        converged: done.len(),
        steps,
    })
}

// ---------------------------------------------------------------- correlation

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationResult {
    pub rho: f64,
    pub delta: f64,
    pub cor: f64,
    pub cor_sr: f64,
    pub cor_analytic: f64,
    pub cor_sr_analytic: f64,
}

/// Pearson correlation over pairs.
#[derive(Default)]
struct Pairs {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

impl Pairs {
    fn push(&mut self, x: f64, y: f64) {
        self.n += 1.0;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.syy += y * y;
        self.sxy += x * y;
    }

    fn cor(&self) -> f64 {
        let cov = self.sxy / self.n - self.sx * self.sy / (self.n * self.n);
        let vx = self.sxx / self.n - (self.sx / self.n).powi(2);
        let vy = self.syy / self.n - (self.sy / self.n).powi(2);
        if vx <= 0.0 || vy <= 0.0 {
            return 0.0;
        }
        cov / (vx * vy).sqrt()
    }
}

/// Lag-one correlation of `g[i,t] = g1[i] + g2[i,t]` (and with an added
/// `xi[i,t]`), all terms scaled Bernoulli(1/2), pooled over dimensions,
/// steps and repetitions. Both series share `g1` and `g2`.
pub fn correlation_experiment(
    rho: f64,
    delta: f64,
    d: usize,
    t: usize,
    repetitions: u32,
    rng: &RoundRng,
) -> Result<CorrelationResult> {
    if !(rho >= 0.0 && delta >= 0.0) {
        return Err(Error::config("rho/delta", "must be nonnegative"));
    }
    if t < 2 {
        return Err(Error::config("T", "need at least two steps"));
    }
    let mut plain = Pairs::default();
    let mut sr = Pairs::default();
    for rep in 0..repetitions as u64 {
        for i in 0..d as u64 {
            let series = rep * d as u64 + i;
            let g1 = rho * (rng.block(Address::new(CORR_STREAM, series, u64::MAX))[0] & 1) as f64;
            let (mut prev, mut prev_sr) = (0.0, 0.0);
            for s in 0..t as u64 {
                let b = rng.block(Address::new(CORR_STREAM + 1, series, s));
                let g = g1 + (b[0] & 1) as f64;
                let gs = g + delta * (b[1] & 1) as f64;
                if s > 0 {
                    plain.push(prev, g);
                    sr.push(prev_sr, gs);
                }
                prev = g;
                prev_sr = gs;
            }
        }
    }
    let r2 = rho * rho;
    Ok(CorrelationResult {
        rho,
        delta,
        cor: plain.cor(),
        cor_sr: sr.cor(),
        cor_analytic: r2 / (1.0 + r2),
        cor_sr_analytic: r2 / (1.0 + r2 + delta * delta),
    })
}

// ------------------------------------------------------------------- training

/// Built-in model and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelSpec {
    LinearRegression {
        dim: usize,
        n_train: usize,
        n_val: usize,
        #[serde(default)]
        noise: f64,
    },
    Mlp {
        input: usize,
        hidden: usize,
        n_train: usize,
        n_val: usize,
    },
    CharLm {
        #[serde(default = "default_context")]
        context: usize,
        #[serde(default = "default_embed")]
        embed: usize,
        #[serde(default = "default_hidden")]
        hidden: usize,
        /// Text file; the built-in generated corpus when absent.
        #[serde(default)]
        corpus: Option<PathBuf>,
        #[serde(default = "default_corpus_bytes")]
        corpus_bytes: usize,
    },
}

fn default_context() -> usize {
    CharLmConfig::default().context
}
fn default_embed() -> usize {
    CharLmConfig::default().embed
}
fn default_hidden() -> usize {
    CharLmConfig::default().hidden
}
fn default_corpus_bytes() -> usize {
    1 << 20
}

impl ModelSpec {
    pub fn build(&self, data_seed: u64) -> Result<Box<dyn Task + Send>> {
        Ok(match self {
            ModelSpec::LinearRegression {
                dim,
                n_train,
                n_val,
                noise,
            } => Box::new(LinearRegression::new(*dim, *n_train, *n_val, *noise, data_seed)),
            ModelSpec::Mlp {
                input,
                hidden,
                n_train,
                n_val,
            } => Box::new(Mlp::new(*input, *hidden, *n_train, *n_val, data_seed)),
            ModelSpec::CharLm {
                context,
                embed,
                hidden,
                corpus,
                corpus_bytes,
            } => {
                let c = match corpus {
                    Some(p) => Corpus::from_file(p, 0.1)?,
                    None => Corpus::synthetic(data_seed, *corpus_bytes),
                };
                let cfg = CharLmConfig {
                    context: *context,
                    embed: *embed,
                    hidden: *hidden,
                };
                let lm = CharLm::new(&c, cfg);
                if lm.param_count() > 1_000_000 {
                    return Err(Error::config("model", "character model limited to 1M parameters"));
                }
                Box::new(lm)
            }
        })
    }
}

/// A named preset or an explicit policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicySpec {
    Preset(PolicyPreset),
    Custom(PrecisionPolicy),
}

impl PolicySpec {
    pub fn policy(&self) -> PrecisionPolicy {
        match self {
            PolicySpec::Preset(p) => p.policy(),
            PolicySpec::Custom(p) => *p,
        }
    }

    pub fn label(&self) -> String {
        match self {
            PolicySpec::Preset(p) => p.name().to_owned(),
            PolicySpec::Custom(p) => p.id(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub model: ModelSpec,
    #[serde(default)]
    pub policies: Vec<PolicySpec>,
    pub lrs: Vec<f64>,
    pub steps: u64,
    pub batch: usize,
    #[serde(default = "one")]
    pub replicas: usize,
    #[serde(default = "yes")]
    pub shared_randomness: bool,
    #[serde(default)]
    pub warmup: u64,
    /// Cosine floor as a fraction of the peak rate.
    #[serde(default = "default_min_ratio")]
    pub min_lr_ratio: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Validation cadence in steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "default_val_size")]
    pub val_size: usize,
    /// Train-loss logging cadence.
    #[serde(default = "one_u64")]
    pub log_every: u64,
    #[serde(default)]
    pub data_seed: u64,
    /// Log replica drift each logged step (only meaningful with `replicas > 1`).
    #[serde(default)]
    pub log_drift: bool,
}

fn one() -> usize {
    1
}
fn one_u64() -> u64 {
    1
}
fn yes() -> bool {
    true
}
fn default_min_ratio() -> f64 {
    0.1
}
fn default_val_size() -> usize {
    2048
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lrs.is_empty() || self.lrs.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::config("lrs", "need at least one positive learning rate"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        if self.replicas == 0 {
            return Err(Error::config("replicas", "must be >= 1"));
        }
        if self.batch < self.replicas {
            return Err(Error::config("batch", "must be >= replicas"));
        }
        if !(self.min_lr_ratio > 0.0 && self.min_lr_ratio <= 1.0) {
            return Err(Error::config("min_lr_ratio", "must lie in (0, 1]"));
        }
        if self.warmup > self.steps {
            return Err(Error::config("warmup", "must not exceed steps"));
        }
        for (i, p) in self.policies.iter().enumerate() {
            p.policy()
                .validate()
                .map_err(|e| Error::config(format!("policies[{i}]"), e.to_string()))?;
        }
        self.adam(self.lrs[0]).validate()
    }

    pub fn adam(&self, lr: f64) -> AdamWConfig {
        let schedule = if self.min_lr_ratio == 1.0 && self.warmup == 0 {
            Schedule::Constant
        } else {
            Schedule::Cosine {
                max: lr,
                min: lr * self.min_lr_ratio,
                warmup: self.warmup,
                total: self.steps,
            }
        };
        AdamWConfig {
            alpha: lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            schedule,
            eps_placement: EpsPlacement::OutsideRoot,
        }
    }
}

/// Outcome of training one (policy, lr, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub label: String,
    pub policy: PrecisionPolicy,
    pub lr: f64,
    pub repetition: u32,
    pub final_val: f64,
    pub initial_val: f64,
    pub diverged: bool,
    /// Last step at which any parameter changed (0 if none did).
    pub last_change: u64,
    #[serde(skip)]
    pub records: Vec<MetricsRecord>,
    #[serde(skip)]
    pub final_params: Vec<Tensor>,
}

/// Evenly spaced validation indices.
fn val_indices(task: &dyn Task, size: usize) -> Vec<usize> {
    let n = task.len(Split::Val);
    let k = size.min(n).max(1);
    (0..k).map(|i| i * n / k).collect()
}

fn mean_val(task: &dyn Task, params: &[Tensor], idx: &[usize]) -> f64 {
    task.loss(params, Split::Val, idx) as f64
}

const DIVERGENCE_FACTOR: f64 = 1e4;
const DIVERGENCE_PATIENCE: u32 = 100;

/// Trains one cell with the replica group.
pub fn train_cell(
    task: &dyn Task,
    spec: &TrainSpec,
    policy: &PrecisionPolicy,
    lr: f64,
    seed: u64,
    repetition: u32,
    label: &str,
) -> Result<CellResult> {
    let rng = RoundRng::new(seed);
    let init: Vec<Tensor> = task
        .param_shapes()
        .into_iter()
        .zip(task.init(&rng, stream_id(ROLE_INIT, 0, 0)))
        .map(|(s, v)| Tensor::new(s, v, Precision::Fp32))
        .collect::<Result<_>>()?;
    let mut group = ReplicaGroup::new(spec.replicas, &init, spec.adam(lr), *policy, rng, spec.shared_randomness)?;
    group.parallel = false;
    let val_idx = val_indices(task, spec.val_size);
    let n_train = task.len(Split::Train);
    let data_stream = stream_id(ROLE_DATA, 0, 0);

    let mut records = Vec::new();
    let initial_val = mean_val(task, &group.params[0], &val_idx);
    records.push(MetricsRecord::new(label, repetition, 0, "val_loss", initial_val));
    let mut first_loss = None;
    let mut over = 0u32;
    let mut diverged = false;
    let mut last_change = 0;
    for t in 1..=spec.steps {
        let idx = sample_batch(&rng, data_stream, t, spec.batch, n_train);
        let batches: Vec<&[usize]> = (0..spec.replicas).map(|m| shard(&idx, m, spec.replicas)).collect();
        let before = group.params[0].clone();
        let out = match group.group_step(task, &batches) {
            Ok(o) => o,
            Err(Error::Replica { source, .. }) if matches!(*source, Error::NonFinite { .. }) => {
                diverged = true;
                records.push(MetricsRecord::new(label, repetition, t, "diverged", 1.0));
                break;
            }
            Err(e) => return Err(e),
        };
        if group.params[0] != before {
            last_change = t;
        }
        let loss = out.mean_loss() as f64;
        let l0 = *first_loss.get_or_insert(loss);
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * l0 {
            over += 1;
        } else {
            over = 0;
        }
        if spec.log_every > 0 && (t % spec.log_every == 0 || t == spec.steps) {
            records.push(MetricsRecord::new(label, repetition, t, "loss", loss));
            records.push(MetricsRecord::new(label, repetition, t, "lr", crate::optim::lr_at(&group.cfg, t)));
            if spec.log_drift {
                records.push(MetricsRecord::new(label, repetition, t, "drift", out.drift.max_linf));
                records.push(MetricsRecord::new(
                    label,
                    repetition,
                    t,
                    "bit_mismatch_frac",
                    out.drift.bit_mismatch_frac,
                ));
            }
        }
        if !loss.is_finite() || over >= DIVERGENCE_PATIENCE {
            diverged = true;
            records.push(MetricsRecord::new(label, repetition, t, "diverged", 1.0));
            break;
        }
        if spec.eval_every > 0 && t % spec.eval_every == 0 && t != spec.steps {
            let v = mean_val(task, &group.params[0], &val_idx);
            records.push(MetricsRecord::new(label, repetition, t, "val_loss", v));
        }
    }
    let final_val = if diverged {
        f64::INFINITY
    } else {
        let v = mean_val(task, &group.params[0], &val_idx);
        records.push(MetricsRecord::new(label, repetition, spec.steps, "val_loss", v));
        v
    };
    Ok(CellResult {
        label: label.to_owned(),
        policy: *policy,
        lr,
        repetition,
        final_val,
        initial_val,
        diverged,
        last_change,
        records,
        final_params: group.params.swap_remove(0),
    })
}

fn cell_label(kind: &str, policy: &str, lr: f64) -> String {
    format!("{kind}/{policy}/lr={lr}")
}

/// Runs every `(policy, lr, repetition)` cell; results come back in grid
/// order regardless of scheduling.
pub fn train_grid(
    kind: &str,
    spec: &TrainSpec,
    policies: &[PolicySpec],
    seed: u64,
    repetitions: u32,
) -> Result<Vec<CellResult>> {
    spec.validate()?;
    let task = spec.model.build(spec.data_seed)?;
    let cells: Vec<(PolicySpec, f64, u32)> = policies
        .iter()
        .flat_map(|p| spec.lrs.iter().flat_map(move |&lr| (0..repetitions).map(move |r| (*p, lr, r))))
        .collect();
    cells
        .par_iter()
        .map(|(p, lr, r)| {
            let label = cell_label(kind, &p.label(), *lr);
            train_cell(task.as_ref(), spec, &p.policy(), *lr, seed.wrapping_add(*r as u64), *r, &label)
        })
        .collect()
}

/// Mean final validation loss per `(label)` in first-seen order.
pub fn mean_final_by_label(cells: &[CellResult]) -> Vec<(String, f64, f64)> {
    let mut out: Vec<(String, f64, f64, u32)> = Vec::new();
    for c in cells {
        match out.iter_mut().find(|e| e.0 == c.label) {
            Some(e) => {
                e.1 += c.final_val;
                e.3 += 1;
            }
            None => out.push((c.label.clone(), c.final_val, c.lr, 1)),
        }
    }
    out.into_iter().map(|(l, s, lr, n)| (l, s / n as f64, lr)).collect()
}

pub fn micro_train(spec: &TrainSpec, seed: u64, repetitions: u32) -> Result<Vec<CellResult>> {
    if spec.policies.is_empty() {
        return Err(Error::config("policies", "need at least one policy"));
    }
    train_grid("micro_train", spec, &spec.policies, seed, repetitions)
}

/// The 2^3 precision choices for gradients, first and second moments, all
/// with SR write-back of bf16 weights.
pub fn ablation_policies() -> Vec<PolicySpec> {
    let mut out = Vec::with_capacity(8);
    for g in [Precision::Bf16, Precision::Fp32] {
        for m in [Precision::Bf16, Precision::Fp32] {
            for v in [Precision::Bf16, Precision::Fp32] {
                out.push(PolicySpec::Custom(PrecisionPolicy::sr_with_states(g, m, v)));
            }
        }
    }
    out
}

pub fn ablation_grid(spec: &TrainSpec, seed: u64, repetitions: u32) -> Result<Vec<CellResult>> {
    train_grid("ablation", spec, &ablation_policies(), seed, repetitions)
}

// ----------------------------------------------------------------- dispatcher

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentKind {
    HittingTime {
        epsilon: Vec<f64>,
    },
    LinearLoss {
        #[serde(flatten)]
        base: LinearLossSpec,
        /// Floors to run; overrides `min_lr`.
        #[serde(default)]
        min_lrs: Vec<f64>,
        policies: Vec<PolicySpec>,
        #[serde(default = "default_trace")]
        trace_every: u64,
    },
    Correlation {
        cases: Vec<CorrelationCase>,
        d: usize,
        #[serde(rename = "T")]
        t: usize,
    },
    MicroTrain(TrainSpec),
    Ablation(TrainSpec),
}

fn default_trace() -> u64 {
    100
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCase {
    pub rho: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(flatten)]
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one_u32")]
    pub repetitions: u32,
}

fn one_u32() -> u32 {
    1
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::config("repetitions", "must be >= 1"));
        }
        match &self.kind {
            ExperimentKind::HittingTime { epsilon } => {
                for (i, &e) in epsilon.iter().enumerate() {
                    if !(e > 0.0 && e <= 0.5) {
                        return Err(Error::config(format!("epsilon[{i}]"), "must lie in (0, 1/2]"));
                    }
                }
                if epsilon.is_empty() {
                    return Err(Error::config("epsilon", "need at least one value"));
                }
            }
            ExperimentKind::LinearLoss { base, policies, .. } => {
                if !(base.x0 < 3.0) {
                    return Err(Error::config("x0", "must be below 3"));
                }
                if policies.is_empty() {
                    return Err(Error::config("policies", "need at least one policy"));
                }
                base.adam().validate()?;
            }
            ExperimentKind::Correlation { cases, d, t } => {
                if cases.iter().any(|c| !(c.rho >= 0.0 && c.delta >= 0.0)) {
                    return Err(Error::config("cases", "rho and delta must be nonnegative"));
                }
                if *d == 0 || *t < 2 {
                    return Err(Error::config("d/T", "need d >= 1 and T >= 2"));
                }
            }
            ExperimentKind::MicroTrain(s) => {
                if s.policies.is_empty() {
                    return Err(Error::config("policies", "need at least one policy"));
                }
                s.validate()?;
            }
            ExperimentKind::Ablation(s) => s.validate()?,
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            ExperimentKind::HittingTime { .. } => "hitting_time",
            ExperimentKind::LinearLoss { .. } => "linear_loss",
            ExperimentKind::Correlation { .. } => "correlation",
            ExperimentKind::MicroTrain(_) => "micro_train",
            ExperimentKind::Ablation(_) => "ablation",
        }
    }
}

/// Rows and a JSON summary for one run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub summary: serde_json::Value,
}

fn cells_output(cells: Vec<CellResult>) -> RunOutput {
    let summary = json!({
        "cells": mean_final_by_label(&cells)
            .into_iter()
            .map(|(label, v, lr)| json!({"label": label, "lr": lr, "mean_final_val_loss": finite_or_null(v)}))
            .collect::<Vec<_>>(),
        "diverged": cells.iter().filter(|c| c.diverged).map(|c| json!({"label": c.label, "repetition": c.repetition})).collect::<Vec<_>>(),
    });
    RunOutput {
        records: cells.into_iter().flat_map(|c| c.records).collect(),
        summary,
    }
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        serde_json::Value::Null
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunOutput> {
    spec.validate()?;
    let rng = RoundRng::new(spec.seed);
    match &spec.kind {
        ExperimentKind::HittingTime { epsilon } => {
            let mut records = Vec::new();
            let mut summary = Vec::new();
            for &e in epsilon {
                let r = hitting_time(e, spec.repetitions, &rng)?;
                let exp = format!("hitting_time/eps={e}");
                for (rep, &h) in r.hits.iter().enumerate() {
                    records.push(MetricsRecord::new(&exp, rep as u32, h, "hit_step", h as f64));
                }
                summary.push(json!({
                    "epsilon": e,
                    "empirical_mean": r.empirical_mean,
                    "stderr": r.stderr,
                    "analytic_mean": r.analytic_mean,
                }));
            }
            Ok(RunOutput {
                records,
                summary: json!({ "hitting_time": summary }),
            })
        }
        ExperimentKind::LinearLoss {
            base,
            min_lrs,
            policies,
            trace_every,
        } => {
            let floors = if min_lrs.is_empty() { vec![base.min_lr] } else { min_lrs.clone() };
            let mut records = Vec::new();
            let mut summary = Vec::new();
            for &floor in &floors {
                let s = LinearLossSpec {
                    min_lr: floor,
                    ..base.clone()
                };
                for p in policies {
                    let exp = format!("linear_loss/{}/min_lr={floor}", p.label());
                    let runs = (0..spec.repetitions)
                        .into_par_iter()
                        .map(|r| {
                            let mut trace = Vec::new();
                            let hit = linear_loss_run(&s, &p.policy(), &rng, r, *trace_every, &mut trace)?;
                            Ok((hit, trace))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let mut done = Vec::new();
                    for (r, (hit, trace)) in runs.into_iter().enumerate() {
                        for (t, x) in trace {
                            records.push(MetricsRecord::new(&exp, r as u32, t, "x", x as f64));
                        }
                        match hit {
                            Some(h) => {
                                records.push(MetricsRecord::new(&exp, r as u32, h, "hit_step", h as f64));
                                done.push(h);
                            }
                            None => records.push(MetricsRecord::new(&exp, r as u32, s.max_steps, "diverged", 1.0)),
                        }
                    }
                    summary.push(json!({
                        "policy": p.label(),
                        "min_lr": floor,
                        "mean_steps": done.iter().sum::<u64>() as f64 / done.len().max(1) as f64,
                        "converged": done.len(),
                    }));
                }
            }
            Ok(RunOutput {
                records,
                summary: json!({ "linear_loss": summary }),
            })
        }
        ExperimentKind::Correlation { cases, d, t } => {
            let mut records = Vec::new();
            let mut summary = Vec::new();
            for c in cases {
                let r = correlation_experiment(c.rho, c.delta, *d, *t, spec.repetitions, &rng)?;
                let exp = format!("correlation/rho={}/delta={}", c.rho, c.delta);
                for (m, v) in [
                    ("corr", r.cor),
                    ("corr_sr", r.cor_sr),
                    ("corr_analytic", r.cor_analytic),
                    ("corr_sr_analytic", r.cor_sr_analytic),
                ] {
                    records.push(MetricsRecord::new(&exp, 0, 0, m, v));
                }
                summary.push(serde_json::to_value(&r)?);
            }
            Ok(RunOutput {
                records,
                summary: json!({ "correlation": summary }),
            })
        }
        ExperimentKind::MicroTrain(s) => Ok(cells_output(micro_train(s, spec.seed, spec.repetitions)?)),
        ExperimentKind::Ablation(s) => Ok(cells_output(ablation_grid(s, spec.seed, spec.repetitions)?)),
    }
}

// -------------------------------------------------------------------- writers

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub const METRICS_HEADER: [&str; 5] = ["experiment", "repetition", "step", "metric", "value"];

pub fn metrics_csv(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in records {
        w.write_record([
            r.experiment.as_str(),
            &r.repetition.to_string(),
            &r.step.to_string(),
            r.metric.as_str(),
            &r.value.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::config("csv", e.to_string()))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// `metrics.csv` and `manifest.json` under `out`.
pub fn write_run(out: &Path, spec: &ExperimentSpec, run: &RunOutput) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join("metrics.csv"), &metrics_csv(&run.records)?)?;
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "kind": spec.kind_name(),
        "seed": spec.seed,
        "spec": spec,
        "csv_columns": METRICS_HEADER,
        "summary": run.summary,
    });
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_atomic(&out.join("manifest.json"), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hitting_time_pmf_sums_and_matches_closed_form() {
        for eps in [0.5, 0.1, 0.01] {
            let (mut p, mut m) = (0.0, 0.0);
            for n in 1..20_000u64 {
                let q = hitting_time_pmf(eps, n);
                p += q;
                m += n as f64 * q;
            }
            assert!((p - 1.0).abs() < 1e-9);
            assert!((m - hitting_time_mean(eps)).abs() < 1e-6);
            assert!((hitting_time_pmf(eps, 1) + hitting_time_pmf(eps, 2) - 0.75).abs() < 1e-15);
        }
        assert_eq!(hitting_time_mean(0.5), 2.0);
    }

    #[test]
    fn hitting_time_simulation() {
        let r = hitting_time(0.1, 4000, &RoundRng::new(3)).unwrap();
        assert!((r.empirical_mean - r.analytic_mean).abs() < 4.0 * r.stderr);
        let early = r.hits.iter().filter(|&&h| h <= 2).count() as f64 / 4000.0;
        assert!((early - 0.75).abs() < 0.03);
        assert!(hitting_time(0.0, 1, &RoundRng::new(0)).is_err());
    }

    #[test]
    fn correlation_special_cases() {
        let rng = RoundRng::new(1);
        let r = correlation_experiment(1.0, 0.0, 2000, 8, 1, &rng).unwrap();
        assert_eq!(r.cor, r.cor_sr);
        let r = correlation_experiment(0.0, 1.0, 2000, 8, 1, &rng).unwrap();
        assert!(r.cor.abs() < 0.02 && r.cor_sr.abs() < 0.02);
        assert_eq!(r.cor_analytic, 0.0);
    }

    #[test]
    fn linear_loss_fp32_is_deterministic() {
        let spec = LinearLossSpec::default();
        let p = PrecisionPolicy::fp32_master();
        let r = linear_loss_adam(&spec, &p, 2, &RoundRng::new(0)).unwrap();
        assert_eq!(r.steps[0], r.steps[1]);
        assert!(r.steps[0].is_some());
    }

    #[test]
    fn spec_roundtrip_and_validation() {
        let text = r#"{"kind":"hitting_time","epsilon":[0.01],"seed":3,"repetitions":10}"#;
        let s: ExperimentSpec = serde_json::from_str(text).unwrap();
        assert_eq!(s.kind_name(), "hitting_time");
        s.validate().unwrap();
        let bad: ExperimentSpec = serde_json::from_str(r#"{"kind":"hitting_time","epsilon":[0.7]}"#).unwrap();
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("epsilon[0]"), "{err}");
        let mt = r#"{"kind":"micro_train","model":{"type":"linear_regression","dim":4,"n_train":64,"n_val":16},
                    "policies":["bf16_sr","fp32_master"],"lrs":[0.01],"steps":5,"batch":8}"#;
        let s: ExperimentSpec = serde_json::from_str(mt).unwrap();
        s.validate().unwrap();
        let back: ExperimentSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn ablation_has_eight_cells() {
        let spec = TrainSpec {
            model: ModelSpec::LinearRegression {
                dim: 4,
                n_train: 64,
                n_val: 16,
                noise: 0.1,
            },
            policies: vec![],
            lrs: vec![1e-2],
            steps: 3,
            batch: 8,
            replicas: 1,
            shared_randomness: true,
            warmup: 0,
            min_lr_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            eval_every: 0,
            val_size: 16,
            log_every: 1,
            data_seed: 0,
            log_drift: false,
        };
        let cells = ablation_grid(&spec, 0, 2).unwrap();
        assert_eq!(cells.len(), 16);
        let labels: std::collections::HashSet<_> = cells.iter().map(|c| c.label.clone()).collect();
        assert_eq!(labels.len(), 8);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![
            MetricsRecord::new("a/b", 0, 1, "loss", 0.5),
            MetricsRecord::new("a,b", 2, 3, "val_loss", 1e-9),
        ];
        let p = dir.path().join("m.csv");
        write_atomic(&p, &metrics_csv(&recs).unwrap()).unwrap();
        assert_eq!(read_metrics_csv(&p).unwrap(), recs);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("experiment,repetition,step,metric,value\n"));
    }
}
