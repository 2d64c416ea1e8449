//! AdamW whose weight write-back is rounded per a [`PrecisionPolicy`].
//!
//! One code path covers nearest-rounded bf16 training, bf16 with stochastic
//! rounding at the update, and fp32 master weights. Every intermediate is
//! produced in a binary32 buffer and then narrowed into the precision of its
//! role, so the rounding choice only enters at the final write-back and the
//! pre-rounding update direction is identical across policies that share
//! state precisions.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PrecisionPolicy, UpdateRounding};
use crate::rounding::{round_nearest, round_stochastic, Address, RoundRng};
use crate::tensor::{Precision, Tensor};

/// Learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// `alpha` at every step.
    Constant,
    /// Linear warmup to `max`, then half-cosine decay to `min` at `total`,
    /// constant `min` afterwards.
    Cosine {
        max: f64,
        min: f64,
        warmup: u64,
        total: u64,
    },
    /// `alpha * sqrt((1 - beta2^t) / (1 - beta2))`, the rate that absorbs
    /// bias correction in the convergence analysis.
    Analytic,
}

/// Where the denominator offset sits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsPlacement {
    /// `m_hat / (sqrt(v_hat) + eps)`.
    #[default]
    OutsideRoot,
    /// `m_hat / sqrt(v_hat + eps)`.
    InsideRoot,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default)]
    pub eps_placement: EpsPlacement,
}

fn default_schedule() -> Schedule {
    Schedule::Constant
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
            eps_placement: EpsPlacement::OutsideRoot,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be nonnegative"));
        }
        match self.schedule {
            Schedule::Constant | Schedule::Analytic => {
                if !(self.alpha > 0.0) {
                    return Err(Error::config("alpha", "must be positive"));
                }
                if matches!(self.schedule, Schedule::Analytic) && self.beta2 == 0.0 {
                    // fine: the factor is identically 1
                }
            }
            Schedule::Cosine { max, min, total, warmup } => {
                if !(min > 0.0 && max >= min) {
                    return Err(Error::config("schedule", "need 0 < min <= max"));
                }
                if total < warmup {
                    return Err(Error::config("schedule.total", "must be >= warmup"));
                }
            }
        }
        Ok(())
    }
}

/// Learning rate at 1-based step `t` (`t = 0` is treated as 1).
pub fn lr_at(cfg: &AdamWConfig, t: u64) -> f64 {
    let t = t.max(1);
    match cfg.schedule {
        Schedule::Constant => cfg.alpha,
        Schedule::Analytic => {
            if cfg.beta2 == 0.0 {
                return cfg.alpha;
            }
            let b = cfg.beta2;
            cfg.alpha * ((1.0 - b.powf(t as f64)) / (1.0 - b)).sqrt()
        }
        Schedule::Cosine {
            max,
            min,
            warmup,
            total,
        } => {
            if t < warmup {
                max * t as f64 / warmup as f64
            } else if t >= total {
                min
            } else {
                let span = (total - warmup) as f64;
                let progress = (t - warmup) as f64 / span;
                min + (max - min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Per-tensor optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWSRState {
    pub m: Tensor,
    pub v: Tensor,
    /// Completed steps.
    pub t: u64,
    /// Counter stream used for stochastic write-back.
    pub stream: u64,
}

impl AdamWSRState {
    pub fn new(shape: &[usize], policy: &PrecisionPolicy, stream: u64) -> Self {
        Self {
            m: Tensor::zeros(shape, policy.moment1),
            v: Tensor::zeros(shape, policy.moment2),
            t: 0,
            stream,
        }
    }
}

/// Step-invariant scalars.
struct StepScalars {
    beta1: f32,
    beta2: f32,
    one_minus_beta1: f32,
    one_minus_beta2: f32,
    bias1: f32,
    bias2: f32,
    eps: f32,
    lr: f32,
    lr_decay: f32,
    placement: EpsPlacement,
    arith: Precision,
}

impl StepScalars {
    fn new(cfg: &AdamWConfig, policy: &PrecisionPolicy, step: u64) -> Self {
        let lr = lr_at(cfg, step);
        let arith = policy.update_arithmetic;
        Self {
            beta1: cfg.beta1 as f32,
            beta2: cfg.beta2 as f32,
            one_minus_beta1: (1.0 - cfg.beta1) as f32,
            one_minus_beta2: (1.0 - cfg.beta2) as f32,
            bias1: (1.0 - cfg.beta1.powf(step as f64)) as f32,
            bias2: (1.0 - cfg.beta2.powf(step as f64)) as f32,
            eps: cfg.eps as f32,
            lr: lr as f32,
            lr_decay: arith.narrow((lr * cfg.weight_decay) as f32),
            placement: cfg.eps_placement,
            arith,
        }
    }

    #[inline]
    fn direction(&self, m: f32, v: f32) -> f32 {
        let a = self.arith;
        let m_hat = a.narrow(m / self.bias1);
        let v_hat_sq = a.narrow(v / self.bias2);
        let denom = match self.placement {
            EpsPlacement::OutsideRoot => a.narrow(a.narrow(v_hat_sq.sqrt()) + self.eps),
            EpsPlacement::InsideRoot => a.narrow(a.narrow(v_hat_sq + self.eps).sqrt()),
        };
        a.narrow(m_hat / denom)
    }

    #[inline]
    fn delta(&self, u: f32, x: f32) -> f32 {
        let a = self.arith;
        a.narrow(a.narrow(self.lr * u) + a.narrow(self.lr_decay * x))
    }
}

fn check_inputs(params: &Tensor, grads: &Tensor, state: &AdamWSRState) -> Result<()> {
    params.same_shape(grads)?;
    params.same_shape(&state.m)?;
    params.same_shape(&state.v)?;
    if let Some((index, value)) = grads.first_non_finite() {
        return Err(Error::NonFinite { index, value });
    }
    Ok(())
}

/// New moments for one step, or the first negative second-moment entry.
fn advance_moments(
    grads: &Tensor,
    state: &AdamWSRState,
    policy: &PrecisionPolicy,
    s: &StepScalars,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let n = grads.len();
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for (i, ((&g, &m0), &v0)) in grads
        .data()
        .iter()
        .zip(state.m.data())
        .zip(state.v.data())
        .enumerate()
    {
        let g = policy.gradients.narrow(g);
        let m1 = policy.moment1.narrow(s.beta1 * m0 + s.one_minus_beta1 * g);
        let v1 = policy.moment2.narrow(s.beta2 * v0 + s.one_minus_beta2 * (g * g));
        if !(v1 >= 0.0) {
            return Err(Error::NegativeSecondMoment { index: i, value: v1 });
        }
        m.push(m1);
        v.push(v1);
    }
    Ok((m, v))
}

/// Pre-rounding update direction `u_t = m_hat / (denominator)` for the step
/// that `state` would take next. Pure; the state is not advanced.
pub fn expose_update(
    params: &Tensor,
    grads: &Tensor,
    state: &AdamWSRState,
    cfg: &AdamWConfig,
    policy: &PrecisionPolicy,
) -> Result<Tensor> {
    check_inputs(params, grads, state)?;
    let s = StepScalars::new(cfg, policy, state.t + 1);
    let (m, v) = advance_moments(grads, state, policy, &s)?;
    let u = m.iter().zip(&v).map(|(&m, &v)| s.direction(m, v)).collect();
    Tensor::new(params.shape().to_vec(), u, s.arith)
}

/// Binary32 value handed to the write-back rounding: `x - (lr*u + lr*λ*x)`.
pub fn pre_rounding_update(
    params: &Tensor,
    grads: &Tensor,
    state: &AdamWSRState,
    cfg: &AdamWConfig,
    policy: &PrecisionPolicy,
) -> Result<Vec<f32>> {
    check_inputs(params, grads, state)?;
    let s = StepScalars::new(cfg, policy, state.t + 1);
    let (m, v) = advance_moments(grads, state, policy, &s)?;
    Ok(params
        .data()
        .iter()
        .zip(m.iter().zip(&v))
        .map(|(&x, (&m, &v))| x - s.delta(s.direction(m, v), x))
        .collect())
}

/// One AdamW step with policy-selected write-back rounding, in place.
///
/// Stochastic write-back draws from `(state.stream, t, element)` where `t` is
/// the 1-based step number. On error nothing is modified.
pub fn step_in_place(
    params: &mut Tensor,
    grads: &Tensor,
    state: &mut AdamWSRState,
    cfg: &AdamWConfig,
    policy: &PrecisionPolicy,
    opt_rng: &RoundRng,
) -> Result<()> {
    check_inputs(params, grads, state)?;
    let step = state.t + 1;
    let s = StepScalars::new(cfg, policy, step);
    let (m, v) = advance_moments(grads, state, policy, &s)?;
    let mut next = Vec::with_capacity(params.len());
    for (i, (&x, (&m, &v))) in params.data().iter().zip(m.iter().zip(&v)).enumerate() {
        let y = x - s.delta(s.direction(m, v), x);
        let x1 = match policy.update_rounding {
            UpdateRounding::None => policy.weights.narrow(y),
            UpdateRounding::Nearest => round_nearest(y).to_f32(),
            UpdateRounding::Stochastic => {
                round_stochastic(y, opt_rng, Address::new(state.stream, step, i as u64))
                    .map_err(|_| Error::NonFinite { index: i, value: y })?
                    .to_f32()
            }
        };
        next.push(x1);
    }
    let shape = params.shape().to_vec();
    *params = Tensor::new(shape.clone(), next, params.storage())?;
    state.m = Tensor::new(shape.clone(), m, policy.moment1)?;
    state.v = Tensor::new(shape, v, policy.moment2)?;
    state.t = step;
    Ok(())
}

/// Functional form of [`step_in_place`]: returns the new parameters and state.
pub fn adamw_sr_step(
    params: &Tensor,
    grads: &Tensor,
    state: &AdamWSRState,
    cfg: &AdamWConfig,
    policy: &PrecisionPolicy,
    opt_rng: &RoundRng,
) -> Result<(Tensor, AdamWSRState)> {
    let mut p = params.clone();
    let mut st = state.clone();
    step_in_place(&mut p, grads, &mut st, cfg, policy, opt_rng)?;
    Ok((p, st))
}

/// Optimizer over a list of parameter tensors, one state per tensor.
#[derive(Clone, Debug)]
pub struct AdamWSR {
    pub cfg: AdamWConfig,
    pub policy: PrecisionPolicy,
    pub rng: RoundRng,
    pub states: Vec<AdamWSRState>,
}

impl AdamWSR {
    /// `streams[k]` is the write-back stream for tensor `k`.
    pub fn new(
        cfg: AdamWConfig,
        policy: PrecisionPolicy,
        rng: RoundRng,
        params: &[Tensor],
        streams: impl IntoIterator<Item = u64>,
    ) -> Result<Self> {
        cfg.validate()?;
        policy.validate()?;
        let states: Vec<_> = params
            .iter()
            .zip(streams)
            .map(|(p, s)| AdamWSRState::new(p.shape(), &policy, s))
            .collect();
        if states.len() != params.len() {
            return Err(Error::config("streams", "one stream per parameter tensor"));
        }
        Ok(Self {
            cfg,
            policy,
            rng,
            states,
        })
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.states.len()],
                found: vec![params.len(), grads.len()],
            });
        }
        for ((p, g), st) in params.iter_mut().zip(grads).zip(&mut self.states) {
            step_in_place(p, g, st, &self.cfg, &self.policy, &self.rng)?;
        }
        Ok(())
    }

    pub fn t(&self) -> u64 {
        self.states.first().map_or(0, |s| s.t)
    }

    /// Moments as `m{k}` / `v{k}` tensor files plus `optimizer.json`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, st) in self.states.iter().enumerate() {
            st.m.save(&dir.join(format!("m{k}")))?;
            st.v.save(&dir.join(format!("v{k}")))?;
        }
        let header = CheckpointHeader {
            t: self.t(),
            cfg: self.cfg,
            policy: self.policy,
            seed: self.rng.seed(),
            streams: self.states.iter().map(|s| s.stream).collect(),
        };
        let path = dir.join("optimizer.json");
        fs::write(&path, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let path = dir.join("optimizer.json");
        let header: CheckpointHeader =
            serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        let states = header
            .streams
            .iter()
            .enumerate()
            .map(|(k, &stream)| {
                Ok(AdamWSRState {
                    m: Tensor::load(&dir.join(format!("m{k}")))?,
                    v: Tensor::load(&dir.join(format!("v{k}")))?,
                    t: header.t,
                    stream,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: header.cfg,
            policy: header.policy,
            rng: RoundRng::new(header.seed),
            states,
        })
    }
}

/// `optimizer.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub t: u64,
    pub cfg: AdamWConfig,
    pub policy: PrecisionPolicy,
    pub seed: u64,
    pub streams: Vec<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fp(v: &[f32]) -> Tensor {
        Tensor::from_vec(v.to_vec(), Precision::Fp32)
    }

    fn plain(alpha: f64, beta1: f64, beta2: f64) -> AdamWConfig {
        AdamWConfig {
            alpha,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
            eps_placement: EpsPlacement::OutsideRoot,
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let rng = RoundRng::new(1);
        for policy in [
            PrecisionPolicy::bf16_sr(),
            PrecisionPolicy::bf16_nr(),
            PrecisionPolicy::fp32_master(),
        ] {
            let x = Tensor::from_vec(vec![1.0, -2.5, 0.375], policy.weights);
            let g = Tensor::zeros(&[3], policy.gradients);
            let st = AdamWSRState::new(&[3], &policy, 0);
            let (x1, st1) = adamw_sr_step(&x, &g, &st, &AdamWConfig::default(), &policy, &rng).unwrap();
            assert_eq!(x1, x);
            assert_eq!(st1.t, 1);
        }
    }

    #[test]
    fn degenerate_betas_first_step() {
        // beta1 = beta2 = 0: m = g, v = g^2, m_hat = 1, v_hat = 1 -> x1 = -alpha / (1 + eps)
        let policy = PrecisionPolicy::fp32_master();
        let cfg = plain(0.01, 0.0, 0.0);
        let st = AdamWSRState::new(&[1], &policy, 0);
        let (x1, _) = adamw_sr_step(&fp(&[0.0]), &fp(&[1.0]), &st, &cfg, &policy, &RoundRng::new(0)).unwrap();
        let expected = -(0.01f64 / (1.0 + 1e-8)) as f32;
        assert_eq!(x1.data()[0], expected);
    }

    #[test]
    fn direction_is_independent_of_write_back_rounding() {
        let cfg = AdamWConfig::default();
        let sr = PrecisionPolicy::bf16_sr();
        let nr = PrecisionPolicy {
            update_rounding: UpdateRounding::Nearest,
            ..sr
        };
        let x = Tensor::from_vec(vec![0.5, -1.25, 3.0, 0.0], Precision::Bf16);
        let g = Tensor::from_vec(vec![0.1, -0.7, 2.0, 1e-3], Precision::Bf16);
        let st = AdamWSRState::new(&[4], &sr, 7);
        let u_sr = expose_update(&x, &g, &st, &cfg, &sr).unwrap();
        let u_nr = expose_update(&x, &g, &st, &cfg, &nr).unwrap();
        assert_eq!(u_sr, u_nr);
        assert_eq!(
            pre_rounding_update(&x, &g, &st, &cfg, &sr).unwrap(),
            pre_rounding_update(&x, &g, &st, &cfg, &nr).unwrap()
        );
    }

    #[test]
    fn exposed_update_examples() {
        let policy = PrecisionPolicy::fp32_master();
        let cfg = plain(1e-3, 0.0, 0.95);
        let st = AdamWSRState::new(&[1], &policy, 0);
        let u = expose_update(&fp(&[0.0]), &fp(&[1.0]), &st, &cfg, &policy).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction
        assert!((u.data()[0] - 1.0).abs() < 1e-6);
        let u0 = expose_update(&fp(&[0.0]), &fp(&[0.0]), &st, &cfg, &policy).unwrap();
        assert_eq!(u0.data(), &[0.0]);
        // first step is scale invariant up to eps
        let st2 = AdamWSRState::new(&[2], &policy, 0);
        for c in [1e-2f32, 3.0, 250.0] {
            let uc = expose_update(&fp(&[0.0, 0.0]), &fp(&[0.3 * c, -2.0 * c]), &st2, &cfg, &policy).unwrap();
            assert!((uc.data()[0] - 1.0).abs() < 1e-5);
            assert!((uc.data()[1] + 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn eps_placement_changes_denominator() {
        let policy = PrecisionPolicy::fp32_master();
        let mut cfg = plain(1e-3, 0.0, 0.0);
        cfg.eps = 0.25;
        let st = AdamWSRState::new(&[1], &policy, 0);
        let out = expose_update(&fp(&[0.0]), &fp(&[1.0]), &st, &cfg, &policy).unwrap();
        assert_eq!(out.data()[0], 1.0 / 1.25);
        cfg.eps_placement = EpsPlacement::InsideRoot;
        let ins = expose_update(&fp(&[0.0]), &fp(&[1.0]), &st, &cfg, &policy).unwrap();
        assert_eq!(ins.data()[0], 1.0 / 1.25f32.sqrt());
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let policy = PrecisionPolicy::bf16_sr();
        let st = AdamWSRState::new(&[3], &policy, 0);
        let x = Tensor::zeros(&[3], Precision::Bf16);
        let g = Tensor::from_vec(vec![0.0, 1.0, f32::INFINITY], Precision::Fp32);
        let err = adamw_sr_step(&x, &g, &st, &AdamWConfig::default(), &policy, &RoundRng::new(0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 2, .. }));
    }

    #[test]
    fn negative_second_moment_is_an_invariant_breach() {
        let policy = PrecisionPolicy::fp32_master();
        let mut st = AdamWSRState::new(&[2], &policy, 0);
        st.v = fp(&[0.0, -1.0]);
        let err = adamw_sr_step(&fp(&[0.0, 0.0]), &fp(&[0.0, 0.0]), &st, &AdamWConfig::default(), &policy, &RoundRng::new(0))
            .unwrap_err();
        assert!(matches!(err, Error::NegativeSecondMoment { index: 1, .. }));
    }

    #[test]
    fn bias_corrected_moments_reach_fixed_point() {
        let policy = PrecisionPolicy::fp32_master();
        for (b1, b2) in [(0.9, 0.95), (0.5, 0.999), (0.0, 0.3)] {
            let cfg = plain(1e-6, b1, b2);
            let mut st = AdamWSRState::new(&[1], &policy, 0);
            let mut x = fp(&[0.0]);
            let g = fp(&[-0.75]);
            for _ in 0..2000 {
                step_in_place(&mut x, &g, &mut st, &cfg, &policy, &RoundRng::new(0)).unwrap();
            }
            let s = StepScalars::new(&cfg, &policy, st.t);
            let m_hat = st.m.data()[0] / s.bias1;
            let v_hat = (st.v.data()[0] / s.bias2).sqrt();
            assert!((m_hat + 0.75).abs() < 1e-4, "m_hat {m_hat}");
            assert!((v_hat - 0.75).abs() < 1e-4, "v_hat {v_hat}");
        }
    }

    #[test]
    fn lr_schedules() {
        let mut cfg = AdamWConfig::default();
        assert_eq!(lr_at(&cfg, 1), 1e-3);
        assert_eq!(lr_at(&cfg, 10_000), 1e-3);
        cfg.schedule = Schedule::Analytic;
        assert!((lr_at(&cfg, 1) - 1e-3).abs() < 1e-15);
        assert!(lr_at(&cfg, 2) > lr_at(&cfg, 1));
        let limit = 1e-3 / (1.0f64 - 0.95).sqrt();
        assert!((lr_at(&cfg, 100_000) - limit).abs() < 1e-12);
        cfg.schedule = Schedule::Cosine {
            max: 7e-4,
            min: 1e-5,
            warmup: 2000,
            total: 100_000,
        };
        assert_eq!(lr_at(&cfg, 2000), 7e-4);
        assert_eq!(lr_at(&cfg, 100_000), 1e-5);
        assert_eq!(lr_at(&cfg, 1000), 3.5e-4);
        let mid = lr_at(&cfg, 51_000);
        assert!((mid - (7e-4 + 1e-5) / 2.0).abs() < 1e-12);
        assert!(lr_at(&cfg, 200_000) == 1e-5);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // g = 0 leaves m = v = 0, so only the decay term moves x
        let policy = PrecisionPolicy::fp32_master();
        let mut cfg = plain(0.1, 0.9, 0.95);
        cfg.weight_decay = 0.5;
        let st = AdamWSRState::new(&[1], &policy, 0);
        let (x1, _) = adamw_sr_step(&fp(&[2.0]), &fp(&[0.0]), &st, &cfg, &policy, &RoundRng::new(0)).unwrap();
        assert!((x1.data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-6);
    }

    #[test]
    fn stochastic_step_is_reproducible() {
        let policy = PrecisionPolicy::bf16_sr();
        let x = Tensor::from_vec(vec![1.0, 2.0, -3.0], Precision::Bf16);
        let g = Tensor::from_vec(vec![0.01, -0.02, 0.03], Precision::Bf16);
        let st = AdamWSRState::new(&[3], &policy, 11);
        let rng = RoundRng::new(99);
        let a = adamw_sr_step(&x, &g, &st, &AdamWConfig::default(), &policy, &rng).unwrap();
        let b = adamw_sr_step(&x, &g, &st, &AdamWConfig::default(), &policy, &rng).unwrap();
        assert_eq!(a, b);
        assert!(a.0.is_storage_faithful());
    }

    #[test]
    fn config_validation() {
        let mut cfg = AdamWConfig::default();
        cfg.validate().unwrap();
        cfg.beta2 = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = AdamWConfig::default();
        cfg.eps = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let policy = PrecisionPolicy::bf16_sr();
        let mut params = vec![
            Tensor::from_vec(vec![1.0, 2.0], Precision::Bf16),
            Tensor::new(vec![1, 3], vec![0.5, 0.25, -1.0], Precision::Bf16).unwrap(),
        ];
        let grads = vec![
            Tensor::from_vec(vec![0.1, 0.2], Precision::Bf16),
            Tensor::new(vec![1, 3], vec![0.3, -0.1, 0.0], Precision::Bf16).unwrap(),
        ];
        let mut opt = AdamWSR::new(AdamWConfig::default(), policy, RoundRng::new(5), &params, [10, 11]).unwrap();
        opt.step(&mut params, &grads).unwrap();
        opt.save_checkpoint(dir.path()).unwrap();
        let back = AdamWSR::load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.states, opt.states);
        assert_eq!(back.cfg, opt.cfg);
        assert_eq!(back.policy, opt.policy);
        let header: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("optimizer.json")).unwrap()).unwrap();
        assert_eq!(header["t"], 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn bf16_vec(n: usize) -> impl Strategy<Value = Vec<f32>> {
            proptest::collection::vec((-8.0f32..8.0).prop_map(|v| round_nearest(v).to_f32()), n)
        }

        proptest! {
            #[test]
            fn sr_and_nr_differ_by_at_most_one_grid_step(
                x in bf16_vec(8),
                g in bf16_vec(8),
                alpha in 1e-5f64..1e-1,
                seed in any::<u64>(),
            ) {
                let sr = PrecisionPolicy::bf16_sr();
                let nr = PrecisionPolicy { update_rounding: UpdateRounding::Nearest, ..sr };
                let cfg = plain(alpha, 0.9, 0.95);
                let (x, g) = (Tensor::from_vec(x, Precision::Bf16), Tensor::from_vec(g, Precision::Bf16));
                let st = AdamWSRState::new(&[8], &sr, 3);
                let rng = RoundRng::new(seed);
                let (a, _) = adamw_sr_step(&x, &g, &st, &cfg, &sr, &rng).unwrap();
                let (b, _) = adamw_sr_step(&x, &g, &st, &cfg, &nr, &rng).unwrap();
                for (&p, &q) in a.data().iter().zip(b.data()) {
                    let (kp, kq) = (round_nearest(p).order_key(), round_nearest(q).order_key());
                    prop_assert!((kp - kq).abs() <= 1, "{} vs {}", p, q);
                }
            }

            #[test]
            fn failed_step_changes_nothing(x in bf16_vec(4), bad in 0usize..4) {
                let policy = PrecisionPolicy::bf16_sr();
                let mut opt = AdamWSR::new(
                    AdamWConfig::default(),
                    policy,
                    RoundRng::new(0),
                    &[Tensor::zeros(&[4], Precision::Bf16)],
                    [0],
                ).unwrap();
                let mut params = vec![Tensor::from_vec(x, Precision::Bf16)];
                let mut g = vec![0.5f32; 4];
                g[bad] = f32::NAN;
                let before = (params.clone(), opt.states.clone());
                prop_assert!(opt.step(&mut params, &[Tensor::from_vec(g, Precision::Bf16)]).is_err());
                prop_assert_eq!(before, (params, opt.states));
            }
        }
    }
}
