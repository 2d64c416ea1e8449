//! Property suites behind `srkit verify`.
//!
//! Each suite runs with fixed seeds and returns a report listing every
//! check. Sizes are chosen to finish in seconds; the acceptance target runs
//! the larger versions.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::optim::{
    adamw_sr_step, expose_update, pre_rounding_update, step_in_place, AdamWConfig, AdamWSRState, EpsPlacement,
    Schedule,
};
use crate::policy::{PrecisionPolicy, UpdateRounding};
use crate::replica::{reduced_gradient, ReplicaGroup};
use crate::rounding::{
    quant_grid, round_nearest, round_stochastic, sr_up_probability, Address, RoundRng,
};
use crate::tensor::{Precision, Tensor};
use crate::theory::{
    self, descent_direction_check, logsum_lemma_check, nr_bound, sample_xi, sr_bound,
    xi_variance_limit, ProblemConstants, VarianceForm,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Rounding,
    Optimizer,
    Lemmas,
    Bounds,
    Replica,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Rounding, Suite::Optimizer, Suite::Lemmas, Suite::Bounds, Suite::Replica];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Rounding => "rounding",
            Suite::Optimizer => "optimizer",
            Suite::Lemmas => "lemmas",
            Suite::Bounds => "bounds",
            Suite::Replica => "replica",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config("suite", format!("unknown suite `{s}`")))
    }
}

/// Deliberate defects used to confirm that a suite can fail.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Evaluate the variance with the `(floor - y)` factor.
    XiSign,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub suite: String,
    pub checks: Vec<Check>,
    pub failures: usize,
}

struct Builder {
    suite: Suite,
    checks: Vec<Check>,
}

impl Builder {
    fn new(suite: Suite) -> Self {
        Self {
            suite,
            checks: Vec::new(),
        }
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.to_owned(),
            passed,
            detail: detail.into(),
        });
    }

    fn finish(self) -> Report {
        Report {
            suite: self.suite.name().to_owned(),
            failures: self.checks.iter().filter(|c| !c.passed).count(),
            checks: self.checks,
        }
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Report {
    match suite {
        Suite::Rounding => rounding_suite(opts),
        Suite::Optimizer => optimizer_suite(opts),
        Suite::Lemmas => lemmas_suite(opts),
        Suite::Bounds => bounds_suite(opts),
        Suite::Replica => replica_suite(opts),
    }
}

// ------------------------------------------------------------------- helpers

/// Nearest bf16 value by explicit distance comparison, ties to the even
/// mantissa; results beyond the largest finite value become infinite.
pub fn nearest_reference(x: f32) -> f32 {
    if x.is_nan() {
        return f32::NAN;
    }
    if x.is_infinite() {
        return x;
    }
    let g = quant_grid(x).expect("finite");
    if g.is_exact() {
        return x;
    }
    let xd = x as f64;
    let (dl, du) = (xd - g.floor, g.ceil - xd);
    let pick = if dl < du {
        g.floor
    } else if du < dl {
        g.ceil
    } else {
        let lsb = |v: f64| {
            let f = v as f32;
            f.is_infinite() || (f.to_bits() >> 16) & 1 == 0
        };
        if lsb(g.floor) {
            g.floor
        } else {
            g.ceil
        }
    };
    pick as f32
}

/// Random finite binary32 value from a uniformly random bit pattern.
pub fn random_finite(rng: &RoundRng, addr: Address) -> f32 {
    let mut k = 0u64;
    loop {
        let v = f32::from_bits(rng.draw_u32(Address::new(addr.stream, addr.step ^ (k << 40), addr.index)));
        if v.is_finite() {
            return v;
        }
        k += 1;
    }
}

/// Monte-Carlo mean and up-frequency of SR at `x` over `draws`.
pub struct SrStats {
    pub mean: f64,
    pub up_frac: f64,
    pub p: f64,
    pub delta: f64,
    pub only_neighbors: bool,
}

pub fn sr_stats(x: f32, rng: &RoundRng, stream: u64, draws: u64) -> SrStats {
    let g = quant_grid(x).expect("finite");
    let mut up = 0u64;
    let mut sum = 0.0f64;
    let mut only = true;
    for k in 0..draws {
        let q = round_stochastic(x, rng, Address::new(stream, 0, k)).expect("finite").to_f32() as f64;
        sum += q;
        if q == g.ceil && !g.is_exact() {
            up += 1;
        }
        only &= q == g.floor || q == g.ceil;
    }
    SrStats {
        mean: sum / draws as f64,
        up_frac: up as f64 / draws as f64,
        p: sr_up_probability(x),
        delta: g.resolution,
        only_neighbors: only,
    }
}

impl SrStats {
    /// `(|mean - x| <= k sigma_mean, |freq - p| <= k sigma_freq)`.
    pub fn within(&self, x: f32, draws: u64, k: f64) -> (bool, bool) {
        let n = draws as f64;
        let sd = (self.p * (1.0 - self.p) / n).sqrt();
        // half an f64 ulp of slack covers the summation error
        let slack = 1e-12 * (x as f64).abs();
        let mean_ok = (self.mean - x as f64).abs() <= k * self.delta * sd + slack;
        let freq_ok = (self.up_frac - self.p).abs() <= k * sd + 1e-15;
        (mean_ok, freq_ok)
    }
}

// ------------------------------------------------------------------- rounding

fn rounding_suite(opts: &VerifyOptions) -> Report {
    let mut b = Builder::new(Suite::Rounding);
    let rng = RoundRng::new(opts.seed);

    // spec examples
    let ok = round_nearest(1.0).to_bits() == 0x3F80
        && round_nearest(f32::from_bits(0x3F80_4000)).to_bits() == 0x3F80
        && round_nearest(f32::from_bits(0x3F80_8000)).to_bits() == 0x3F80
        && sr_up_probability(1.001953125) == 0.25
        && sr_up_probability(1.00390625) == 0.5;
    b.check("worked_examples", ok, "nearest and up-probability examples");

    let draws = 20_000;
    let (mut bad_mean, mut bad_freq, mut bad_support) = (0, 0, 0);
    let n_values = 200;
    for i in 0..n_values {
        let x = random_finite(&rng, Address::new(1, 0, i));
        let s = sr_stats(x, &rng, 100 + i, draws);
        let (m, f) = s.within(x, draws, 4.5);
        bad_mean += !m as u32;
        bad_freq += !f as u32;
        bad_support += !s.only_neighbors as u32;
    }
    b.check("sr_unbiased", bad_mean == 0, format!("{bad_mean}/{n_values} values outside 4.5 sigma"));
    b.check("sr_frequency_law", bad_freq == 0, format!("{bad_freq}/{n_values} values outside 4.5 sigma"));
    b.check("sr_two_point_support", bad_support == 0, format!("{bad_support} values left their neighbors"));

    // values just below a binade boundary round up into the next binade
    let mut ok = true;
    for x in [1.99, -3.999, 0.9999, 2f32.powi(-126) * 0.9999] {
        let s = sr_stats(x, &rng, 7, draws);
        let (m, f) = s.within(x, draws, 4.5);
        ok &= m && f && s.only_neighbors;
    }
    b.check("sr_binade_crossing", ok, "frequency law across binade and subnormal boundaries");

    let mut mism = 0u64;
    for bits in 0x3F80_0000u32..0x4080_0000 {
        let x = f32::from_bits(bits);
        if round_nearest(x).to_f32().to_bits() != nearest_reference(x).to_bits() {
            mism += 1;
        }
    }
    b.check("nearest_two_binades", mism == 0, format!("{mism} mismatches over [1, 4)"));

    let mut bad = 0u32;
    for i in 0..100_000 {
        let x = random_finite(&rng, Address::new(2, 0, i));
        let n = round_nearest(x).to_f32();
        let r = nearest_reference(x);
        let g = quant_grid(x).unwrap();
        let err_ok = !n.is_finite() || ((n as f64) - x as f64).abs() <= g.resolution / 2.0;
        let s = round_stochastic(x, &rng, Address::new(3, 0, i)).unwrap().to_f32() as f64;
        let sr_ok = (s - x as f64).abs() <= g.resolution;
        if n.to_bits() != r.to_bits() || !err_ok || !sr_ok {
            bad += 1;
        }
    }
    b.check("nearest_random_and_error_bounds", bad == 0, format!("{bad}/100000 failures"));

    // uniformity: top byte of draw_u16 in 256 bins
    let n = 500_000u64;
    let mut bins = [0u64; 256];
    let mut pair = [0u64; 256];
    let mut sum = 0.0;
    for k in 0..n {
        let a = rng.draw_u16(Address::new(9, 0, k));
        let c = rng.draw_u16(Address::new(10, 0, k));
        bins[(a >> 8) as usize] += 1;
        pair[((a >> 12) << 4 | (c >> 12)) as usize] += 1;
        sum += a as f64;
    }
    let chi = |h: &[u64; 256]| {
        let e = n as f64 / 256.0;
        h.iter().map(|&o| (o as f64 - e).powi(2) / e).sum::<f64>()
    };
    let (c1, c2) = (chi(&bins), chi(&pair));
    // 255 degrees of freedom: mean 255, sd ~22.6
    let limit = 255.0 + 5.0 * 22.6;
    b.check("draw_u16_uniform", c1 < limit, format!("chi2 = {c1:.1}"));
    b.check("draw_u16_independent_addresses", c2 < limit, format!("chi2 = {c2:.1}"));
    let mean = sum / n as f64;
    let sd = 65535.0 / 12f64.sqrt() / (n as f64).sqrt();
    b.check(
        "draw_u16_mean",
        (mean - 32767.5).abs() <= 4.0 * sd,
        format!("mean {mean:.2}"),
    );
    b.finish()
}

// ------------------------------------------------------------------ optimizer

/// Random bf16 optimizer state of dimension `d` with weights spanning several
/// decades, keyed by `k`.
pub fn random_state(rng: &RoundRng, k: u64, d: usize) -> (Tensor, Tensor, AdamWSRState) {
    let policy = PrecisionPolicy::bf16_sr();
    let scale = 10f64.powf(rng.uniform(Address::new(20, k, 0)) * 4.0 - 2.0);
    let x: Vec<f32> = (0..d)
        .map(|i| round_nearest((rng.normal(Address::new(21, k, i as u64)) * scale) as f32).to_f32())
        .collect();
    let g: Vec<f32> = (0..d)
        .map(|i| rng.normal(Address::new(22, k, i as u64)) as f32)
        .collect();
    let mut st = AdamWSRState::new(&[d], &policy, 5);
    let m: Vec<f32> = (0..d).map(|i| 0.1 * rng.normal(Address::new(23, k, i as u64)) as f32).collect();
    let v: Vec<f32> = (0..d)
        .map(|i| (rng.normal(Address::new(24, k, i as u64)) as f32).powi(2))
        .collect();
    st.m = Tensor::from_vec(m, Precision::Bf16);
    st.v = Tensor::from_vec(v, Precision::Bf16);
    st.t = 1 + rng.below(Address::new(25, k, 0), 100);
    (
        Tensor::from_vec(x, Precision::Bf16),
        Tensor::from_vec(g, Precision::Bf16),
        st,
    )
}

fn optimizer_suite(opts: &VerifyOptions) -> Report {
    let mut b = Builder::new(Suite::Optimizer);
    let rng = RoundRng::new(opts.seed);
    let cfg = AdamWConfig {
        weight_decay: 0.1,
        ..AdamWConfig::default()
    };
    let sr = PrecisionPolicy::bf16_sr();
    let nr_update = PrecisionPolicy {
        update_rounding: UpdateRounding::Nearest,
        ..sr
    };

    let mut same = true;
    for k in 0..50 {
        let (x, g, st) = random_state(&rng, k, 16);
        same &= expose_update(&x, &g, &st, &cfg, &sr).ok() == expose_update(&x, &g, &st, &cfg, &nr_update).ok()
            && pre_rounding_update(&x, &g, &st, &cfg, &sr).ok() == pre_rounding_update(&x, &g, &st, &cfg, &nr_update).ok();
    }
    b.check("direction_independent_of_rounding", same, "50 random states");

    // E[x_{t+1}] equals the unrounded update
    let (x, g, st) = random_state(&rng, 999, 10);
    let y = pre_rounding_update(&x, &g, &st, &cfg, &sr).unwrap();
    let draws = 20_000u64;
    let mut sums = vec![0.0f64; 10];
    for k in 0..draws {
        let (x1, _) = adamw_sr_step(&x, &g, &st, &cfg, &sr, &RoundRng::new(opts.seed ^ (k + 1) << 20)).unwrap();
        for (s, &v) in sums.iter_mut().zip(x1.data()) {
            *s += v as f64;
        }
    }
    let mut worst = 0.0f64;
    for (i, &yi) in y.iter().enumerate() {
        let gr = quant_grid(yi).unwrap();
        let p = sr_up_probability(yi);
        let sd = gr.resolution * (p * (1.0 - p) / draws as f64).sqrt();
        let z = if sd > 0.0 {
            (sums[i] / draws as f64 - yi as f64).abs() / sd
        } else if sums[i] / draws as f64 == yi as f64 {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(z);
    }
    b.check("sr_update_unbiased", worst <= 4.5, format!("max |z| = {worst:.2}"));

    let mut viol = 0;
    for k in 0..200 {
        let (x, g, st) = random_state(&rng, 2000 + k, 8);
        let u = expose_update(&x, &g, &st, &AdamWConfig::default(), &sr).unwrap();
        let a = crate::optim::lr_at(&AdamWConfig::default(), st.t + 1) as f32;
        let c = theory::quantization_error_check(x.data(), u.data(), a, &rng, 30 + k, 2000).unwrap();
        viol += !c.holds(4.5) as u32;
    }
    b.check("quantization_error_bound", viol == 0, format!("{viol}/200 states violate"));

    // stagnation: alpha*|u| far below half the spacing of every weight
    let stag_cfg = AdamWConfig {
        alpha: 1e-5,
        ..AdamWConfig::default()
    };
    let x0 = Tensor::from_vec(vec![1.0, -2.0, 0.75, 3.5], Precision::Bf16);
    let g0 = Tensor::from_vec(vec![0.5, -0.25, 1.0, 2.0], Precision::Bf16);
    let run = |policy: &PrecisionPolicy| {
        let mut x = x0.clone();
        let mut st = AdamWSRState::new(&[4], policy, 1);
        for _ in 0..2000 {
            step_in_place(&mut x, &g0, &mut st, &stag_cfg, policy, &rng).unwrap();
        }
        x
    };
    let frozen = run(&PrecisionPolicy::bf16_nr()) == x0;
    let moved = run(&sr) != x0;
    b.check("nearest_stagnates", frozen, "bf16 nearest keeps weights fixed for 2000 steps");
    b.check("stochastic_moves", moved, "bf16 SR moves under the same updates");

    let fp = PrecisionPolicy::fp32_master();
    let fixed_cfg = AdamWConfig {
        alpha: 1e-7,
        ..AdamWConfig::default()
    };
    let mut x = Tensor::from_vec(vec![0.0], Precision::Fp32);
    let mut st = AdamWSRState::new(&[1], &fp, 0);
    let g = Tensor::from_vec(vec![-0.6], Precision::Fp32);
    for _ in 0..3000 {
        step_in_place(&mut x, &g, &mut st, &fixed_cfg, &fp, &rng).unwrap();
    }
    let m_hat = st.m.data()[0] as f64 / (1.0 - 0.9f64.powf(st.t as f64));
    let v_hat = (st.v.data()[0] as f64 / (1.0 - 0.95f64.powf(st.t as f64))).sqrt();
    b.check(
        "bias_corrected_fixed_point",
        (m_hat + 0.6).abs() < 1e-4 && (v_hat - 0.6).abs() < 1e-4,
        format!("m_hat {m_hat:.6}, v_hat {v_hat:.6}"),
    );

    let inside = AdamWConfig {
        eps_placement: EpsPlacement::InsideRoot,
        eps: 0.5,
        beta1: 0.0,
        beta2: 0.0,
        schedule: Schedule::Constant,
        ..AdamWConfig::default()
    };
    let st = AdamWSRState::new(&[1], &fp, 0);
    let u = expose_update(
        &Tensor::from_vec(vec![0.0], Precision::Fp32),
        &Tensor::from_vec(vec![1.0], Precision::Fp32),
        &st,
        &inside,
        &fp,
    )
    .unwrap();
    b.check(
        "eps_inside_root",
        u.data()[0] == 1.0 / 1.5f32.sqrt(),
        format!("u = {}", u.data()[0]),
    );
    b.finish()
}

// --------------------------------------------------------------------- lemmas

fn lemmas_suite(opts: &VerifyOptions) -> Report {
    let mut b = Builder::new(Suite::Lemmas);
    let rng = RoundRng::new(opts.seed);
    let form = match opts.fault {
        Some(Fault::XiSign) => VarianceForm::FlippedSign,
        None => VarianceForm::Nonnegative,
    };

    let d = 10usize;
    let x: Vec<f32> = (0..d as u64)
        .map(|i| round_nearest(rng.normal(Address::new(40, 0, i)) as f32 * 3.0).to_f32())
        .collect();
    let g: Vec<f32> = (0..d as u64).map(|i| rng.normal(Address::new(41, 0, i)) as f32).collect();
    let alpha = 2e-3f32;
    let draws = 100_000u64;
    let first = sample_xi(&x, &g, alpha, &rng, Address::new(42, 0, 0)).unwrap();
    // y is the same for every draw; evaluate the variance at it directly
    let analytic = theory::xi_variance_with(&first.y, &vec![0.0; d], alpha as f64, form).unwrap();
    let (mut sum, mut sq, mut sq2) = (vec![0.0f64; d], 0.0, 0.0);
    let mut identity = true;
    for k in 0..draws {
        let s = sample_xi(&x, &g, alpha, &rng, Address::new(42, k, 0)).unwrap();
        identity &= s.identity_holds() && s.two_point_support_holds();
        let n2: f64 = s.value.iter().map(|v| v * v).sum();
        for (a, v) in sum.iter_mut().zip(&s.value) {
            *a += v;
        }
        sq += n2;
        sq2 += n2 * n2;
    }
    let n = draws as f64;
    b.check("xi_identity_and_support", identity, "x - alpha(g + xi) == Q_SR(x - alpha g) for every draw");
    let mut mean_ok = true;
    for i in 0..d {
        let p = sr_up_probability(first.y[i]);
        let gr = quant_grid(first.y[i]).unwrap();
        let sd = gr.resolution / alpha as f64 * (p * (1.0 - p) / n).sqrt();
        mean_ok &= (sum[i] / n).abs() <= 4.0 * sd + 1e-12;
    }
    b.check("xi_mean_zero", mean_ok, "per-coordinate mean within 4 sigma of 0");
    let mean_sq = sq / n;
    let se = ((sq2 / n - mean_sq * mean_sq).max(0.0) / n).sqrt();
    b.check(
        "xi_second_moment",
        (mean_sq - analytic).abs() <= 4.0 * se,
        format!("monte carlo {mean_sq:.6e} vs analytic {analytic:.6e} (se {se:.2e})"),
    );

    // alpha -> 0 at grid points
    let xg: Vec<f32> = vec![1.5, -0.75, 3.0, 0.3125, -6.5];
    let gg: Vec<f64> = vec![0.7, -1.3, 0.2, 2.0, 0.9];
    let want = xi_variance_limit(&xg, &gg);
    let lim = {
        let mut a = 1e-3;
        let mut prev = a * theory::xi_variance_with(&xg, &gg, a, form).unwrap();
        let mut out = (prev, false);
        for _ in 0..60 {
            a *= 0.5;
            let cur = a * theory::xi_variance_with(&xg, &gg, a, form).unwrap();
            if (cur - prev).abs() <= 1e-3 * cur.abs().max(prev.abs()) {
                out = (cur, true);
                break;
            }
            prev = cur;
        }
        out
    };
    b.check(
        "xi_small_step_limit",
        lim.1 && (lim.0 - want).abs() <= 0.01 * want,
        format!("limit {:.6e} vs sum Delta|g| {want:.6e}", lim.0),
    );

    let mut bad = 0;
    for k in 0..2000u64 {
        let len = 1 + rng.below(Address::new(50, k, 0), 200) as usize;
        let beta2 = 0.1 + 0.899 * rng.uniform(Address::new(51, k, 0));
        let eps = 10f64.powf(-8.0 + 9.0 * rng.uniform(Address::new(52, k, 0)));
        let a: Vec<f64> = (0..len)
            .map(|i| rng.uniform(Address::new(53, k, i as u64)).powi(4) * 100.0)
            .collect();
        bad += !logsum_lemma_check(&a, beta2, eps).holds() as u32;
    }
    b.check("logsum_lemma", bad == 0, format!("{bad}/2000 counterexamples"));

    let mut fails = 0;
    for (k, &(big_g, c)) in [(0.5, 0.3), (1.0, 0.9), (0.1, 0.05), (0.0, 0.4)].iter().enumerate() {
        let r = big_g + c;
        let chk = descent_direction_check(
            big_g,
            |j| {
                if rng.draw_u32(Address::new(60, k as u64, j)) & 1 == 0 {
                    big_g - c
                } else {
                    big_g + c
                }
            },
            50_000,
            0.2,
            0.95,
            1e-8,
            r,
        );
        fails += !chk.holds(4.0) as u32;
    }
    b.check("descent_direction", fails == 0, format!("{fails}/4 cases fail"));

    let q = theory::Quadratic::isotropic(3);
    let stationary = theory::modified_loss(&q, &[0.0, 0.0, 0.0], 1e-3).unwrap();
    b.check("modified_loss_stationary", stationary == 0.0, format!("{stationary}"));
    b.finish()
}

// --------------------------------------------------------------------- bounds

/// Random valid constants over wide log ranges.
pub fn random_constants(rng: &RoundRng, k: u64) -> ProblemConstants {
    let u = |j: u64| rng.uniform(Address::new(70, k, j));
    let lg = |j: u64, lo: f64, hi: f64| 10f64.powf(lo + (hi - lo) * u(j));
    ProblemConstants {
        d: (lg(0, 0.0, 7.0)).round().max(1.0),
        r: lg(1, -3.0, 2.0),
        l: lg(2, -2.0, 3.0),
        f0_minus_fstar: lg(3, -2.0, 3.0),
        alpha: lg(4, -6.0, -1.0),
        beta2: 0.5 + 0.4999 * u(5),
        eps: lg(6, -12.0, -4.0),
        delta: lg(7, -9.0, -1.0),
        t: lg(8, 0.0, 7.0).round().max(1.0),
    }
}

fn bounds_suite(opts: &VerifyOptions) -> Report {
    let mut b = Builder::new(Suite::Bounds);
    let rng = RoundRng::new(opts.seed);
    let n = 100_000u64;
    let (mut order, mut nonneg) = (0u64, 0u64);
    for k in 0..n {
        let c = random_constants(&rng, k);
        let (s, r) = (sr_bound(&c), nr_bound(&c));
        order += !(r.total > s.total) as u64;
        nonneg += ![s.vanishing, s.adam_gap, s.quantization, r.bias].iter().all(|v| *v >= 0.0 && v.is_finite()) as u64;
    }
    b.check("sr_below_nr", order == 0, format!("{order}/{n} samples violate"));
    b.check("terms_nonnegative", nonneg == 0, format!("{nonneg}/{n} samples violate"));

    let mut eq = true;
    for k in 0..1000 {
        let mut c = random_constants(&rng, n + k);
        c.delta = 0.0;
        eq &= sr_bound(&c) == nr_bound(&c);
    }
    b.check("equal_at_zero_resolution", eq, "1000 samples with Delta = 0");

    let mut regime = 0.0f64;
    for k in 0..10_000 {
        let mut c = random_constants(&rng, 2 * n + k);
        let (t1, t2) = theory::corollary_thresholds(&c);
        c.delta = t1.min(t2) / 100.0;
        regime = regime.max(theory::corollary_ratio(&c));
    }
    b.check("corollary_regimes", regime < 0.05, format!("max ratio {regime:.2e}"));
    b.finish()
}

// -------------------------------------------------------------------- replica

fn replica_suite(opts: &VerifyOptions) -> Report {
    let mut b = Builder::new(Suite::Replica);
    let rng = RoundRng::new(opts.seed);
    let init = vec![
        Tensor::from_vec((0..32).map(|i| (i as f32 * 0.61).sin()).collect(), Precision::Fp32),
        Tensor::from_vec(vec![0.25, -0.5], Precision::Fp32),
    ];
    let grad = |m: usize, p: &[Tensor]| {
        let c = 0.05 * (m as f32 + 1.0);
        let gs: Vec<Vec<f32>> = p.iter().map(|t| t.data().iter().map(|&x| x - c).collect()).collect();
        let loss = gs.iter().flatten().map(|v| 0.5 * v * v).sum();
        (loss, gs)
    };
    let mut zero = true;
    for m in [1usize, 2, 4] {
        for policy in [PrecisionPolicy::bf16_sr(), PrecisionPolicy::bf16_nr(), PrecisionPolicy::fp32_master()] {
            let mut g = ReplicaGroup::new(m, &init, AdamWConfig::default(), policy, rng, true).unwrap();
            for _ in 0..100 {
                zero &= g.group_step_with(grad).unwrap().drift.is_zero();
            }
        }
    }
    b.check("shared_randomness_zero_drift", zero, "M in {1,2,4}, three policies, 100 steps");

    let mut drifted = 0;
    for s in 0..10u64 {
        let mut g = ReplicaGroup::new(
            2,
            &init,
            AdamWConfig::default(),
            PrecisionPolicy::bf16_sr(),
            RoundRng::new(opts.seed + s),
            false,
        )
        .unwrap();
        let mut last = 0.0;
        for _ in 0..100 {
            last = g.group_step_with(grad).unwrap().drift.max_linf;
        }
        drifted += (last > 0.0) as u32;
    }
    b.check("independent_randomness_drifts", drifted == 10, format!("{drifted}/10 seeds drift"));

    let single = |shared| {
        let mut g = ReplicaGroup::new(1, &init, AdamWConfig::default(), PrecisionPolicy::bf16_sr(), rng, shared).unwrap();
        for _ in 0..100 {
            g.group_step_with(grad).unwrap();
        }
        g.params
    };
    b.check("single_replica_flag_invisible", single(true) == single(false), "M = 1");

    let sched = |parallel| {
        let mut g = ReplicaGroup::new(4, &init, AdamWConfig::default(), PrecisionPolicy::bf16_sr(), rng, true).unwrap();
        g.parallel = parallel;
        for _ in 0..50 {
            g.group_step_with(grad).unwrap();
        }
        g.params
    };
    b.check("scheduling_independent", sched(true) == sched(false), "worker threads vs sequential");

    let a = Tensor::from_vec(vec![256.0], Precision::Fp32);
    let c = Tensor::from_vec(vec![0.75], Precision::Fp32);
    let f = reduced_gradient(&[&a, &c], Precision::Fp32).unwrap().data()[0] as f64;
    let h = reduced_gradient(&[&a, &c], Precision::Bf16).unwrap().data()[0] as f64;
    let ulp = quant_grid(256.75).unwrap().resolution;
    b.check(
        "reduction_precision_gap",
        2.0 * (f - h).abs() <= ulp,
        format!("fp32 {f} vs bf16 {h}"),
    );
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_agrees_on_examples() {
        assert_eq!(nearest_reference(f32::from_bits(0x3F80_8000)), 1.0);
        assert_eq!(nearest_reference(f32::from_bits(0x3F81_8000)).to_bits(), 0x3F82_0000);
        assert_eq!(nearest_reference(f32::MAX), f32::INFINITY);
        assert_eq!(nearest_reference(-0.0).to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn suite_names_parse() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn bounds_and_replica_suites_pass() {
        for s in [Suite::Bounds, Suite::Replica] {
            let r = run_suite(s, &VerifyOptions::default());
            assert_eq!(r.failures, 0, "{r:#?}");
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let r = run_suite(
            Suite::Lemmas,
            &VerifyOptions {
                seed: 0,
                fault: Some(Fault::XiSign),
            },
        );
        assert!(r.failures > 0);
        let names: Vec<_> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert!(names.contains(&"xi_second_moment"), "{names:?}");
    }
}

