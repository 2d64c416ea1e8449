//! Numerical companions to the analysis of SR training: the effective
//! gradient perturbation ξ and its moments, the SR-modified loss, closed-form
//! convergence bounds for SR and NR updates, and Monte-Carlo checks of the
//! auxiliary inequalities used in the convergence proofs.
//!
//! Everything here computes in binary64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rounding::{directional_resolution, quant_grid, round_stochastic, Address, QuantGrid, RoundRng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub d: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "F0_minus_Fstar")]
    pub f0_minus_fstar: f64,
    pub alpha: f64,
    pub beta2: f64,
    pub eps: f64,
    #[serde(rename = "Delta")]
    pub delta: f64,
    #[serde(rename = "T")]
    pub t: f64,
}

impl ProblemConstants {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("R", self.r),
            ("L", self.l),
            ("alpha", self.alpha),
            ("eps", self.eps),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive and finite"));
            }
        }
        if !(self.f0_minus_fstar >= 0.0 && self.f0_minus_fstar.is_finite()) {
            return Err(Error::config("F0_minus_Fstar", "must be nonnegative"));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::config("Delta", "must be nonnegative"));
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::config("beta2", "must lie in (0, 1)"));
        }
        if !(self.t >= 1.0 && self.t.is_finite()) {
            return Err(Error::config("T", "must be >= 1"));
        }
        Ok(())
    }

    fn log_term(&self) -> f64 {
        (1.0 + self.r * self.r / (self.eps * (1.0 - self.beta2))).ln()
    }

    fn ln_inv_beta2(&self) -> f64 {
        -self.beta2.ln()
    }

    fn adam_gap_coeff(&self) -> f64 {
        let s = (1.0 - self.beta2).sqrt();
        2.0 * self.r * self.d * (2.0 * self.r / s + self.alpha * self.l / (1.0 - self.beta2))
    }

    fn quant_coeff(&self) -> f64 {
        self.r * self.d * self.delta * self.l / (1.0 - self.beta2).sqrt()
    }
}

/// Terms of a convergence bound. `bias` is zero for SR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub total: f64,
    pub vanishing: f64,
    pub adam_gap: f64,
    pub quantization: f64,
    pub bias: f64,
}

fn common_terms(c: &ProblemConstants) -> (f64, f64, f64) {
    let vanishing = 2.0 * c.r * c.f0_minus_fstar / (c.alpha * c.t);
    let adam_gap = c.adam_gap_coeff() / c.t * (c.log_term() + c.t * c.ln_inv_beta2());
    let quant = c.quant_coeff() / c.t * ((c.t * c.log_term()).sqrt() + c.t * c.ln_inv_beta2().sqrt());
    (vanishing, adam_gap, quant)
}

/// Bound on the average expected squared gradient norm for Adam with SR
/// updates and full-precision gradients.
pub fn sr_bound(c: &ProblemConstants) -> BoundTerms {
    let (vanishing, adam_gap, quantization) = common_terms(c);
    BoundTerms {
        total: vanishing + adam_gap + quantization,
        vanishing,
        adam_gap,
        quantization,
        bias: 0.0,
    }
}

/// Same bound for nearest-rounded updates: quantization doubled plus a bias
/// term that grows as `1/alpha`.
pub fn nr_bound(c: &ProblemConstants) -> BoundTerms {
    let (vanishing, adam_gap, quant) = common_terms(c);
    let quantization = 2.0 * quant;
    let bias = (1.0 - c.beta2).sqrt() * c.d * (c.r * c.delta + c.l * c.delta * c.delta) / c.alpha;
    BoundTerms {
        total: vanishing + adam_gap + quantization + bias,
        vanishing,
        adam_gap,
        quantization,
        bias,
    }
}

/// `T -> inf` limit of the Adam gap.
pub fn adam_gap_limit(c: &ProblemConstants) -> f64 {
    c.adam_gap_coeff() * c.ln_inv_beta2()
}

/// `T -> inf` limit of the SR quantization term.
pub fn quantization_limit(c: &ProblemConstants) -> f64 {
    c.quant_coeff() * c.ln_inv_beta2().sqrt()
}

/// Ratio of the non-vanishing quantization term to the Adam gap.
pub fn corollary_ratio(c: &ProblemConstants) -> f64 {
    quantization_limit(c) / adam_gap_limit(c)
}

/// The two resolution scales below which SR's error is dominated by the
/// Adam gap: `(alpha/sqrt(1-beta2)) sqrt(ln 1/beta2)` and `(R/L) sqrt(ln 1/beta2)`.
pub fn corollary_thresholds(c: &ProblemConstants) -> (f64, f64) {
    let s = c.ln_inv_beta2().sqrt();
    (c.alpha / (1.0 - c.beta2).sqrt() * s, c.r / c.l * s)
}

/// Both sides of the log-sum inequality and of its square-root variant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogSumCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub sqrt_lhs: f64,
    pub sqrt_rhs: f64,
}

impl LogSumCheck {
    pub fn holds(&self) -> bool {
        let slack = |r: f64| 1e-12 * r.abs().max(1.0);
        self.lhs <= self.rhs + slack(self.rhs) && self.sqrt_lhs <= self.sqrt_rhs + slack(self.sqrt_rhs)
    }
}

/// With `b_t = sum_{j<=t} beta2^(t-j) a_j`: `sum a_t/(eps+b_t)` against
/// `ln(1 + b_T/eps) + T ln(1/beta2)`, and `sum sqrt(a_t/(eps+b_t))` against
/// `sqrt(T ln(1 + b_T/eps)) + T sqrt(ln(1/beta2))`.
pub fn logsum_lemma_check(a: &[f64], beta2: f64, eps: f64) -> LogSumCheck {
    let mut b = 0.0;
    let mut lhs = 0.0;
    let mut sqrt_lhs = 0.0;
    for &at in a {
        b = beta2 * b + at;
        let q = at / (eps + b);
        lhs += q;
        sqrt_lhs += q.sqrt();
    }
    let t = a.len() as f64;
    let ln_inv = -beta2.ln();
    let head = (1.0 + b / eps).ln();
    LogSumCheck {
        lhs,
        rhs: head + t * ln_inv,
        sqrt_lhs,
        sqrt_rhs: (t * head).sqrt() + t * ln_inv.sqrt(),
    }
}

/// Monte-Carlo estimate of both sides of the descent-direction inequality
/// `E[G g / sqrt(eps+v)] >= G^2 / (2 sqrt(eps+v~)) - 2R E[g^2/(eps+v)]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DescentCheck {
    pub lhs_mean: f64,
    pub lhs_stderr: f64,
    pub rhs: f64,
    pub rhs_stderr: f64,
}

impl DescentCheck {
    /// `lhs >= rhs` up to `sigmas` combined standard errors.
    pub fn holds(&self, sigmas: f64) -> bool {
        let tol = sigmas * (self.lhs_stderr.powi(2) + self.rhs_stderr.powi(2)).sqrt();
        self.lhs_mean >= self.rhs - tol - 1e-12 * self.rhs.abs()
    }
}

/// `g_sampler(k)` returns the `k`-th draw of an unbiased estimate of `big_g`
/// with `|g| <= r`; `v = beta2 v_prev + g^2` and `v~ = beta2 v_prev + E[g^2]`.
pub fn descent_direction_check(
    big_g: f64,
    mut g_sampler: impl FnMut(u64) -> f64,
    draws: u64,
    v_prev: f64,
    beta2: f64,
    eps: f64,
    r: f64,
) -> DescentCheck {
    let n = draws.max(1);
    let (mut s_l, mut s_l2, mut s_g2, mut s_q, mut s_q2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..n {
        let g = g_sampler(k);
        let v = beta2 * v_prev + g * g;
        let l = big_g * g / (eps + v).sqrt();
        let q = g * g / (eps + v);
        s_l += l;
        s_l2 += l * l;
        s_g2 += g * g;
        s_q += q;
        s_q2 += q * q;
    }
    let nf = n as f64;
    let se = |s: f64, s2: f64| ((s2 / nf - (s / nf).powi(2)).max(0.0) / nf).sqrt();
    let v_tilde = beta2 * v_prev + s_g2 / nf;
    DescentCheck {
        lhs_mean: s_l / nf,
        lhs_stderr: se(s_l, s_l2),
        rhs: big_g * big_g / (2.0 * (eps + v_tilde).sqrt()) - 2.0 * r * s_q / nf,
        rhs_stderr: 2.0 * r * se(s_q, s_q2),
    }
}

/// One draw of the effective gradient perturbation.
///
/// `y = x - alpha*grad` is formed in binary32, `rounded = Q_SR(y)`, and
/// `offset = y - rounded` (exact in binary64). With `value = offset/alpha`
/// the SR update equals a full-precision step on `grad + value`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct XiSample {
    pub value: Vec<f64>,
    pub offset: Vec<f64>,
    pub y: Vec<f32>,
    pub rounded: Vec<f32>,
    pub x: Vec<f32>,
    pub grad: Vec<f32>,
    pub alpha: f32,
}

impl XiSample {
    /// `x - alpha*(grad + xi)` reproduces the rounded value bit for bit.
    pub fn identity_holds(&self) -> bool {
        self.y
            .iter()
            .zip(&self.offset)
            .zip(&self.rounded)
            .all(|((&y, &o), &q)| ((y as f64 - o) as f32).to_bits() == q.to_bits())
    }

    /// Each `alpha*xi_i` is one of the two grid offsets of `y_i`.
    pub fn two_point_support_holds(&self) -> bool {
        self.y.iter().zip(&self.offset).all(|(&y, &o)| match quant_grid(y) {
            Ok(g) => {
                let yd = y as f64;
                o == yd - g.floor || o == yd - g.ceil
            }
            Err(_) => false,
        })
    }
}

pub fn sample_xi(x: &[f32], grad: &[f32], alpha: f32, rng: &RoundRng, addr: Address) -> Result<XiSample> {
    if x.len() != grad.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![x.len()],
            found: vec![grad.len()],
        });
    }
    if !(alpha > 0.0) {
        return Err(Error::config("alpha", "must be positive"));
    }
    let n = x.len();
    let (mut y, mut rounded, mut offset, mut value) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let yi = x[i] - alpha * grad[i];
        let q = round_stochastic(yi, rng, addr.with_index(i as u64))
            .map_err(|_| Error::NonFinite { index: i, value: yi })?
            .to_f32();
        let o = yi as f64 - q as f64;
        y.push(yi);
        rounded.push(q);
        offset.push(o);
        value.push(o / alpha as f64);
    }
    Ok(XiSample {
        value,
        offset,
        y,
        rounded,
        x: x.to_vec(),
        grad: grad.to_vec(),
        alpha,
    })
}

/// bf16 neighbors of an arbitrary real `y` (not just binary32 values).
pub fn bf16_neighbors_f64(y: f64) -> Result<QuantGrid> {
    let near = y as f32;
    if !near.is_finite() {
        return Err(Error::NonFinite { index: 0, value: near });
    }
    let below = if near as f64 > y { near.next_down() } else { near };
    let g = quant_grid(below)?;
    if !g.is_exact() {
        return Ok(g);
    }
    if below as f64 == y {
        return Ok(g);
    }
    let ceil = g.floor + directional_resolution(below, 1.0);
    Ok(QuantGrid {
        floor: g.floor,
        ceil,
        resolution: ceil - g.floor,
    })
}

/// Which algebraic form of the per-coordinate variance to evaluate.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VarianceForm {
    /// `(ceil - y)(y - floor)`.
    #[default]
    Nonnegative,
    /// `(ceil - y)(floor - y)`, a sign-flipped variant kept as a mutation
    /// fixture for the verification suite.
    FlippedSign,
}

fn coord_variance(g: &QuantGrid, y: f64, form: VarianceForm) -> f64 {
    match form {
        VarianceForm::Nonnegative => (g.ceil - y) * (y - g.floor),
        VarianceForm::FlippedSign => (g.ceil - y) * (g.floor - y),
    }
}

/// `E|xi|^2` with `y = x - alpha*grad` taken exactly in binary64.
pub fn xi_variance(x: &[f32], grad: &[f64], alpha: f64) -> Result<f64> {
    xi_variance_with(x, grad, alpha, VarianceForm::Nonnegative)
}

#[doc(hidden)]
pub fn xi_variance_with(x: &[f32], grad: &[f64], alpha: f64, form: VarianceForm) -> Result<f64> {
    let mut s = 0.0;
    for (&xi, &gi) in x.iter().zip(grad) {
        let y = xi as f64 - alpha * gi;
        let g = bf16_neighbors_f64(y)?;
        s += coord_variance(&g, y, form);
    }
    Ok(s / (alpha * alpha))
}

/// `E|xi|^2` for binary32 pre-rounding values `y` (as produced by
/// [`sample_xi`]).
pub fn xi_variance_at(y: &[f32], alpha: f64) -> Result<f64> {
    let mut s = 0.0;
    for &yi in y {
        let g = quant_grid(yi)?;
        s += coord_variance(&g, yi as f64, VarianceForm::Nonnegative);
    }
    Ok(s / (alpha * alpha))
}

/// `lim_{alpha->0} alpha E|xi|^2 = sum_i Delta_i |grad_i|` at a grid point
/// `x`, with `Delta_i` the spacing on the side the step moves into.
pub fn xi_variance_limit(x: &[f32], grad: &[f64]) -> f64 {
    x.iter()
        .zip(grad)
        .map(|(&xi, &gi)| directional_resolution(xi, -gi) * gi.abs())
        .sum()
}

/// Result of evaluating `alpha * xi_variance` along a halving sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HalvingLimit {
    pub alpha: f64,
    pub value: f64,
    pub halvings: u32,
    pub converged: bool,
}

/// Halves `alpha` until successive values of `alpha * xi_variance` differ by
/// less than `rel_tol` (relative), up to `max_halvings`.
pub fn alpha_limit_by_halving(
    x: &[f32],
    grad: &[f64],
    alpha0: f64,
    rel_tol: f64,
    max_halvings: u32,
) -> Result<HalvingLimit> {
    let mut alpha = alpha0;
    let mut prev = alpha * xi_variance(x, grad, alpha)?;
    for k in 1..=max_halvings {
        alpha *= 0.5;
        let cur = alpha * xi_variance(x, grad, alpha)?;
        let scale = prev.abs().max(cur.abs());
        if scale == 0.0 || (cur - prev).abs() <= rel_tol * scale {
            return Ok(HalvingLimit {
                alpha,
                value: cur,
                halvings: k,
                converged: true,
            });
        }
        prev = cur;
    }
    Ok(HalvingLimit {
        alpha,
        value: prev,
        halvings: max_halvings,
        converged: false,
    })
}

/// Smooth objective with an exact gradient.
pub trait TestFunction {
    fn value(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64]) -> Vec<f64>;
}

/// `0.5 * sum_i c_i (x_i - b_i)^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    pub curvature: Vec<f64>,
    pub center: Vec<f64>,
}

impl Quadratic {
    pub fn isotropic(d: usize) -> Self {
        Self {
            curvature: vec![1.0; d],
            center: vec![0.0; d],
        }
    }
}

impl TestFunction for Quadratic {
    fn value(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.curvature)
            .zip(&self.center)
            .map(|((&x, &c), &b)| 0.5 * c * (x - b) * (x - b))
            .sum()
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.curvature)
            .zip(&self.center)
            .map(|((&x, &c), &b)| c * (x - b))
            .collect()
    }
}

/// `F(x) + (alpha/4)|grad F|^2 + (alpha/4) E|xi|^2`.
pub fn modified_loss(f: &dyn TestFunction, x: &[f32], alpha: f64) -> Result<f64> {
    let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let g = f.grad(&xd);
    let g2: f64 = g.iter().map(|v| v * v).sum();
    Ok(f.value(&xd) + 0.25 * alpha * g2 + 0.25 * alpha * xi_variance(x, &g, alpha)?)
}

/// Monte-Carlo check of `E|r|^2 <= Delta alpha |u|_1 <= Delta sqrt(d) alpha |u|_2`
/// for `r = Q_SR(x - alpha u) - (x - alpha u)` at a bf16 point `x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QuantErrorCheck {
    pub mean_sq: f64,
    pub stderr: f64,
    /// Exact expectation of `|r|^2` from the two-point law.
    pub exact: f64,
    pub bound_l1: f64,
    pub bound_l2: f64,
}

impl QuantErrorCheck {
    pub fn holds(&self, sigmas: f64) -> bool {
        let slack = 1e-6 * self.bound_l1;
        self.mean_sq <= self.bound_l1 + sigmas * self.stderr + slack
            && self.exact <= self.bound_l1 + slack
            && self.bound_l1 <= self.bound_l2 * (1.0 + 1e-12)
    }
}

pub fn quantization_error_check(
    x: &[f32],
    u: &[f32],
    alpha: f32,
    rng: &RoundRng,
    stream: u64,
    draws: u64,
) -> Result<QuantErrorCheck> {
    let y: Vec<f32> = x.iter().zip(u).map(|(&x, &u)| x - alpha * u).collect();
    let grids = y.iter().map(|&v| quant_grid(v)).collect::<Result<Vec<_>>>()?;
    let delta = grids.iter().map(|g| g.resolution).fold(0.0, f64::max);
    let exact: f64 = grids
        .iter()
        .zip(&y)
        .map(|(g, &v)| coord_variance(g, v as f64, VarianceForm::Nonnegative))
        .sum();
    let (mut s, mut s2) = (0.0, 0.0);
    for k in 0..draws {
        let mut r2 = 0.0;
        for (i, &v) in y.iter().enumerate() {
            let q = round_stochastic(v, rng, Address::new(stream, k, i as u64))?.to_f32();
            let r = q as f64 - v as f64;
            r2 += r * r;
        }
        s += r2;
        s2 += r2 * r2;
    }
    let n = draws.max(1) as f64;
    let mean = s / n;
    let l1: f64 = u.iter().map(|v| v.abs() as f64).sum();
    let l2: f64 = u.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    let a = alpha as f64;
    Ok(QuantErrorCheck {
        mean_sq: mean,
        stderr: ((s2 / n - mean * mean).max(0.0) / n).sqrt(),
        exact,
        bound_l1: delta * a * l1,
        bound_l2: delta * (x.len() as f64).sqrt() * a * l2,
    })
}
