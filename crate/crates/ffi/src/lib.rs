//! C ABI for the rounding primitives and the AdamW-SR optimizer.
//!
//! Handles are opaque pointers created by `*_new` and released by the
//! matching `*_free`. Fallible calls return an [`SrkitStatus`]; outputs go
//! through pointer arguments and are untouched on failure. No function
//! unwinds across the boundary.

use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use srkit::optim::{AdamWConfig, AdamWSR, EpsPlacement, Schedule};
use srkit::policy::{PolicyPreset, PrecisionPolicy};
use srkit::replica::{stream_id, ROLE_OPT};
use srkit::rounding::{self, Address, Bf16, RoundRng};
use srkit::tensor::Tensor;
use srkit::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SrkitStatus {
    Ok = 0,
    NullPointer = 1,
    NonFinite = 2,
    ShapeMismatch = 3,
    InvalidConfig = 4,
    NegativeSecondMoment = 5,
    Internal = 6,
}

impl From<&Error> for SrkitStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::NonFinite { .. } => SrkitStatus::NonFinite,
            Error::ShapeMismatch { .. } => SrkitStatus::ShapeMismatch,
            Error::InvalidConfig { .. } => SrkitStatus::InvalidConfig,
            Error::NegativeSecondMoment { .. } => SrkitStatus::NegativeSecondMoment,
            Error::Replica { source, .. } => SrkitStatus::from(source.as_ref()),
            _ => SrkitStatus::Internal,
        }
    }
}

/// Neighbors and spacing of a value on the bf16 grid.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SrkitQuantGrid {
    pub floor: f64,
    pub ceil: f64,
    pub resolution: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SrkitPolicy {
    Bf16Sr = 0,
    Bf16Nr = 1,
    Fp32Master = 2,
}

/// Optimizer hyperparameters. `eps_inside_root` selects `sqrt(v + eps)`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SrkitAdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub eps_inside_root: bool,
}

/// Counter-based generator.
pub struct SrkitRng(RoundRng);

/// Optimizer over a fixed list of tensors.
pub struct SrkitOptimizer {
    inner: AdamWSR,
    lens: Vec<usize>,
}

fn guard(f: impl FnOnce() -> SrkitStatus) -> SrkitStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(SrkitStatus::Internal)
}

#[no_mangle]
pub extern "C" fn srkit_status_message(status: SrkitStatus) -> *const c_char {
    let s: &'static [u8] = match status {
        SrkitStatus::Ok => b"ok\0",
        SrkitStatus::NullPointer => b"null pointer argument\0",
        SrkitStatus::NonFinite => b"non-finite input\0",
        SrkitStatus::ShapeMismatch => b"shape mismatch\0",
        SrkitStatus::InvalidConfig => b"invalid configuration\0",
        SrkitStatus::NegativeSecondMoment => b"negative second moment\0",
        SrkitStatus::Internal => b"internal error\0",
    };
    s.as_ptr().cast()
}

/// Nearest-even bf16 bits of `x`.
#[no_mangle]
pub extern "C" fn srkit_round_nearest(x: f32) -> u16 {
    rounding::round_nearest(x).to_bits()
}

#[no_mangle]
pub extern "C" fn srkit_bf16_to_f32(bits: u16) -> f32 {
    Bf16::from_bits(bits).to_f32()
}

/// Up-rounding probability; NaN for non-finite `x`.
#[no_mangle]
pub extern "C" fn srkit_sr_up_probability(x: f32) -> f64 {
    if !x.is_finite() {
        return f64::NAN;
    }
    rounding::sr_up_probability(x)
}

#[no_mangle]
pub unsafe extern "C" fn srkit_quant_grid(x: f32, out: *mut SrkitQuantGrid) -> SrkitStatus {
    if out.is_null() {
        return SrkitStatus::NullPointer;
    }
    match rounding::quant_grid(x) {
        Ok(g) => {
            // SAFETY: checked non-null; caller provides a writable struct
            unsafe {
                *out = SrkitQuantGrid {
                    floor: g.floor,
                    ceil: g.ceil,
                    resolution: g.resolution,
                }
            };
            SrkitStatus::Ok
        }
        Err(e) => SrkitStatus::from(&e),
    }
}

#[no_mangle]
pub extern "C" fn srkit_rng_new(seed: u64) -> *mut SrkitRng {
    Box::into_raw(Box::new(SrkitRng(RoundRng::new(seed))))
}

#[no_mangle]
pub unsafe extern "C" fn srkit_rng_free(rng: *mut SrkitRng) {
    if !rng.is_null() {
        // SAFETY: pointer came from srkit_rng_new and is freed once
        drop(unsafe { Box::from_raw(rng) });
    }
}

/// The 16-bit draw at `(stream, step, index)`; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn srkit_draw_u16(rng: *const SrkitRng, stream: u64, step: u64, index: u64) -> u16 {
    // SAFETY: null or a live handle
    match unsafe { rng.as_ref() } {
        Some(r) => r.0.draw_u16(Address::new(stream, step, index)),
        None => 0,
    }
}

#[no_mangle]
pub unsafe extern "C" fn srkit_round_stochastic(
    rng: *const SrkitRng,
    x: f32,
    stream: u64,
    step: u64,
    index: u64,
    out: *mut u16,
) -> SrkitStatus {
    // SAFETY: null or a live handle
    let Some(r) = (unsafe { rng.as_ref() }) else {
        return SrkitStatus::NullPointer;
    };
    if out.is_null() {
        return SrkitStatus::NullPointer;
    }
    match rounding::round_stochastic(x, &r.0, Address::new(stream, step, index)) {
        Ok(b) => {
            // SAFETY: checked non-null
            unsafe { *out = b.to_bits() };
            SrkitStatus::Ok
        }
        Err(e) => SrkitStatus::from(&e),
    }
}

fn policy_of(p: SrkitPolicy) -> PrecisionPolicy {
    match p {
        SrkitPolicy::Bf16Sr => PolicyPreset::Bf16Sr,
        SrkitPolicy::Bf16Nr => PolicyPreset::Bf16Nr,
        SrkitPolicy::Fp32Master => PolicyPreset::Fp32Master,
    }
    .policy()
}

/// Creates an optimizer for `n_tensors` flat tensors of lengths `lens`,
/// drawing write-back randomness from `seed`. The constant learning rate is
/// `cfg.lr`.
#[no_mangle]
pub unsafe extern "C" fn srkit_optimizer_new(
    cfg: *const SrkitAdamWConfig,
    policy: SrkitPolicy,
    seed: u64,
    lens: *const usize,
    n_tensors: usize,
    out: *mut *mut SrkitOptimizer,
) -> SrkitStatus {
    guard(|| {
        if cfg.is_null() || out.is_null() || (lens.is_null() && n_tensors > 0) {
            return SrkitStatus::NullPointer;
        }
        // SAFETY: checked non-null; lens covers n_tensors entries
        let (c, lens) = unsafe {
            (
                *cfg,
                if n_tensors == 0 { &[][..] } else { slice::from_raw_parts(lens, n_tensors) },
            )
        };
        let config = AdamWConfig {
            alpha: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
            schedule: Schedule::Constant,
            eps_placement: if c.eps_inside_root {
                EpsPlacement::InsideRoot
            } else {
                EpsPlacement::OutsideRoot
            },
        };
        let pol = policy_of(policy);
        let params: Vec<Tensor> = lens.iter().map(|&n| Tensor::zeros(&[n], pol.weights)).collect();
        let streams = (0..n_tensors as u64).map(|k| stream_id(ROLE_OPT, 0, k));
        match AdamWSR::new(config, pol, RoundRng::new(seed), &params, streams) {
            Ok(inner) => {
                let b = Box::new(SrkitOptimizer {
                    inner,
                    lens: lens.to_vec(),
                });
                // SAFETY: checked non-null
                unsafe { *out = Box::into_raw(b) };
                SrkitStatus::Ok
            }
            Err(e) => SrkitStatus::from(&e),
        }
    })
}

/// One step over every tensor. `params[k]` and `grads[k]` point at
/// `lens[k]` floats; parameters are updated in place. Values are narrowed
/// to the policy's precisions on the way in. On error nothing changes.
#[no_mangle]
pub unsafe extern "C" fn srkit_optimizer_step(
    opt: *mut SrkitOptimizer,
    params: *const *mut f32,
    grads: *const *const f32,
) -> SrkitStatus {
    guard(|| {
        // SAFETY: null or a live handle
        let Some(o) = (unsafe { opt.as_mut() }) else {
            return SrkitStatus::NullPointer;
        };
        let n = o.lens.len();
        if n > 0 && (params.is_null() || grads.is_null()) {
            return SrkitStatus::NullPointer;
        }
        let pol = o.inner.policy;
        let mut ps = Vec::with_capacity(n);
        let mut gs = Vec::with_capacity(n);
        for k in 0..n {
            // SAFETY: arrays hold n pointers
            let (p, g) = unsafe { (*params.add(k), *grads.add(k)) };
            if p.is_null() || g.is_null() {
                return SrkitStatus::NullPointer;
            }
            let len = o.lens[k];
            // SAFETY: each buffer holds lens[k] floats
            let (pv, gv) = unsafe { (slice::from_raw_parts(p, len), slice::from_raw_parts(g, len)) };
            ps.push(Tensor::from_vec(pv.to_vec(), pol.weights));
            gs.push(Tensor::from_vec(gv.to_vec(), pol.gradients));
        }
        let saved = o.inner.states.clone();
        if let Err(e) = o.inner.step(&mut ps, &gs) {
            o.inner.states = saved;
            return SrkitStatus::from(&e);
        }
        for (k, t) in ps.iter().enumerate() {
            // SAFETY: same buffers as above, now written
            let dst = unsafe { slice::from_raw_parts_mut(*params.add(k), o.lens[k]) };
            dst.copy_from_slice(t.data());
        }
        SrkitStatus::Ok
    })
}

/// Completed steps; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn srkit_optimizer_steps(opt: *const SrkitOptimizer) -> u64 {
    // SAFETY: null or a live handle
    unsafe { opt.as_ref() }.map_or(0, |o| o.inner.t())
}

#[no_mangle]
pub unsafe extern "C" fn srkit_optimizer_free(opt: *mut SrkitOptimizer) {
    if !opt.is_null() {
        // SAFETY: pointer came from srkit_optimizer_new and is freed once
        drop(unsafe { Box::from_raw(opt) });
    }
}

