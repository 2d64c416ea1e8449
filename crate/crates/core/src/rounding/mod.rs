//! BF16 representation, nearest and stochastic rounding from binary32.
//!
//! A [`Bf16`] is the upper half of a binary32 bit pattern. Widening is a
//! 16-bit left shift, so every operation here reduces to integer arithmetic on
//! the binary32 magnitude bits.
//!
//! Stochastic rounding is realized by dithering: a uniform 16-bit draw is
//! added to the low half of the magnitude pattern and the low half is then
//! dropped. Within a binade the magnitude bits are an affine function of the
//! value, so the carry happens with probability `(|x| - trunc) / spacing`,
//! which is exactly the two-point law `P(up) = (x - floor) / Δ`. The identity
//! also holds across binade and subnormal boundaries because the bit pattern
//! stays monotone there.

mod rng;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use rng::{Address, RoundRng};

use crate::error::{Error, Result};

const SIGN_MASK: u32 = 0x8000_0000;
const LOW_MASK: u32 = 0x0000_FFFF;
const HIGH_MASK: u32 = 0xFFFF_0000;

/// Brain float: sign, 8 exponent bits, 7 mantissa bits.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(transparent)]
pub struct Bf16(u16);

impl Bf16 {
    pub const ZERO: Bf16 = Bf16(0x0000);
    pub const ONE: Bf16 = Bf16(0x3F80);
    pub const INFINITY: Bf16 = Bf16(0x7F80);
    pub const NEG_INFINITY: Bf16 = Bf16(0xFF80);
    /// Largest finite value, `(2 - 2^-7) * 2^127`.
    pub const MAX: Bf16 = Bf16(0x7F7F);
    /// Smallest positive subnormal, `2^-133`.
    pub const MIN_POSITIVE_SUBNORMAL: Bf16 = Bf16(0x0001);

    pub const fn from_bits(bits: u16) -> Self {
        Bf16(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Widen to binary32 (lossless).
    pub fn to_f32(self) -> f32 {
        f32::from_bits((self.0 as u32) << 16)
    }

    /// Narrow `x` if it is exactly representable.
    pub fn narrow_exact(x: f32) -> Option<Self> {
        let bits = x.to_bits();
        (bits & LOW_MASK == 0).then_some(Bf16((bits >> 16) as u16))
    }

    pub fn is_nan(self) -> bool {
        self.0 & 0x7FFF > 0x7F80
    }

    pub fn is_finite(self) -> bool {
        self.0 & 0x7F80 != 0x7F80
    }

    /// Sign-magnitude pattern mapped onto a signed integer whose order matches
    /// the numeric order of finite values (`-0` and `+0` both map to 0).
    pub fn order_key(self) -> i32 {
        let mag = (self.0 & 0x7FFF) as i32;
        if self.0 & 0x8000 != 0 {
            -mag
        } else {
            mag
        }
    }
}

impl fmt::Debug for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bf16({:#06x} = {:e})", self.0, self.to_f32())
    }
}

impl fmt::Display for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

impl fmt::LowerHex for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerHex::fmt(&self.0, f)
    }
}

impl From<Bf16> for f32 {
    fn from(b: Bf16) -> f32 {
        b.to_f32()
    }
}

/// How nearest rounding resolves an exact midpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// IEEE default: the neighbor with an even mantissa.
    #[default]
    Even,
    /// `sign(x) * Δ * floor(|x|/Δ + 1/2)`: ties move away from zero.
    AwayFromZero,
}

/// Nearest rounding with ties to even.
pub fn round_nearest(x: f32) -> Bf16 {
    round_nearest_with(x, TieBreak::Even)
}

/// Nearest rounding with an explicit tie rule. `±∞` is preserved, NaN becomes
/// a quiet NaN with the input's sign, and magnitudes past the largest finite
/// midpoint overflow to `±∞`.
pub fn round_nearest_with(x: f32, tie: TieBreak) -> Bf16 {
    let bits = x.to_bits();
    if x.is_nan() {
        return Bf16(((bits >> 16) as u16) | 0x0040);
    }
    let bias = match tie {
        TieBreak::Even => 0x7FFF + ((bits >> 16) & 1),
        TieBreak::AwayFromZero => 0x8000,
    };
    // magnitude never exceeds 0x7F80_0000 here, so the add cannot reach the sign bit
    let sign = bits & SIGN_MASK;
    let mag = (bits & !SIGN_MASK) + bias;
    Bf16(((sign | mag) >> 16) as u16)
}

/// Stochastic rounding at `addr`. Non-finite inputs are rejected.
pub fn round_stochastic(x: f32, rng: &RoundRng, addr: Address) -> Result<Bf16> {
    if !x.is_finite() {
        return Err(Error::NonFinite {
            index: addr.index as usize,
            value: x,
        });
    }
    Ok(dither(x, rng.draw_u16(addr)))
}

/// The dithering kernel for a given 16-bit draw. A carry past the largest
/// finite value saturates at [`Bf16::MAX`] instead of producing infinity.
///
/// `x` must be finite.
pub fn dither(x: f32, draw: u16) -> Bf16 {
    debug_assert!(x.is_finite());
    let bits = x.to_bits();
    let sign = bits & SIGN_MASK;
    let mag = (bits & !SIGN_MASK) + draw as u32;
    let mut hi = mag >> 16;
    if hi >= 0x7F80 {
        hi = 0x7F7F;
    }
    Bf16(((sign >> 16) | hi) as u16)
}

/// Consecutive representable neighbors of a value and their spacing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantGrid {
    pub floor: f64,
    pub ceil: f64,
    pub resolution: f64,
}

impl QuantGrid {
    pub fn is_exact(&self) -> bool {
        self.floor == self.ceil
    }
}

/// Spacing of bf16 values in the binade holding magnitude pattern `mag`.
fn binade_spacing(mag: u32) -> f64 {
    let exp = (mag >> 23) as i32;
    // subnormals share the spacing of the lowest normal binade
    let e = exp.max(1) - 127 - 7;
    2f64.powi(e)
}

/// Grid neighbors of `x`. For representable `x`, `floor == ceil == x` and the
/// resolution is the spacing of the binade containing `x`.
pub fn quant_grid(x: f32) -> Result<QuantGrid> {
    if !x.is_finite() {
        return Err(Error::NonFinite { index: 0, value: x });
    }
    let bits = x.to_bits();
    let mag = bits & !SIGN_MASK;
    let spacing = binade_spacing(mag);
    if mag & LOW_MASK == 0 {
        let v = x as f64;
        return Ok(QuantGrid {
            floor: v,
            ceil: v,
            resolution: spacing,
        });
    }
    let toward_zero = f32::from_bits(mag & HIGH_MASK) as f64;
    // next magnitude may sit one binade up (or past f32 range); spacing of the
    // lower binade still gives the right gap
    let away = toward_zero + binade_spacing(mag & HIGH_MASK);
    let (floor, ceil) = if bits & SIGN_MASK == 0 {
        (toward_zero, away)
    } else {
        (-away, -toward_zero)
    };
    Ok(QuantGrid {
        floor,
        ceil,
        resolution: ceil - floor,
    })
}

/// `(x - floor) / Δ`, the probability that stochastic rounding moves toward
/// `+∞`. Zero for representable values; NaN for non-finite input.
pub fn sr_up_probability(x: f32) -> f64 {
    match quant_grid(x) {
        Ok(g) if g.is_exact() => 0.0,
        Ok(g) => (x as f64 - g.floor) / g.resolution,
        Err(_) => f64::NAN,
    }
}

/// Grid spacing next to a representable `x` in the direction of `sign`
/// (`> 0` toward `+∞`). Differs from the binade spacing only when `x` is a
/// power of two and the step goes toward zero.
pub fn directional_resolution(x: f32, sign: f64) -> f64 {
    let mag = x.to_bits() & !SIGN_MASK;
    let toward_zero = (sign > 0.0) == x.is_sign_negative() && mag != 0;
    if toward_zero {
        binade_spacing(mag - 0x1_0000)
    } else {
        binade_spacing(mag)
    }
}
