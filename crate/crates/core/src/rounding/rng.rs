//! Counter-addressed random source.
//!
//! Every draw is a pure function of `(seed, stream, step, index)`: a
//! Philox4x32-10 block keyed by a mix of the seed and stream id, with the
//! 128-bit counter holding `(index, step)`. Nothing is sequenced, so replicas
//! and worker threads reproduce the same values in any order.

use serde::{Deserialize, Serialize};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;
const PHILOX_ROUNDS: usize = 10;

/// Location of one draw in the random space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Address {
    pub stream: u64,
    pub step: u64,
    pub index: u64,
}

impl Address {
    pub const fn new(stream: u64, step: u64, index: u64) -> Self {
        Self {
            stream,
            step,
            index,
        }
    }

    pub const fn with_index(self, index: u64) -> Self {
        Self { index, ..self }
    }
}

/// Stateless keyed generator. Cheap to copy and share across threads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoundRng {
    seed: u64,
}

impl RoundRng {
    pub const fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub const fn seed(&self) -> u64 {
        self.seed
    }

    /// Raw 128-bit block at `addr`.
    pub fn block(&self, addr: Address) -> [u32; 4] {
        let key = mix64(self.seed ^ mix64(addr.stream.wrapping_add(0x6A09_E667_F3BC_C909)));
        let counter = [
            addr.index as u32,
            (addr.index >> 32) as u32,
            addr.step as u32,
            (addr.step >> 32) as u32,
        ];
        philox4x32(counter, [key as u32, (key >> 32) as u32])
    }

    pub fn draw_u16(&self, addr: Address) -> u16 {
        self.block(addr)[0] as u16
    }

    pub fn draw_u32(&self, addr: Address) -> u32 {
        self.block(addr)[0]
    }

    pub fn draw_u64(&self, addr: Address) -> u64 {
        let b = self.block(addr);
        (b[0] as u64) | ((b[1] as u64) << 32)
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&self, addr: Address) -> f64 {
        (self.draw_u64(addr) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller over the two halves of one block.
    pub fn normal(&self, addr: Address) -> f64 {
        let b = self.block(addr);
        let hi = ((b[0] as u64) | ((b[1] as u64) << 32)) >> 11;
        let lo = ((b[2] as u64) | ((b[3] as u64) << 32)) >> 11;
        let scale = 1.0 / (1u64 << 53) as f64;
        // shift into (0, 1] so the log is finite
        let u1 = (hi as f64 + 1.0) * scale;
        let u2 = lo as f64 * scale;
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)`; `n` must be nonzero.
    pub fn below(&self, addr: Address, n: u64) -> u64 {
        debug_assert!(n > 0);
        // 128-bit multiply-shift; bias is below 2^-64 * n
        ((self.draw_u64(addr) as u128 * n as u128) >> 64) as u64
    }
}

/// splitmix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = a as u64 * b as u64;
    ((p >> 32) as u32, p as u32)
}

#[inline]
pub(crate) fn philox4x32(mut ctr: [u32; 4], mut key: [u32; 2]) -> [u32; 4] {
    for round in 0..PHILOX_ROUNDS {
        if round > 0 {
            key[0] = key[0].wrapping_add(PHILOX_W0);
            key[1] = key[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0];
    }
    ctr
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors from the Random123 distribution.
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32([0; 4], [0; 2]),
            [0x6627_e8d5, 0xe169_c58d, 0xbc57_ac4c, 0x9b00_dbd8]
        );
        assert_eq!(
            philox4x32([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f_276d, 0x41c8_3b0e, 0xa20b_c7c6, 0x6d54_51fd]
        );
        assert_eq!(
            philox4x32(
                [0x243f_6a88, 0x85a3_08d3, 0x1319_8a2e, 0x0370_7344],
                [0xa409_3822, 0x299f_31d0]
            ),
            [0xd16c_fe09, 0x94fd_cceb, 0x5001_e420, 0x2412_6ea1]
        );
    }

    #[test]
    fn draws_are_pure_functions_of_address() {
        let rng = RoundRng::new(42);
        let a = Address::new(3, 17, 123_456);
        assert_eq!(rng.draw_u16(a), rng.draw_u16(a));
        assert_eq!(rng.block(a), RoundRng::new(42).block(a));
        assert_ne!(rng.block(a), rng.block(a.with_index(123_457)));
        assert_ne!(rng.block(a), rng.block(Address::new(4, 17, 123_456)));
        assert_ne!(rng.block(a), RoundRng::new(43).block(a));
    }

    #[test]
    fn uniform_stays_in_unit_interval() {
        let rng = RoundRng::new(7);
        for i in 0..10_000 {
            let u = rng.uniform(Address::new(0, 0, i));
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn below_respects_bound() {
        let rng = RoundRng::new(9);
        let mut seen = [false; 5];
        for i in 0..1000 {
            let k = rng.below(Address::new(1, 2, i), 5) as usize;
            seen[k] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn normal_has_unit_moments() {
        let rng = RoundRng::new(11);
        let n = 200_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for i in 0..n {
            let z = rng.normal(Address::new(5, 0, i));
            s += z;
            s2 += z * z;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
