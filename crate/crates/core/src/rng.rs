//! Counter-based random numbers.
//!
//! Every random quantity in the crate is a pure function of a coordinate
//! `(seed, stream, replica, index)` evaluated with Philox4x32-10, so results do
//! not depend on how work is scheduled across threads.

use crate::TAU;
#[allow(unused_imports)]
use crate::Float;

const MUL0: u32 = 0xD251_1F53;
const MUL1: u32 = 0xCD9E_8D57;
const WEYL0: u32 = 0x9E37_79B9;
const WEYL1: u32 = 0xBB67_AE85;

#[inline]
fn round(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let p0 = u64::from(MUL0) * u64::from(ctr[0]);
    let p1 = u64::from(MUL1) * u64::from(ctr[2]);
    [
        ((p1 >> 32) as u32) ^ ctr[1] ^ key[0],
        p1 as u32,
        ((p0 >> 32) as u32) ^ ctr[3] ^ key[1],
        p0 as u32,
    ]
}

/// The Philox4x32 bijection with 10 rounds.
pub fn philox4x32_10(mut ctr: [u32; 4], mut key: [u32; 2]) -> [u32; 4] {
    for r in 0..10 {
        if r > 0 {
            key[0] = key[0].wrapping_add(WEYL0);
            key[1] = key[1].wrapping_add(WEYL1);
        }
        ctr = round(ctr, key);
    }
    ctr
}

/// Independent sub-streams drawn from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Stream {
    /// Brownian increments of the noise modes.
    Noise = 0,
    /// Per-replica coin flips for randomized mixtures.
    Coin = 1,
    /// Perturbation directions of the stochastic optimizer.
    Perturbation = 2,
    /// Signs of the rough-drift fixture coefficients.
    Signs = 3,
    /// Free stream for fixtures and property tests.
    Auxiliary = 4,
}

/// A keyed, stateless source of random numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: [u32; 2],
    stream: u32,
    replica: u32,
}

impl CounterRng {
    pub fn new(seed: u64, stream: Stream, replica: u32) -> Self {
        Self { key: [seed as u32, (seed >> 32) as u32], stream: stream as u32, replica }
    }

    /// Four raw 32-bit words at `index`.
    #[inline]
    pub fn block(&self, index: u64) -> [u32; 4] {
        philox4x32_10([index as u32, (index >> 32) as u32, self.replica, self.stream], self.key)
    }

    /// Two uniforms in `(0, 1]` with 53 bits of precision.
    #[inline]
    pub fn uniform_pair(&self, index: u64) -> [f64; 2] {
        let w = self.block(index);
        let a = (u64::from(w[0]) << 32 | u64::from(w[1])) >> 11;
        let b = (u64::from(w[2]) << 32 | u64::from(w[3])) >> 11;
        let scale = 1.0 / (1u64 << 53) as f64;
        [(a + 1) as f64 * scale, (b + 1) as f64 * scale]
    }

    /// Two independent standard normals (Box–Muller).
    #[inline]
    pub fn normal_pair(&self, index: u64) -> [f64; 2] {
        let [u1, u2] = self.uniform_pair(index);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (TAU * u2).sin_cos();
        [r * c, r * s]
    }

    /// A fair `±1`.
    #[inline]
    pub fn sign(&self, index: u64) -> f64 {
        if self.block(index)[0] & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// A fair coin.
    #[inline]
    pub fn coin(&self, index: u64) -> bool {
        self.block(index)[1] >> 31 == 1
    }
}

/// Brownian increments for a fixed set of noise modes of one replica.
///
/// The path is defined on a base grid of step `dt / substeps`; an increment of
/// step `n` at step size `dt` is the sum of `substeps` base increments. Running
/// at `dt` with `substeps = 2` and at `dt / 2` with `substeps = 1` therefore
/// drives both runs with the same Brownian path.
#[derive(Debug, Clone, Copy)]
pub struct BrownianIncrements {
    rng: CounterRng,
    modes: usize,
    substeps: u32,
    base_sd: f64,
}

impl BrownianIncrements {
    pub fn new(seed: u64, replica: u32, modes: usize, dt: f64, substeps: u32) -> Self {
        let substeps = substeps.max(1);
        Self {
            rng: CounterRng::new(seed, Stream::Noise, replica),
            modes,
            substeps,
            base_sd: (dt / f64::from(substeps)).sqrt(),
        }
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    /// Standard normal of `mode` at base step `base_step`.
    #[inline]
    fn base_normal(&self, base_step: u64, mode: usize) -> f64 {
        let pairs = (self.modes as u64).div_ceil(2);
        let pair = self.rng.normal_pair(base_step * pairs + (mode / 2) as u64);
        pair[mode % 2]
    }

    /// Fills `out[mode]` with the increments of step `step`.
    pub fn fill(&self, step: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.modes);
        out.iter_mut().for_each(|x| *x = 0.0);
        let pairs = self.modes.div_ceil(2);
        for sub in 0..u64::from(self.substeps) {
            let base = step as u64 * u64::from(self.substeps) + sub;
            for p in 0..pairs {
                let z = self.rng.normal_pair(base * pairs as u64 + p as u64);
                out[2 * p] += self.base_sd * z[0];
                if 2 * p + 1 < self.modes {
                    out[2 * p + 1] += self.base_sd * z[1];
                }
            }
        }
    }

    /// Increment of a single mode, equal to the corresponding entry of [`fill`](Self::fill).
    pub fn increment(&self, step: usize, mode: usize) -> f64 {
        (0..u64::from(self.substeps))
            .map(|sub| self.base_sd * self.base_normal(step as u64 * u64::from(self.substeps) + sub, mode))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    // Known-answer vectors published with the Random123 library.
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32_10([0, 0, 0, 0], [0, 0]),
            [0x6627_e8d5, 0xe169_c58d, 0xbc57_ac4c, 0x9b00_dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f_276d, 0x41c8_3b0e, 0xa20b_c7c6, 0x6d54_51fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f_6a88, 0x85a3_08d3, 0x1319_8a2e, 0x0370_7344],
                [0xa409_3822, 0x299f_31d0]
            ),
            [0xd16c_fe09, 0x94fd_cceb, 0x5001_e420, 0x2412_6ea1]
        );
    }

    #[test]
    fn normals_have_unit_moments() {
        let rng = CounterRng::new(7, Stream::Auxiliary, 3);
        let n = 20_000u64;
        let (mut s1, mut s2) = (0.0, 0.0);
        for i in 0..n {
            for z in rng.normal_pair(i) {
                s1 += z;
                s2 += z * z;
            }
        }
        let m = s1 / (2 * n) as f64;
        let v = s2 / (2 * n) as f64 - m * m;
        assert!(m.abs() < 4.0 / ((2 * n) as f64).sqrt());
        assert!((v - 1.0).abs() < 0.03);
    }

    #[test]
    fn coarse_increments_are_sums_of_fine_ones() {
        let coarse = BrownianIncrements::new(11, 2, 5, 0.02, 2);
        let fine = BrownianIncrements::new(11, 2, 5, 0.01, 1);
        let mut c = vec![0.0; 5];
        let mut f0 = vec![0.0; 5];
        let mut f1 = vec![0.0; 5];
        coarse.fill(3, &mut c);
        fine.fill(6, &mut f0);
        fine.fill(7, &mut f1);
        for m in 0..5 {
            assert!((c[m] - f0[m] - f1[m]).abs() < 1e-15);
            assert!((coarse.increment(3, m) - c[m]).abs() < 1e-15);
        }
    }

    #[test]
    fn replicas_and_streams_are_distinct() {
        let a = CounterRng::new(1, Stream::Noise, 0).block(0);
        let b = CounterRng::new(1, Stream::Noise, 1).block(0);
        let c = CounterRng::new(1, Stream::Coin, 0).block(0);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
