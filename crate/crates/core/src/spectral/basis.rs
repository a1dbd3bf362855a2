use alloc::vec::Vec;

use super::{FourierTable, TorusPoint, VectorEval, VectorTrigPoly, WaveVector};
use crate::error::{invalid, Result};
#[allow(unused_imports)]
use crate::Float;

/// Which of the two fields attached to a wave vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Parity {
    /// `(k₂, −k₁) cos k·θ`
    A,
    /// `(k₂, −k₁) sin k·θ`
    B,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseMode {
    pub k: WaveVector,
    pub parity: Parity,
    pub weight: f64,
}

impl NoiseMode {
    pub fn field(&self) -> VectorTrigPoly {
        let base = match self.parity {
            Parity::A => VectorTrigPoly::a_mode(self.k),
            Parity::B => VectorTrigPoly::b_mode(self.k),
        };
        base.scale(self.weight)
    }

    /// Value at the point whose phases are tabulated.
    #[inline]
    pub fn value(&self, table: &FourierTable) -> [f64; 2] {
        let z = table.phase(self.k.k1 as u32, self.k.k2);
        let s = match self.parity {
            Parity::A => z.re,
            Parity::B => z.im,
        } * self.weight;
        let p = self.k.perp();
        [s * p[0], s * p[1]]
    }
}

/// Weighted divergence-free fields `σ_i` realizing `σ(x)σ*(x) = c·Id`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBasis {
    pub cutoff: u32,
    pub decay: f64,
    /// The constant `c` in `Σ_i σ_i ⊗ σ_i = c·Id`.
    pub normalization: f64,
    pub modes: Vec<NoiseMode>,
}

impl NoiseBasis {
    /// Modes `A_k`, `B_k` for every canonical `0 < |k|∞ ≤ cutoff`, weighted by
    /// `|k|^(−decay)` and rescaled so that `Σ σ_i ⊗ σ_i = Id`.
    pub fn build(cutoff: u32, decay: f64) -> Result<Self> {
        if cutoff == 0 {
            return Err(invalid("cutoff", "must be at least 1"));
        }
        if !(decay >= 0.0) || !decay.is_finite() {
            return Err(invalid("decay", "must be finite and nonnegative"));
        }
        let k_max = cutoff as i32;
        let mut waves = Vec::new();
        for k1 in 0..=k_max {
            for k2 in -k_max..=k_max {
                let k = WaveVector::new(k1, k2);
                if !k.is_zero() && k.is_canonical() {
                    waves.push(k);
                }
            }
        }
        // Σ over canonical k of λ² k⊥ k⊥ᵀ is (S/2)·Id by the symmetries of the mode set.
        let trace: f64 = waves.iter().map(|k| k.norm_sq().powf(-decay) * k.norm_sq()).sum();
        let rescale = (2.0 / trace).sqrt();
        let mut modes = Vec::with_capacity(2 * waves.len());
        for k in waves {
            let weight = rescale * k.norm_sq().powf(-0.5 * decay);
            modes.push(NoiseMode { k, parity: Parity::A, weight });
            modes.push(NoiseMode { k, parity: Parity::B, weight });
        }
        Ok(Self { cutoff, decay, normalization: 1.0, modes })
    }

    /// No noise at all: the flow is the ODE flow of the drift.
    pub fn empty() -> Self {
        Self { cutoff: 0, decay: 0.0, normalization: 0.0, modes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.modes.iter().map(|m| m.k.sup_norm()).max().unwrap_or(0)
    }

    pub fn fields(&self) -> Vec<VectorTrigPoly> {
        self.modes.iter().map(NoiseMode::field).collect()
    }

    /// `Σ_i w_i σ_i` for a vector of increments `w`.
    pub fn combine(&self, increments: &[f64]) -> VectorTrigPoly {
        let mut out = VectorTrigPoly::zero();
        for (m, &w) in self.modes.iter().zip(increments) {
            let p = m.k.perp();
            let s = m.weight * w;
            let (c, sn) = match m.parity {
                Parity::A => ([s * p[0], s * p[1]], [0.0; 2]),
                Parity::B => ([0.0; 2], [s * p[0], s * p[1]]),
            };
            out.u1.add_term(m.k, c[0], sn[0]);
            out.u2.add_term(m.k, c[1], sn[1]);
        }
        out
    }

    /// Compiled `Σ_i w_i σ_i`.
    pub fn combine_compiled(&self, increments: &[f64]) -> VectorEval {
        self.combine(increments).compile()
    }

    /// Stable 64-bit fingerprint of the mode list.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        h.u64(u64::from(self.cutoff));
        h.u64(self.decay.to_bits());
        for m in &self.modes {
            h.u64(m.k.k1 as u64);
            h.u64(m.k.k2 as u64);
            h.u64(matches!(m.parity, Parity::B) as u64);
            h.u64(m.weight.to_bits());
        }
        h.0
    }
}

#[derive(Clone, Copy)]
pub(crate) struct Fnv(pub u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub(crate) fn u64(&mut self, x: u64) {
        for b in x.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// Residuals of the structural conditions on a noise family.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureReport {
    pub points: usize,
    /// `max_i max_p |div σ_i(p)|`
    pub max_divergence: f64,
    /// `max_p ‖Σ σ_i(p) ⊗ σ_i(p) − c·Id‖_max`
    pub max_covariance_deviation: f64,
    /// `max_p |Σ_i (σ_i·∇)σ_i (p)|`
    pub max_self_advection: f64,
    pub tolerance: f64,
}

impl StructureReport {
    pub const TOLERANCE: f64 = 1e-10;

    pub fn passed(&self) -> bool {
        self.max_divergence <= self.tolerance
            && self.max_covariance_deviation <= self.tolerance
            && self.max_self_advection <= self.tolerance
    }
}

/// Checks divergence, covariance and self-advection of arbitrary fields at `points`.
pub fn check_structure_fields(fields: &[VectorTrigPoly], normalization: f64, points: &[TorusPoint]) -> StructureReport {
    let divs: Vec<_> = fields.iter().map(|f| f.divergence().compile()).collect();
    let vals: Vec<_> = fields.iter().map(VectorTrigPoly::compile).collect();
    let mut advection = VectorTrigPoly::zero();
    for f in fields {
        advection = advection.add(&f.advect(f));
    }
    let advection = advection.compile();
    let degree = fields.iter().map(|f| 2 * f.degree()).max().unwrap_or(0);
    let mut table = FourierTable::new(degree);
    let (mut div_max, mut cov_max, mut adv_max) = (0.0f64, 0.0f64, 0.0f64);
    for &p in points {
        table.fill(p);
        let mut cov = [[0.0; 2]; 2];
        for (d, v) in divs.iter().zip(&vals) {
            div_max = div_max.max(d.eval(&table).abs());
            let s = v.eval(&table);
            for a in 0..2 {
                for b in 0..2 {
                    cov[a][b] += s[a] * s[b];
                }
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                let target = if a == b { normalization } else { 0.0 };
                cov_max = cov_max.max((cov[a][b] - target).abs());
            }
        }
        let adv = advection.eval(&table);
        adv_max = adv_max.max(adv[0].hypot(adv[1]));
    }
    StructureReport {
        points: points.len(),
        max_divergence: div_max,
        max_covariance_deviation: cov_max,
        max_self_advection: adv_max,
        tolerance: StructureReport::TOLERANCE,
    }
}

pub fn check_structure(basis: &NoiseBasis, points: &[TorusPoint]) -> StructureReport {
    check_structure_fields(&basis.fields(), basis.normalization, points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{uniform_grid, TrigPoly};

    #[test]
    fn cutoff_one_has_eight_fields() {
        let b = NoiseBasis::build(1, 2.0).unwrap();
        let ks: Vec<_> = b.modes.iter().map(|m| (m.k.k1, m.k.k2)).collect();
        assert_eq!(b.len(), 8);
        for k in [(1, 0), (0, 1), (1, 1), (1, -1)] {
            assert_eq!(ks.iter().filter(|&&x| x == k).count(), 2);
        }
    }

    #[test]
    fn rejects_zero_cutoff() {
        assert!(NoiseBasis::build(0, 2.0).is_err());
    }

    #[test]
    fn a_mode_matches_closed_form() {
        // A_(1,0)(θ) = (0, −1) cos θ₁
        let a = VectorTrigPoly::a_mode(WaveVector::new(1, 0));
        let p = TorusPoint::new(0.7, 2.1);
        let v = a.eval(p);
        assert_eq!(v[0], 0.0);
        assert!((v[1] + 0.7f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn structure_holds_and_negative_control_fails() {
        let b = NoiseBasis::build(2, 2.0).unwrap();
        let pts = uniform_grid(9);
        assert!(check_structure(&b, &pts).passed());

        let mut fields = b.fields();
        fields[3] = TrigPoly::cos(1, 1).gradient();
        let r = check_structure_fields(&fields, 1.0, &pts);
        assert!(r.max_divergence > 0.1);
        assert!(!r.passed());
    }

    #[test]
    fn pair_self_advection_vanishes_symbolically() {
        let k = WaveVector::new(2, -1);
        let a = VectorTrigPoly::a_mode(k);
        let b = VectorTrigPoly::b_mode(k);
        let s = a.advect(&a).add(&b.advect(&b));
        assert!(s.u1.pruned(1e-15).is_zero() && s.u2.pruned(1e-15).is_zero());
    }
}
