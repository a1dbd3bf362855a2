//! Time-dependent divergence-free drifts `b(t, x)`.
//!
//! A [`SpectralField`] is piecewise constant in time: bin `i` covers
//! `[t_i, t_{i+1})` (the last bin also owns `t = T`) and carries a divergence-free
//! [`VectorTrigPoly`]. This makes the kinetic energy exact through Parseval.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::rng::{CounterRng, Stream};
use crate::spectral::{VectorEval, VectorTrigPoly, WaveVector};
#[allow(unused_imports)]
use crate::Float;

/// Maximum tolerated `Σ |ĉ_k|` of the divergence of a drift bin.
pub const DIVERGENCE_TOLERANCE: f64 = 1e-10;

/// Kinetic energy `½ ∫₀ᵀ ∫ ‖b‖² dx dt`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct EnergyValue(pub f64);

impl EnergyValue {
    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeBin {
    pub t_start: f64,
    pub t_end: f64,
    pub field: VectorTrigPoly,
}

impl TimeBin {
    pub fn width(&self) -> f64 {
        self.t_end - self.t_start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    horizon: f64,
    bins: Vec<TimeBin>,
}

impl SpectralField {
    /// Validates that the bins tile `[0, T]` and that every field is divergence-free.
    pub fn new(horizon: f64, bins: Vec<TimeBin>) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(invalid("horizon", "must be positive and finite"));
        }
        if bins.is_empty() {
            return Err(invalid("bins", "at least one time bin is required"));
        }
        let tol = 1e-12 * horizon.max(1.0);
        if bins[0].t_start.abs() > tol || (bins[bins.len() - 1].t_end - horizon).abs() > tol {
            return Err(invalid("bins", "time bins must start at 0 and end at the horizon"));
        }
        for w in bins.windows(2) {
            if (w[0].t_end - w[1].t_start).abs() > tol {
                return Err(invalid("bins", "time bins must be contiguous"));
            }
        }
        for (i, b) in bins.iter().enumerate() {
            if !(b.width() > 0.0) {
                return Err(invalid("bins", alloc::format!("bin {i} has nonpositive width")));
            }
            let div = b.field.divergence().abs_sum();
            if div > DIVERGENCE_TOLERANCE {
                return Err(invalid("bins", alloc::format!("bin {i} has divergence of size {div:e}")));
            }
        }
        Ok(Self { horizon, bins })
    }

    pub fn constant_in_time(field: VectorTrigPoly, horizon: f64) -> Result<Self> {
        Self::new(horizon, alloc::vec![TimeBin { t_start: 0.0, t_end: horizon, field }])
    }

    /// Equal-width bins carrying `fields` in order.
    pub fn uniform(horizon: f64, fields: Vec<VectorTrigPoly>) -> Result<Self> {
        let n = fields.len().max(1) as f64;
        let bins = fields
            .into_iter()
            .enumerate()
            .map(|(i, field)| TimeBin {
                t_start: horizon * i as f64 / n,
                t_end: horizon * (i + 1) as f64 / n,
                field,
            })
            .collect();
        Self::new(horizon, bins)
    }

    pub fn zero(horizon: f64) -> Result<Self> {
        Self::constant_in_time(VectorTrigPoly::zero(), horizon)
    }

    /// Spatially constant drift `c` on `[0, T]`.
    pub fn constant(c: [f64; 2], horizon: f64) -> Result<Self> {
        Self::constant_in_time(VectorTrigPoly::constant(c), horizon)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn bins(&self) -> &[TimeBin] {
        &self.bins
    }

    pub fn degree(&self) -> u32 {
        self.bins.iter().map(|b| b.field.degree()).max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.bins.iter().all(|b| b.field.is_zero())
    }

    /// Index of the bin containing `t`; times at or past `T` map to the last bin.
    pub fn bin_index(&self, t: f64) -> usize {
        let slack = 1e-12 * self.horizon.max(1.0);
        let pos = self.bins.partition_point(|b| b.t_start <= t + slack);
        pos.saturating_sub(1).min(self.bins.len() - 1)
    }

    pub fn field_at(&self, t: f64) -> &VectorTrigPoly {
        &self.bins[self.bin_index(t)].field
    }

    pub fn eval(&self, t: f64, p: crate::spectral::TorusPoint) -> [f64; 2] {
        self.field_at(t).eval(p)
    }

    pub fn compile(&self) -> CompiledDrift {
        CompiledDrift {
            field: self.clone(),
            evals: self.bins.iter().map(|b| b.field.compile()).collect(),
        }
    }

    pub fn map_fields(&self, mut f: impl FnMut(&VectorTrigPoly) -> VectorTrigPoly) -> Self {
        let bins = self
            .bins
            .iter()
            .map(|b| TimeBin { t_start: b.t_start, t_end: b.t_end, field: f(&b.field) })
            .collect();
        Self { horizon: self.horizon, bins }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map_fields(|v| v.scale(s))
    }

    /// Stable 64-bit fingerprint of the bins and coefficients.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::spectral::Fnv::default();
        h.u64(self.horizon.to_bits());
        for b in &self.bins {
            h.u64(b.t_start.to_bits());
            h.u64(b.t_end.to_bits());
            for poly in [&b.field.u1, &b.field.u2] {
                for (k, [a, s]) in poly.terms() {
                    h.u64(k.k1 as u64);
                    h.u64(k.k2 as u64);
                    h.u64(a.to_bits());
                    h.u64(s.to_bits());
                }
            }
        }
        h.0
    }
}

/// A [`SpectralField`] with every bin flattened for evaluation.
#[derive(Debug, Clone)]
pub struct CompiledDrift {
    field: SpectralField,
    evals: Vec<VectorEval>,
}

impl CompiledDrift {
    #[inline]
    pub fn at(&self, t: f64) -> &VectorEval {
        &self.evals[self.field.bin_index(t)]
    }

    pub fn degree(&self) -> u32 {
        self.field.degree()
    }

    pub fn field(&self) -> &SpectralField {
        &self.field
    }
}

/// Projects every Fourier mode onto the orthogonal complement of its wave vector.
pub fn leray_project(v: &VectorTrigPoly) -> VectorTrigPoly {
    v.map_modes(|k, c, s| {
        if k.is_zero() {
            return (c, s);
        }
        let kv = k.as_f64();
        let n2 = k.norm_sq();
        let proj = |u: [f64; 2]| {
            let d = (u[0] * kv[0] + u[1] * kv[1]) / n2;
            [u[0] - d * kv[0], u[1] - d * kv[1]]
        };
        (proj(c), proj(s))
    })
    .prune_exact()
}

trait PruneExact {
    fn prune_exact(self) -> Self;
}

impl PruneExact for VectorTrigPoly {
    fn prune_exact(self) -> Self {
        VectorTrigPoly::new(self.u1.pruned(0.0), self.u2.pruned(0.0))
    }
}

/// Heat semigroup on 1-forms: mode `k` multiplied by `e^{−ε|k|²}`.
///
/// On the flat torus the Hodge Laplacian acts componentwise, so this commutes
/// with [`leray_project`] and preserves divergence-freeness.
pub fn hodge_regularize(b: &SpectralField, eps: f64) -> Result<SpectralField> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(invalid("eps", "must be finite and nonnegative"));
    }
    Ok(b.map_fields(|v| heat_multiplier(v, eps)))
}

pub(crate) fn heat_multiplier(v: &VectorTrigPoly, eps: f64) -> VectorTrigPoly {
    v.map_modes(|k, c, s| {
        let m = (-eps * k.norm_sq()).exp();
        ([m * c[0], m * c[1]], [m * s[0], m * s[1]])
    })
}

/// Exact kinetic energy `½ Σ_bins width · ‖b_bin‖²_{L²}`.
pub fn drift_energy(b: &SpectralField) -> EnergyValue {
    EnergyValue(0.5 * b.bins.iter().map(|bin| bin.width() * bin.field.l2_norm_sq()).sum::<f64>())
}

/// Space-time `L²([0,T] × T²)` distance between two drifts on the same horizon.
pub fn l2_distance(a: &SpectralField, b: &SpectralField) -> f64 {
    let mut cuts: Vec<f64> = a.bins.iter().chain(b.bins.iter()).flat_map(|x| [x.t_start, x.t_end]).collect();
    cuts.sort_by(|x, y| x.partial_cmp(y).unwrap_or(core::cmp::Ordering::Equal));
    cuts.dedup_by(|x, y| (*x - *y).abs() <= 1e-14);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 - t0 <= 0.0 {
            continue;
        }
        let mid = 0.5 * (t0 + t1);
        let d = a.field_at(mid).sub(b.field_at(mid));
        total += (t1 - t0) * d.l2_norm_sq();
    }
    total.sqrt()
}

/// Gauss–Legendre nodes and weights on `[−1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = alloc::vec![0.0; n];
    let mut weights = alloc::vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (core::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Smooth normalized bump `∝ exp(−1/(1 − (2s/ε)²))` supported on `(−ε/2, ε/2)`.
#[derive(Debug, Clone)]
pub struct Mollifier {
    width: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    norm: f64,
}

impl Mollifier {
    pub const QUADRATURE_POINTS: usize = 64;

    pub fn new(width: f64) -> Self {
        let (nodes, weights) = gauss_legendre(Self::QUADRATURE_POINTS);
        let mut m = Self { width, nodes, weights, norm: 1.0 };
        m.norm = m.raw_integral(-0.5 * width, 0.5 * width);
        m
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    fn raw(&self, s: f64) -> f64 {
        let u = 2.0 * s / self.width;
        if u.abs() >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - u * u)).exp()
        }
    }

    fn raw_integral(&self, a: f64, b: f64) -> f64 {
        let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
        h * self.nodes.iter().zip(&self.weights).map(|(x, w)| w * self.raw(c + h * x)).sum::<f64>()
    }

    /// Kernel density.
    pub fn density(&self, s: f64) -> f64 {
        self.raw(s) / self.norm
    }

    /// `∫_{−∞}^{s} ρ`.
    pub fn cdf(&self, s: f64) -> f64 {
        let half = 0.5 * self.width;
        if s <= -half {
            0.0
        } else if s >= half {
            1.0
        } else {
            self.raw_integral(-half, s) / self.norm
        }
    }

    /// `(1/|I|) ∫_I ∫_{J} ρ(t − s) ds dt`: average over `t ∈ I` of the kernel mass landing in `J`.
    fn transfer(&self, i: (f64, f64), j: (f64, f64)) -> f64 {
        let half = 0.5 * self.width;
        // Fully outside the kernel's reach.
        if i.0 - j.1 >= half || j.0 - i.1 >= half {
            return 0.0;
        }
        // Fully inside: every t ∈ I sees the whole kernel inside J.
        if i.0 - j.0 >= half && j.1 - i.1 >= half {
            return 1.0;
        }
        let (c, h) = (0.5 * (i.0 + i.1), 0.5 * (i.1 - i.0));
        0.5 * self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| {
                let t = c + h * x;
                w * (self.cdf(t - j.0) - self.cdf(t - j.1))
            })
            .sum::<f64>()
    }
}

/// Convolves every mode in time against the bump of support `ε`, with `b` extended
/// by zero outside `[0, T]`. The result is resampled as exact cell averages on a
/// uniform grid of step at most `ε/8` (never coarser than the input grid).
pub fn time_mollify(b: &SpectralField, eps: f64) -> Result<SpectralField> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(invalid("eps", "must be positive and finite"));
    }
    let horizon = b.horizon;
    let n_out = b.bins.len().max(num_traits::Float::ceil(8.0 * horizon / eps) as usize);
    let kernel = Mollifier::new(eps);
    let mut bins = Vec::with_capacity(n_out);
    for r in 0..n_out {
        let u = horizon * r as f64 / n_out as f64;
        let v = horizon * (r + 1) as f64 / n_out as f64;
        let mut field = VectorTrigPoly::zero();
        for bin in &b.bins {
            let w = kernel.transfer((u, v), (bin.t_start, bin.t_end));
            if w != 0.0 {
                field = field.add(&bin.field.scale(w));
            }
        }
        bins.push(TimeBin { t_start: u, t_end: v, field });
    }
    SpectralField::new(horizon, bins)
}

/// The regularization used for prescribed-drift flows: heat semigroup at `ε`
/// followed by time mollification of width `ε`.
pub fn regularize(b: &SpectralField, eps: f64) -> Result<SpectralField> {
    time_mollify(&hodge_regularize(b, eps)?, eps)
}

/// Rough drift fixture: independent per time bin, coefficients `amplitude·|k|⁻¹`
/// with pseudorandom signs for `0 < |k|∞ ≤ cutoff`, Leray-projected.
pub fn rough_drift(horizon: f64, bins: usize, cutoff: u32, amplitude: f64, seed: u64) -> Result<SpectralField> {
    if bins == 0 {
        return Err(invalid("bins", "must be positive"));
    }
    let kmax = cutoff as i32;
    let fields = (0..bins)
        .map(|bin| {
            let rng = CounterRng::new(seed, Stream::Signs, bin as u32);
            let mut v = VectorTrigPoly::zero();
            let mut idx = 0u64;
            for k1 in 0..=kmax {
                for k2 in -kmax..=kmax {
                    let k = WaveVector::new(k1, k2);
                    if k.is_zero() || !k.is_canonical() {
                        continue;
                    }
                    let lam = amplitude / k.norm_sq().sqrt();
                    let mut s = [0.0; 4];
                    for x in s.iter_mut() {
                        *x = lam * rng.sign(idx);
                        idx += 1;
                    }
                    v = v.add(&VectorTrigPoly::mode(k, [s[0], s[1]], [s[2], s[3]]));
                }
            }
            leray_project(&v)
        })
        .collect();
    SpectralField::uniform(horizon, fields)
}

impl From<EnergyValue> for f64 {
    fn from(e: EnergyValue) -> f64 {
        e.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{TorusPoint, TrigPoly};

    fn a10() -> VectorTrigPoly {
        VectorTrigPoly::a_mode(WaveVector::new(1, 0))
    }

    #[test]
    fn leray_keeps_divergence_free_and_kills_gradients() {
        let v = VectorTrigPoly::new(TrigPoly::cos(0, 1), TrigPoly::cos(1, 0));
        assert_eq!(leray_project(&v), v);
        let g = (&TrigPoly::cos(2, 1) + &TrigPoly::sin(1, -3)).gradient();
        assert!(leray_project(&g).is_zero());
        let p = leray_project(&v.add(&g));
        assert!(p.divergence().abs_sum() < 1e-14);
        assert_eq!(leray_project(&p), p);
    }

    #[test]
    fn hodge_multiplier_on_single_mode() {
        let k = WaveVector::new(2, 1);
        let b = SpectralField::constant_in_time(VectorTrigPoly::a_mode(k), 1.0).unwrap();
        let r = hodge_regularize(&b, 0.1).unwrap();
        let c = r.bins()[0].field.u1.coefficient(k)[0];
        assert!((c - (-0.5f64).exp() * 1.0).abs() < 1e-15);
        assert_eq!(hodge_regularize(&b, 0.0).unwrap(), b);
    }

    #[test]
    fn energy_of_fixtures() {
        assert_eq!(drift_energy(&SpectralField::zero(1.0).unwrap()).0, 0.0);
        let c = SpectralField::constant([1.0, 2.0], 3.0).unwrap();
        assert!((drift_energy(&c).0 - 7.5).abs() < 1e-14);
        let a = SpectralField::constant_in_time(a10(), 1.0).unwrap();
        assert!((drift_energy(&a).0 - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_divergent_bins() {
        let g = TrigPoly::cos(1, 0).gradient();
        assert!(SpectralField::constant_in_time(g, 1.0).is_err());
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(64);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(10)).sum();
        assert!((s - 2.0 / 11.0).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
    }

    #[test]
    fn mollifier_is_normalized() {
        let m = Mollifier::new(0.2);
        assert_eq!(m.cdf(-0.1), 0.0);
        assert_eq!(m.cdf(0.1), 1.0);
        assert!((m.cdf(0.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_field_survives_mollification_in_the_interior() {
        let b = SpectralField::constant_in_time(a10(), 1.0).unwrap();
        let eps = 0.1;
        let m = time_mollify(&b, eps).unwrap();
        for bin in m.bins() {
            let c = bin.field.u2.coefficient(WaveVector::new(1, 0))[0];
            if bin.t_start >= eps / 2.0 && bin.t_end <= 1.0 - eps / 2.0 {
                assert!((c + 1.0).abs() < 1e-12, "interior bin at {}", bin.t_start);
            } else {
                assert!(c > -1.0 && c < 0.0);
            }
        }
        let p = TorusPoint::new(0.3, 0.2);
        assert!((m.eval(0.5, p)[1] - b.eval(0.5, p)[1]).abs() < 1e-12);
    }

    #[test]
    fn rough_fixture_is_divergence_free_and_deterministic() {
        let a = rough_drift(0.5, 4, 8, 1.0, 9).unwrap();
        let b = rough_drift(0.5, 4, 8, 1.0, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.degree(), 8);
        assert_ne!(a.bins()[0], a.bins()[1]);
    }
}
