use alloc::collections::BTreeMap;
use core::ops::{Add, Mul, Neg, Sub};

use super::{Cx, FourierTable, PolyEval, TorusPoint, VectorTrigPoly};

/// Integer wave vector `k ∈ Z²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WaveVector {
    pub k1: i32,
    pub k2: i32,
}

impl WaveVector {
    pub const ZERO: WaveVector = WaveVector { k1: 0, k2: 0 };

    pub const fn new(k1: i32, k2: i32) -> Self {
        Self { k1, k2 }
    }

    pub fn is_zero(&self) -> bool {
        self.k1 == 0 && self.k2 == 0
    }

    /// One representative per pair `{k, −k}`: `k₁ > 0`, or `k₁ = 0` and `k₂ ≥ 0`.
    pub fn is_canonical(&self) -> bool {
        self.k1 > 0 || (self.k1 == 0 && self.k2 >= 0)
    }

    /// Canonical representative and the sign picked up by the sine coefficient.
    pub fn canonical(self) -> (WaveVector, f64) {
        if self.is_canonical() {
            (self, 1.0)
        } else {
            (WaveVector::new(-self.k1, -self.k2), -1.0)
        }
    }

    pub fn sup_norm(&self) -> u32 {
        self.k1.unsigned_abs().max(self.k2.unsigned_abs())
    }

    pub fn norm_sq(&self) -> f64 {
        let (a, b) = (f64::from(self.k1), f64::from(self.k2));
        a * a + b * b
    }

    /// `(k₂, −k₁)`, orthogonal to `k`.
    pub fn perp(&self) -> [f64; 2] {
        [f64::from(self.k2), -f64::from(self.k1)]
    }

    pub fn as_f64(&self) -> [f64; 2] {
        [f64::from(self.k1), f64::from(self.k2)]
    }

    pub fn dot(&self, p: TorusPoint) -> f64 {
        f64::from(self.k1) * p.theta1() + f64::from(self.k2) * p.theta2()
    }
}

impl Add for WaveVector {
    type Output = WaveVector;
    fn add(self, o: WaveVector) -> WaveVector {
        WaveVector::new(self.k1 + o.k1, self.k2 + o.k2)
    }
}

/// Real trigonometric polynomial `f(θ) = Σ_k a_k cos k·θ + b_k sin k·θ`.
///
/// One canonical wave vector is stored per pair `{k, −k}`; the constant sits
/// at `k = 0` in the cosine slot.
#[derive(Debug, Clone, Default)]
pub struct TrigPoly {
    terms: BTreeMap<WaveVector, [f64; 2]>,
}

/// Equality of the represented functions: stored zero terms are ignored.
impl PartialEq for TrigPoly {
    fn eq(&self, other: &Self) -> bool {
        let nz = |p: &'_ Self| p.terms.iter().filter(|(_, c)| c[0] != 0.0 || c[1] != 0.0).map(|(k, c)| (*k, *c)).collect::<alloc::vec::Vec<_>>();
        nz(self) == nz(other)
    }
}

impl TrigPoly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        let mut p = Self::zero();
        p.add_term(WaveVector::ZERO, c, 0.0);
        p
    }

    /// `a cos k·θ + b sin k·θ`.
    pub fn term(k: WaveVector, a: f64, b: f64) -> Self {
        let mut p = Self::zero();
        p.add_term(k, a, b);
        p
    }

    pub fn cos(k1: i32, k2: i32) -> Self {
        Self::term(WaveVector::new(k1, k2), 1.0, 0.0)
    }

    pub fn sin(k1: i32, k2: i32) -> Self {
        Self::term(WaveVector::new(k1, k2), 0.0, 1.0)
    }

    /// Adds `a cos k·θ + b sin k·θ` for any `k`, folding it onto the canonical representative.
    pub fn add_term(&mut self, k: WaveVector, a: f64, b: f64) {
        let (k, sign) = k.canonical();
        let b = if k.is_zero() { 0.0 } else { sign * b };
        let e = self.terms.entry(k).or_insert([0.0; 2]);
        e[0] += a;
        e[1] += b;
    }

    /// `(cos, sin)` coefficient of `k` as written, i.e. relative to `cos k·θ` and `sin k·θ`.
    pub fn coefficient(&self, k: WaveVector) -> [f64; 2] {
        let (c, sign) = k.canonical();
        self.terms.get(&c).map_or([0.0; 2], |&[a, b]| [a, sign * b])
    }

    /// Canonical `(k, [cos, sin])` pairs in increasing `k` order.
    pub fn terms(&self) -> impl Iterator<Item = (WaveVector, [f64; 2])> + '_ {
        self.terms.iter().map(|(k, c)| (*k, *c))
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Largest `|k|∞` carrying a nonzero coefficient.
    pub fn degree(&self) -> u32 {
        self.terms
            .iter()
            .filter(|(_, c)| c[0] != 0.0 || c[1] != 0.0)
            .map(|(k, _)| k.sup_norm())
            .max()
            .unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.values().all(|c| c[0] == 0.0 && c[1] == 0.0)
    }

    /// Mean value, equal to `∫ f dx` under the normalized measure.
    pub fn mean(&self) -> f64 {
        self.terms.get(&WaveVector::ZERO).map_or(0.0, |c| c[0])
    }

    /// Drops coefficients with magnitude at most `tol`.
    pub fn pruned(&self, tol: f64) -> Self {
        let terms = self
            .terms
            .iter()
            .filter(|(_, c)| c[0].abs() > tol || c[1].abs() > tol)
            .map(|(k, c)| (*k, *c))
            .collect();
        Self { terms }
    }

    pub fn map_coefficients(&self, mut f: impl FnMut(WaveVector, [f64; 2]) -> [f64; 2]) -> Self {
        let terms = self.terms.iter().map(|(k, c)| (*k, f(*k, *c))).collect();
        Self { terms }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map_coefficients(|_, [a, b]| [s * a, s * b])
    }

    pub fn eval(&self, p: TorusPoint) -> f64 {
        let table = FourierTable::at(self.degree(), p);
        PolyEval::new(self).eval(&table)
    }

    pub fn compile(&self) -> PolyEval {
        PolyEval::new(self)
    }

    pub fn derivative(&self, axis: usize) -> Self {
        self.map_coefficients(|k, [a, b]| {
            let kj = f64::from(if axis == 0 { k.k1 } else { k.k2 });
            [b * kj, -a * kj]
        })
    }

    pub fn gradient(&self) -> VectorTrigPoly {
        VectorTrigPoly::new(self.derivative(0), self.derivative(1))
    }

    /// Mode `k` multiplied by `−|k|²`.
    pub fn laplacian(&self) -> Self {
        self.map_coefficients(|k, [a, b]| {
            let s = -k.norm_sq();
            [s * a, s * b]
        })
    }

    /// `∫ f g dx` under the normalized measure, from the coefficients.
    pub fn l2_inner(&self, other: &TrigPoly) -> f64 {
        let mut s = 0.0;
        for (k, [a, b]) in self.terms() {
            if let Some(&[c, d]) = other.terms.get(&k) {
                if k.is_zero() {
                    s += a * c;
                } else {
                    s += 0.5 * (a * c + b * d);
                }
            }
        }
        s
    }

    pub fn l2_norm(&self) -> f64 {
        num_traits::Float::sqrt(self.l2_inner(self))
    }

    /// `Σ_k |c_k|` over all complex Fourier coefficients, an upper bound of `sup |f|`.
    pub fn abs_sum(&self) -> f64 {
        self.terms()
            .map(|(k, [a, b])| if k.is_zero() { a.abs() } else { num_traits::Float::hypot(a, b) })
            .sum()
    }

    /// Complex coefficients `c_k` with `f = Σ c_k e^{ik·θ}` over all `k`.
    fn complex_coefficients(&self) -> BTreeMap<WaveVector, Cx> {
        let mut out = BTreeMap::new();
        for (k, [a, b]) in self.terms() {
            if k.is_zero() {
                out.insert(k, Cx::new(a, 0.0));
            } else {
                out.insert(k, Cx::new(0.5 * a, -0.5 * b));
                out.insert(WaveVector::new(-k.k1, -k.k2), Cx::new(0.5 * a, 0.5 * b));
            }
        }
        out
    }

    /// Exact product by convolution of Fourier coefficients.
    pub fn product(&self, other: &TrigPoly) -> TrigPoly {
        let f = self.complex_coefficients();
        let g = other.complex_coefficients();
        let mut h: BTreeMap<WaveVector, Cx> = BTreeMap::new();
        for (k, c) in &f {
            for (l, d) in &g {
                let m = *k + *l;
                if m.is_canonical() {
                    let e = h.entry(m).or_default();
                    *e = *e + *c * *d;
                }
            }
        }
        let mut out = TrigPoly::zero();
        for (k, c) in h {
            if k.is_zero() {
                out.add_term(k, c.re, 0.0);
            } else {
                out.add_term(k, 2.0 * c.re, -2.0 * c.im);
            }
        }
        out
    }

    /// `div(ψ V) = ⟨grad ψ, V⟩ + ψ div V`, computed exactly.
    pub fn div_product(&self, v: &VectorTrigPoly) -> TrigPoly {
        let a = self.product(&v.u1).derivative(0);
        let b = self.product(&v.u2).derivative(1);
        &a + &b
    }

    /// Translate: `f(θ − a)`.
    pub fn shifted(&self, a: [f64; 2]) -> Self {
        let mut out = TrigPoly::zero();
        for (k, [c, s]) in self.terms() {
            let phase = f64::from(k.k1) * a[0] + f64::from(k.k2) * a[1];
            let (sp, cp) = num_traits::Float::sin_cos(phase);
            // cos(kθ − φ) = cos kθ cos φ + sin kθ sin φ; sin(kθ − φ) = sin kθ cos φ − cos kθ sin φ
            out.add_term(k, c * cp - s * sp, s * cp + c * sp);
        }
        out
    }
}

impl<'a> Add<&'a TrigPoly> for &'a TrigPoly {
    type Output = TrigPoly;
    fn add(self, o: &TrigPoly) -> TrigPoly {
        let mut out = self.clone();
        for (k, [a, b]) in o.terms() {
            out.add_term(k, a, b);
        }
        out
    }
}

impl<'a> Sub<&'a TrigPoly> for &'a TrigPoly {
    type Output = TrigPoly;
    fn sub(self, o: &TrigPoly) -> TrigPoly {
        let mut out = self.clone();
        for (k, [a, b]) in o.terms() {
            out.add_term(k, -a, -b);
        }
        out
    }
}

impl Neg for &TrigPoly {
    type Output = TrigPoly;
    fn neg(self) -> TrigPoly {
        self.scale(-1.0)
    }
}

impl Mul<&TrigPoly> for &TrigPoly {
    type Output = TrigPoly;
    fn mul(self, o: &TrigPoly) -> TrigPoly {
        self.product(o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    #[test]
    fn evaluates_simple_sums() {
        assert_eq!(TrigPoly::cos(1, 0).eval(TorusPoint::new(0.0, 0.0)), 1.0);
        let f = &TrigPoly::cos(1, 0) + &TrigPoly::sin(0, 1);
        assert!(f.eval(TorusPoint::new(PI, PI / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn negative_wave_vectors_fold_onto_canonical() {
        let f = TrigPoly::term(WaveVector::new(-1, 2), 0.3, 0.7);
        let p = TorusPoint::new(0.4, 1.3);
        let direct = 0.3 * (-0.4 + 2.0 * 1.3f64).cos() + 0.7 * (-0.4 + 2.0 * 1.3f64).sin();
        assert!((f.eval(p) - direct).abs() < 1e-14);
        assert_eq!(f.coefficient(WaveVector::new(-1, 2)), [0.3, 0.7]);
        assert_eq!(f.coefficient(WaveVector::new(1, -2)), [0.3, -0.7]);
    }

    #[test]
    fn laplacian_of_single_mode() {
        let lap = TrigPoly::cos(1, 0).laplacian();
        assert_eq!(lap, TrigPoly::cos(1, 0).scale(-1.0));
        let c = TrigPoly::constant(2.5);
        assert!(c.gradient().u1.is_zero() && c.gradient().u2.is_zero());
        assert!(c.laplacian().is_zero());
    }

    #[test]
    fn inner_products() {
        let c = TrigPoly::cos(1, 0);
        let s = TrigPoly::sin(1, 0);
        assert!((c.l2_inner(&c) - 0.5).abs() < 1e-15);
        assert_eq!(c.l2_inner(&s), 0.0);
    }

    #[test]
    fn product_of_cosines() {
        // cos a cos b = ½ cos(a−b) + ½ cos(a+b)
        let p = TrigPoly::cos(1, 0).product(&TrigPoly::cos(0, 1));
        assert!((p.coefficient(WaveVector::new(1, 1))[0] - 0.5).abs() < 1e-15);
        assert!((p.coefficient(WaveVector::new(1, -1))[0] - 0.5).abs() < 1e-15);
        assert_eq!(p.degree(), 1);
    }

    #[test]
    fn shift_moves_the_graph() {
        let f = &TrigPoly::term(WaveVector::new(2, 1), 0.4, -1.1) + &TrigPoly::constant(0.2);
        let a = [0.3, -1.2];
        let g = f.shifted(a);
        let p = TorusPoint::new(1.0, 2.0);
        assert!((g.eval(p) - f.eval(TorusPoint::new(1.0 - a[0], 2.0 - a[1]))).abs() < 1e-13);
    }
}
