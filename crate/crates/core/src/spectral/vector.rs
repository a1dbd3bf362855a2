use super::{FourierTable, TorusPoint, TrigPoly, VectorEval, WaveVector};

/// Vector field with trigonometric-polynomial components `(u¹, u²)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorTrigPoly {
    pub u1: TrigPoly,
    pub u2: TrigPoly,
}

impl VectorTrigPoly {
    pub fn new(u1: TrigPoly, u2: TrigPoly) -> Self {
        Self { u1, u2 }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: [f64; 2]) -> Self {
        Self::new(TrigPoly::constant(c[0]), TrigPoly::constant(c[1]))
    }

    /// `cos_vec · cos k·θ + sin_vec · sin k·θ`.
    pub fn mode(k: WaveVector, cos_vec: [f64; 2], sin_vec: [f64; 2]) -> Self {
        Self::new(TrigPoly::term(k, cos_vec[0], sin_vec[0]), TrigPoly::term(k, cos_vec[1], sin_vec[1]))
    }

    /// `A_k = (k₂, −k₁) cos k·θ`.
    pub fn a_mode(k: WaveVector) -> Self {
        Self::mode(k, k.perp(), [0.0; 2])
    }

    /// `B_k = (k₂, −k₁) sin k·θ`.
    pub fn b_mode(k: WaveVector) -> Self {
        Self::mode(k, [0.0; 2], k.perp())
    }

    pub fn degree(&self) -> u32 {
        self.u1.degree().max(self.u2.degree())
    }

    pub fn is_zero(&self) -> bool {
        self.u1.is_zero() && self.u2.is_zero()
    }

    pub fn eval(&self, p: TorusPoint) -> [f64; 2] {
        let table = FourierTable::at(self.degree(), p);
        VectorEval::new(self).eval(&table)
    }

    pub fn compile(&self) -> VectorEval {
        VectorEval::new(self)
    }

    pub fn divergence(&self) -> TrigPoly {
        &self.u1.derivative(0) + &self.u2.derivative(1)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.u1.scale(s), self.u2.scale(s))
    }

    pub fn add(&self, o: &VectorTrigPoly) -> Self {
        Self::new(&self.u1 + &o.u1, &self.u2 + &o.u2)
    }

    pub fn sub(&self, o: &VectorTrigPoly) -> Self {
        Self::new(&self.u1 - &o.u1, &self.u2 - &o.u2)
    }

    /// `⟨grad ψ, V⟩` as an exact polynomial.
    pub fn directional(&self, psi: &TrigPoly) -> TrigPoly {
        let g = psi.gradient();
        &g.u1.product(&self.u1) + &g.u2.product(&self.u2)
    }

    /// `(V·∇)W`.
    pub fn advect(&self, w: &VectorTrigPoly) -> VectorTrigPoly {
        VectorTrigPoly::new(self.directional(&w.u1), self.directional(&w.u2))
    }

    /// `∫ ⟨V, W⟩ dx` under the normalized measure.
    pub fn l2_inner(&self, o: &VectorTrigPoly) -> f64 {
        self.u1.l2_inner(&o.u1) + self.u2.l2_inner(&o.u2)
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.l2_inner(self)
    }

    pub fn map_modes(&self, mut f: impl FnMut(WaveVector, [f64; 2], [f64; 2]) -> ([f64; 2], [f64; 2])) -> Self {
        let mut out = VectorTrigPoly::zero();
        let mut keys: alloc::vec::Vec<WaveVector> = self.u1.terms().map(|(k, _)| k).collect();
        keys.extend(self.u2.terms().map(|(k, _)| k));
        keys.sort();
        keys.dedup();
        for k in keys {
            let [a1, b1] = self.u1.coefficient(k);
            let [a2, b2] = self.u2.coefficient(k);
            let (c, s) = f(k, [a1, a2], [b1, b2]);
            out.u1.add_term(k, c[0], s[0]);
            out.u2.add_term(k, c[1], s[1]);
        }
        out
    }
}
