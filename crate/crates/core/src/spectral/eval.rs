//! Fast evaluation of trigonometric polynomials through tables of phases.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Add, Mul};

use super::{TorusPoint, TrigPoly, VectorTrigPoly};
#[allow(unused_imports)]
use crate::Float;

/// Minimal complex number used for phases `e^{ik·θ}`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Cx {
    pub re: f64,
    pub im: f64,
}

impl Cx {
    pub const ONE: Cx = Cx { re: 1.0, im: 0.0 };

    #[inline]
    pub const fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    #[inline]
    pub fn conj(self) -> Self {
        Self { re: self.re, im: -self.im }
    }

    #[inline]
    pub fn expi(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self { re: c, im: s }
    }

    #[inline]
    pub fn scale(self, s: f64) -> Self {
        Self { re: self.re * s, im: self.im * s }
    }
}

impl Add for Cx {
    type Output = Cx;
    #[inline]
    fn add(self, o: Cx) -> Cx {
        Cx { re: self.re + o.re, im: self.im + o.im }
    }
}

impl Mul for Cx {
    type Output = Cx;
    #[inline]
    fn mul(self, o: Cx) -> Cx {
        Cx { re: self.re * o.re - self.im * o.im, im: self.re * o.im + self.im * o.re }
    }
}

/// Phases `e^{i k₁ θ₁}` for `0 ≤ k₁ ≤ D` and `e^{i k₂ θ₂}` for `|k₂| ≤ D` at one point.
#[derive(Debug, Clone)]
pub struct FourierTable {
    degree: usize,
    first: Vec<Cx>,
    second: Vec<Cx>,
}

impl FourierTable {
    pub fn new(degree: u32) -> Self {
        let d = degree as usize;
        Self { degree: d, first: vec![Cx::ONE; d + 1], second: vec![Cx::ONE; 2 * d + 1] }
    }

    pub fn at(degree: u32, p: TorusPoint) -> Self {
        let mut t = Self::new(degree);
        t.fill(p);
        t
    }

    pub fn degree(&self) -> u32 {
        self.degree as u32
    }

    pub fn fill(&mut self, p: TorusPoint) {
        if self.degree == 0 {
            return;
        }
        self.fill_phases(Self::base_phases(p));
    }

    /// `[e^{iθ₁}, e^{iθ₂}]`.
    #[inline]
    pub fn base_phases(p: TorusPoint) -> [Cx; 2] {
        [Cx::expi(p.theta1()), Cx::expi(p.theta2())]
    }

    /// Fills from precomputed [`base_phases`](Self::base_phases), avoiding trigonometry.
    #[inline]
    pub fn fill_phases(&mut self, base: [Cx; 2]) {
        let d = self.degree;
        if d == 0 {
            return;
        }
        let [b1, b2] = base;
        self.first[0] = Cx::ONE;
        for k in 1..=d {
            self.first[k] = self.first[k - 1] * b1;
        }
        self.second[d] = Cx::ONE;
        for k in 1..=d {
            let z = self.second[d + k - 1] * b2;
            self.second[d + k] = z;
            self.second[d - k] = z.conj();
        }
    }

    /// `e^{i(k₁θ₁ + k₂θ₂)}` for `k₁ ≥ 0`.
    #[inline]
    pub fn phase(&self, k1: u32, k2: i32) -> Cx {
        self.first[k1 as usize] * self.second[(k2 + self.degree as i32) as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ScalarTerm {
    k1: u32,
    k2: i32,
    cos: f64,
    sin: f64,
}

/// A [`TrigPoly`] flattened for repeated evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolyEval {
    constant: f64,
    terms: Vec<ScalarTerm>,
    degree: u32,
}

impl PolyEval {
    pub fn new(p: &TrigPoly) -> Self {
        let mut constant = 0.0;
        let mut terms = Vec::new();
        for (k, [a, b]) in p.terms() {
            if k.is_zero() {
                constant = a;
            } else {
                terms.push(ScalarTerm { k1: k.k1 as u32, k2: k.k2, cos: a, sin: b });
            }
        }
        Self { constant, terms, degree: p.degree() }
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    #[inline]
    pub fn eval(&self, table: &FourierTable) -> f64 {
        debug_assert!(table.degree() >= self.degree);
        let mut s = self.constant;
        for t in &self.terms {
            let z = table.phase(t.k1, t.k2);
            s += t.cos * z.re + t.sin * z.im;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct VectorTerm {
    k1: u32,
    k2: i32,
    c: [f64; 4],
}

/// A [`VectorTrigPoly`] flattened for repeated evaluation; both components share phases.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VectorEval {
    constant: [f64; 2],
    terms: Vec<VectorTerm>,
    degree: u32,
}

impl VectorEval {
    pub fn new(v: &VectorTrigPoly) -> Self {
        let mut constant = [0.0; 2];
        let mut terms: Vec<VectorTerm> = Vec::new();
        // Both components iterate their BTreeMaps in the same key order.
        let mut merged: alloc::collections::BTreeMap<super::WaveVector, [f64; 4]> = Default::default();
        for (comp, poly) in [&v.u1, &v.u2].into_iter().enumerate() {
            for (k, [a, b]) in poly.terms() {
                let e = merged.entry(k).or_insert([0.0; 4]);
                e[2 * comp] = a;
                e[2 * comp + 1] = b;
            }
        }
        for (k, c) in merged {
            if k.is_zero() {
                constant = [c[0], c[2]];
            } else {
                terms.push(VectorTerm { k1: k.k1 as u32, k2: k.k2, c });
            }
        }
        Self { constant, terms, degree: v.degree() }
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    #[inline]
    pub fn eval(&self, table: &FourierTable) -> [f64; 2] {
        debug_assert!(table.degree() >= self.degree);
        let mut u = self.constant;
        for t in &self.terms {
            let z = table.phase(t.k1, t.k2);
            u[0] += t.c[0] * z.re + t.c[1] * z.im;
            u[1] += t.c[2] * z.re + t.c[3] * z.im;
        }
        u
    }
}
