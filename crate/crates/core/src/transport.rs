//! The transport functional `Θ_t(φ, ψ) = ∫ φ(x) ψ(g_t(x)) dx` of a particle flow.
//!
//! `Θ` is the forward quadrature `Σ_p w_p ψ(g_t(x_p))` over the initial grid,
//! with `w_p = φ(x_p)/N`. Each frame also yields the integrands of the
//! semimartingale decomposition
//!
//! ```text
//! dΘ = [Θ(φ, ⟨∇ψ, b⟩) + (c/2) Θ(φ, Δψ)] dt + Σ_i Θ(φ, ⟨∇ψ, σ_i⟩) dW_i
//! ```
//!
//! where `c` is the noise normalization (`Σ σ_i ⊗ σ_i = c·Id`).

use alloc::vec;
use alloc::vec::Vec;

use crate::drift::{CompiledDrift, SpectralField};
use crate::error::{invalid, Error, Result};
use crate::flow::{Frame, Observer};
use crate::spectral::{uniform_grid, FourierTable, NoiseBasis, NoiseMode, Parity, PolyEval, TorusPoint, TrigPoly};
use crate::stats::MeanEstimate;
#[allow(unused_imports)]
use crate::Float;

/// Default cap on `deg ψ + deg b` for drift integrands.
pub const DEFAULT_MAX_DEGREE: u32 = 64;

/// Left test functions as sparse quadrature weights on the initial points.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiFamily {
    count: usize,
    offsets: Vec<usize>,
    entries: Vec<(u32, f64)>,
    masses: Vec<f64>,
    norms: Vec<f64>,
}

impl PhiFamily {
    /// Weights `φ_j(x_p)/N`; exact zeros are dropped.
    pub fn from_polys(phis: &[TrigPoly], initial: &[TorusPoint]) -> Self {
        let n = initial.len();
        let evals: Vec<PolyEval> = phis.iter().map(TrigPoly::compile).collect();
        let degree = phis.iter().map(TrigPoly::degree).max().unwrap_or(0);
        let mut table = FourierTable::new(degree);
        let mut rows = Vec::with_capacity(n);
        for p in initial {
            table.fill(*p);
            let row: Vec<(u32, f64)> = evals
                .iter()
                .enumerate()
                .map(|(j, e)| (j as u32, e.eval(&table) / n as f64))
                .filter(|(_, w)| *w != 0.0)
                .collect();
            rows.push(row);
        }
        Self::from_rows(phis.len(), rows)
    }

    /// `rows[p]` lists `(j, w_{jp})` for particle `p`; weights already include the `1/N`.
    pub fn from_rows(count: usize, rows: Vec<Vec<(u32, f64)>>) -> Self {
        let particles = rows.len();
        let mut offsets = Vec::with_capacity(particles + 1);
        let mut entries = Vec::new();
        let mut masses = vec![0.0; count];
        let mut sq = vec![0.0; count];
        offsets.push(0);
        for row in rows {
            for (j, w) in row {
                masses[j as usize] += w;
                sq[j as usize] += w * w;
                entries.push((j, w));
            }
            offsets.push(entries.len());
        }
        let norms = sq.iter().map(|s| (s * particles as f64).sqrt()).collect();
        Self { count, offsets, entries, masses, norms }
    }

    /// Families side by side: indices of `other` follow those of `self`.
    pub fn concat(&self, other: &PhiFamily) -> Result<Self> {
        if self.particles() != other.particles() {
            return Err(Error::Shape(alloc::format!(
                "families over {} and {} particles",
                self.particles(),
                other.particles()
            )));
        }
        let shift = self.count as u32;
        let rows = (0..self.particles())
            .map(|p| {
                let mut r = self.row(p).to_vec();
                r.extend(other.row(p).iter().map(|(j, w)| (j + shift, *w)));
                r
            })
            .collect();
        Ok(Self::from_rows(self.count + other.count, rows))
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn particles(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Quadrature masses `Θ_0(φ_j, 1) = Σ_p w_{jp}`.
    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    /// Quadrature `L²` norms `(N Σ_p w_{jp}²)^{1/2}`.
    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    #[inline]
    pub fn row(&self, p: usize) -> &[(u32, f64)] {
        &self.entries[self.offsets[p]..self.offsets[p + 1]]
    }

    /// Dense weight vector of function `j`.
    pub fn weights(&self, j: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.particles()];
        for (p, x) in w.iter_mut().enumerate() {
            *x = self.row(p).iter().filter(|e| e.0 as usize == j).map(|e| e.1).sum();
        }
        w
    }
}

/// Right test functions with their first and second derivatives compiled.
#[derive(Debug, Clone)]
pub struct PsiFamily {
    polys: Vec<TrigPoly>,
    value: Vec<PolyEval>,
    grad: Vec<[PolyEval; 2]>,
    laplacian: Vec<PolyEval>,
    degree: u32,
}

impl PsiFamily {
    pub fn new(psis: &[TrigPoly]) -> Self {
        Self {
            polys: psis.to_vec(),
            value: psis.iter().map(TrigPoly::compile).collect(),
            grad: psis.iter().map(|p| [p.derivative(0).compile(), p.derivative(1).compile()]).collect(),
            laplacian: psis.iter().map(|p| p.laplacian().compile()).collect(),
            degree: psis.iter().map(TrigPoly::degree).max().unwrap_or(0),
        }
    }

    pub fn len(&self) -> usize {
        self.polys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polys.is_empty()
    }

    pub fn polys(&self) -> &[TrigPoly] {
        &self.polys
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn l2_norms(&self) -> Vec<f64> {
        self.polys.iter().map(TrigPoly::l2_norm).collect()
    }

    /// `‖∇ψ‖_{L²}`.
    pub fn gradient_l2_norms(&self) -> Vec<f64> {
        self.polys.iter().map(|p| p.gradient().l2_norm_sq().sqrt()).collect()
    }

    /// `‖∇ψ‖_{L∞}`, maximized over a grid fine enough to resolve the degree.
    pub fn gradient_sup_norms(&self) -> Vec<f64> {
        let side = (16 * self.degree.max(1) as usize).max(64);
        let grid = uniform_grid(side);
        let mut out = vec![0.0f64; self.len()];
        let mut table = FourierTable::new(self.degree);
        for p in grid {
            table.fill(p);
            for (o, g) in out.iter_mut().zip(&self.grad) {
                let (a, b) = (g[0].eval(&table), g[1].eval(&table));
                *o = o.max((a * a + b * b).sqrt());
            }
        }
        out
    }
}

/// A bracket request `[Θ(φ_{j1}, ψ_{k1}), Θ(φ_{j2}, ψ_{k2})]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BracketPair {
    pub first: (usize, usize),
    pub second: (usize, usize),
}

impl BracketPair {
    pub fn new(first: (usize, usize), second: (usize, usize)) -> Self {
        Self { first, second }
    }

    pub fn diagonal(j: usize, k: usize) -> Self {
        Self { first: (j, k), second: (j, k) }
    }

    pub fn is_diagonal(&self) -> bool {
        self.first == self.second
    }
}

/// Everything a frame contributes, each flattened as `j·K + k`.
#[derive(Debug, Clone, Default)]
pub struct FrameMoments {
    pub theta: Vec<f64>,
    pub drift: Vec<f64>,
    pub laplacian: Vec<f64>,
    /// Empty at the terminal frame.
    pub martingale: Vec<f64>,
    pub reference: Vec<f64>,
    /// One predicted bracket rate per requested pair; empty at the terminal frame.
    pub bracket: Vec<f64>,
}

/// Reusable evaluator of [`FrameMoments`].
#[derive(Debug, Clone)]
pub struct TransportKernel<'a> {
    phis: &'a PhiFamily,
    psis: &'a PsiFamily,
    /// Per wave vector: `(k₁, k₂, weight·k⊥ of the cos mode, weight·k⊥ of the sin mode)`.
    waves: Vec<(u32, i32, [f64; 2], [f64; 2])>,
    pairs: Vec<BracketPair>,
    slots: Vec<(usize, usize)>,
    pair_slots: Vec<(usize, usize)>,
    reference: Option<CompiledDrift>,
    table: FourierTable,
    scratch: Vec<[f64; 7]>,
    /// Per wave vector: `(cos k·θ, sin k·θ)` at the current particle.
    sigma: Vec<[f64; 2]>,
    amps: Vec<f64>,
    /// Which ψ appear in a bracket slot, and their per-mode amplitudes.
    slot_psis: Vec<bool>,
    grad_sigma: Vec<f64>,
    out: FrameMoments,
}

impl<'a> TransportKernel<'a> {
    pub fn new(
        phis: &'a PhiFamily,
        psis: &'a PsiFamily,
        basis: &NoiseBasis,
        pairs: &[BracketPair],
        reference: Option<&SpectralField>,
    ) -> Result<Self> {
        let (jn, kn) = (phis.len(), psis.len());
        for p in pairs {
            for (j, k) in [p.first, p.second] {
                if j >= jn || k >= kn {
                    return Err(invalid("pairs", alloc::format!("({j}, {k}) is outside the test families")));
                }
            }
        }
        let mut slots: Vec<(usize, usize)> = pairs.iter().flat_map(|p| [p.first, p.second]).collect();
        slots.sort_unstable();
        slots.dedup();
        let slot_of = |x: (usize, usize)| slots.binary_search(&x).unwrap_or(0);
        let pair_slots = pairs.iter().map(|p| (slot_of(p.first), slot_of(p.second))).collect();
        let mut degree = psis.degree();
        if !pairs.is_empty() {
            degree = degree.max(basis.degree());
        }
        if let Some(r) = reference {
            degree = degree.max(r.degree());
        }
        let jk = jn * kn;
        Ok(Self {
            phis,
            psis,
            waves: wave_table(&basis.modes),
            pairs: pairs.to_vec(),
            slots: slots.clone(),
            pair_slots,
            reference: reference.map(SpectralField::compile),
            table: FourierTable::new(degree),
            scratch: vec![[0.0; 7]; kn],
            sigma: vec![[0.0; 2]; basis.len()],
            amps: vec![0.0; slots.len() * 2 * basis.len()],
            slot_psis: (0..kn).map(|k| slots.iter().any(|s| s.1 == k)).collect(),
            grad_sigma: vec![0.0; kn * 2 * basis.len()],
            out: FrameMoments {
                theta: vec![0.0; jk],
                drift: vec![0.0; jk],
                laplacian: vec![0.0; jk],
                martingale: vec![0.0; jk],
                reference: vec![0.0; if reference.is_some() { jk } else { 0 }],
                bracket: vec![0.0; pairs.len()],
            },
        })
    }

    pub fn phis(&self) -> &PhiFamily {
        self.phis
    }

    pub fn psis(&self) -> &PsiFamily {
        self.psis
    }

    pub fn pairs(&self) -> &[BracketPair] {
        &self.pairs
    }

    pub fn has_reference(&self) -> bool {
        self.reference.is_some()
    }

    pub fn compute(&mut self, frame: &Frame<'_>) -> &FrameMoments {
        let phis = self.phis;
        self.compute_with(frame, phis)
    }

    /// As [`compute`](Self::compute) with per-frame weights in place of the
    /// kernel's own family; `phis` must have the same length.
    pub fn compute_with(&mut self, frame: &Frame<'_>, phis: &PhiFamily) -> &FrameMoments {
        debug_assert_eq!(phis.len(), self.phis.len());
        let kn = self.psis.len();
        let terminal = frame.noise.is_empty();
        let modes = 2 * self.waves.len();
        let out = &mut self.out;
        for v in [&mut out.theta, &mut out.drift, &mut out.laplacian, &mut out.martingale, &mut out.reference] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        self.amps.iter_mut().for_each(|x| *x = 0.0);
        let reference = self.reference.as_ref().map(|r| r.at(frame.time));
        let want_brackets = !terminal && !self.slots.is_empty();
        for p in 0..frame.positions.len() {
            let row = phis.row(p);
            if row.is_empty() {
                continue;
            }
            self.table.fill_phases(frame.phases[p]);
            let b = frame.drift[p];
            let nz = if terminal { [0.0; 2] } else { frame.noise[p] };
            let bref = reference.map(|r| r.eval(&self.table)).unwrap_or([0.0; 2]);
            for k in 0..kn {
                let g = [self.psis.grad[k][0].eval(&self.table), self.psis.grad[k][1].eval(&self.table)];
                self.scratch[k] = [
                    self.psis.value[k].eval(&self.table),
                    g[0] * b[0] + g[1] * b[1],
                    self.psis.laplacian[k].eval(&self.table),
                    g[0] * nz[0] + g[1] * nz[1],
                    g[0] * bref[0] + g[1] * bref[1],
                    g[0],
                    g[1],
                ];
            }
            for &(j, w) in row {
                let base = j as usize * kn;
                for k in 0..kn {
                    let s = &self.scratch[k];
                    out.theta[base + k] += w * s[0];
                    out.drift[base + k] += w * s[1];
                    out.laplacian[base + k] += w * s[2];
                    out.martingale[base + k] += w * s[3];
                }
                if !out.reference.is_empty() {
                    for k in 0..kn {
                        out.reference[base + k] += w * self.scratch[k][4];
                    }
                }
            }
            if want_brackets {
                for (sg, w) in self.sigma.iter_mut().zip(&self.waves) {
                    let z = self.table.phase(w.0, w.1);
                    *sg = [z.re, z.im];
                }
                // Per ψ, the amplitudes ⟨∇ψ, σ_i⟩ at this particle; slots then only scale and add.
                for (k, used) in self.slot_psis.iter().enumerate() {
                    if !used {
                        continue;
                    }
                    let g = [self.scratch[k][5], self.scratch[k][6]];
                    let c = &mut self.grad_sigma[k * modes..(k + 1) * modes];
                    for ((pair, sg), wave) in c.chunks_exact_mut(2).zip(&self.sigma).zip(&self.waves) {
                        pair[0] = (wave.2[0] * g[0] + wave.2[1] * g[1]) * sg[0];
                        pair[1] = (wave.3[0] * g[0] + wave.3[1] * g[1]) * sg[1];
                    }
                }
                for (s, &(j, k)) in self.slots.iter().enumerate() {
                    let w: f64 = row.iter().filter(|e| e.0 as usize == j).map(|e| e.1).sum();
                    if w == 0.0 {
                        continue;
                    }
                    let a = &mut self.amps[s * modes..(s + 1) * modes];
                    for (x, c) in a.iter_mut().zip(&self.grad_sigma[k * modes..(k + 1) * modes]) {
                        *x += w * c;
                    }
                }
            }
        }
        if terminal {
            out.martingale.clear();
            out.bracket.clear();
        } else {
            out.martingale.resize(phis.len() * kn, 0.0);
            out.bracket.resize(self.pairs.len(), 0.0);
            for (o, &(s1, s2)) in out.bracket.iter_mut().zip(&self.pair_slots) {
                let a1 = &self.amps[s1 * modes..(s1 + 1) * modes];
                let a2 = &self.amps[s2 * modes..(s2 + 1) * modes];
                *o = a1.iter().zip(a2).map(|(x, y)| x * y).sum();
            }
        }
        &self.out
    }
}

/// Groups the modes by wave vector; a missing parity gets a zero weight.
fn wave_table(modes: &[NoiseMode]) -> Vec<(u32, i32, [f64; 2], [f64; 2])> {
    let mut out: Vec<(u32, i32, [f64; 2], [f64; 2])> = Vec::new();
    for m in modes {
        let p = m.k.perp();
        let wp = [m.weight * p[0], m.weight * p[1]];
        let (k1, k2) = (m.k.k1 as u32, m.k.k2);
        let idx = match out.iter().position(|w| w.0 == k1 && w.1 == k2) {
            Some(i) => i,
            None => {
                out.push((k1, k2, [0.0; 2], [0.0; 2]));
                out.len() - 1
            }
        };
        match m.parity {
            Parity::A => out[idx].2 = wp,
            Parity::B => out[idx].3 = wp,
        }
    }
    out
}

/// Checks that every drift integrand `⟨∇ψ, b⟩` stays within `max_degree`.
pub fn check_degree(psis: &PsiFamily, drift: &SpectralField, max_degree: u32) -> Result<()> {
    let degree = psis.degree() + drift.degree();
    if degree > max_degree {
        return Err(Error::DegreeOverflow { degree, max: max_degree });
    }
    Ok(())
}

/// Per-replica time series of `Θ` and its decomposition.
///
/// Arrays indexed by time are row-major in `(step, j·K + k)`; `theta`, `drift`,
/// `laplacian` and `reference` have `steps + 1` rows, `martingale` and
/// `bracket` have `steps` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportSeries {
    pub phis: usize,
    pub psis: usize,
    pub steps: usize,
    pub dt: f64,
    /// Coefficient `c` of the Itô correction `(c/2) Θ(φ, Δψ)`.
    pub ito_scale: f64,
    pub pairs: Vec<BracketPair>,
    pub theta: Vec<f64>,
    pub drift: Vec<f64>,
    pub laplacian: Vec<f64>,
    pub martingale: Vec<f64>,
    pub reference: Vec<f64>,
    pub bracket: Vec<f64>,
}

impl TransportSeries {
    #[inline]
    fn at(&self, v: &[f64], step: usize, j: usize, k: usize) -> f64 {
        v[step * self.phis * self.psis + j * self.psis + k]
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn theta(&self, step: usize, j: usize, k: usize) -> f64 {
        self.at(&self.theta, step, j, k)
    }

    /// `DΘ̃_t(φ_j, ψ_k) = Θ_t(φ_j, div(ψ_k b))`.
    pub fn drift_integrand(&self, step: usize, j: usize, k: usize) -> f64 {
        self.at(&self.drift, step, j, k)
    }

    pub fn laplacian_integrand(&self, step: usize, j: usize, k: usize) -> f64 {
        self.at(&self.laplacian, step, j, k)
    }

    pub fn martingale_increment(&self, step: usize, j: usize, k: usize) -> f64 {
        self.at(&self.martingale, step, j, k)
    }

    pub fn reference_integrand(&self, step: usize, j: usize, k: usize) -> f64 {
        self.at(&self.reference, step, j, k)
    }

    pub fn has_reference(&self) -> bool {
        !self.reference.is_empty()
    }

    /// Full drift of `Θ` over step `n`: `(D + (c/2) L) dt`.
    fn drift_step(&self, step: usize, j: usize, k: usize) -> f64 {
        (self.drift_integrand(step, j, k) + 0.5 * self.ito_scale * self.laplacian_integrand(step, j, k)) * self.dt
    }

    /// `∫₀ᵀ DΘ̃ dt` by the left-point rule matching the integrator.
    pub fn integrated_drift(&self, j: usize, k: usize) -> f64 {
        (0..self.steps).map(|n| self.drift_integrand(n, j, k)).sum::<f64>() * self.dt
    }

    pub fn integrated_reference(&self, j: usize, k: usize) -> f64 {
        (0..self.steps).map(|n| self.reference_integrand(n, j, k)).sum::<f64>() * self.dt
    }

    /// `∫₀ᵀ (DΘ̃)² dt` by the trapezoid rule.
    pub fn drift_square_integral(&self, j: usize, k: usize) -> f64 {
        trapezoid((0..=self.steps).map(|n| self.drift_integrand(n, j, k).powi(2)), self.steps, self.dt)
    }

    /// `R_T = Θ_T − Θ_0 − Σ (D + (c/2)L) dt − Σ_i Σ Θ(φ, ⟨∇ψ, σ_i⟩) ΔW_i`.
    pub fn martingale_residual(&self, j: usize, k: usize) -> f64 {
        let mut r = self.theta(self.steps, j, k) - self.theta(0, j, k);
        for n in 0..self.steps {
            r -= self.drift_step(n, j, k) + self.martingale_increment(n, j, k);
        }
        r
    }

    fn corrected_increment(&self, step: usize, j: usize, k: usize) -> f64 {
        self.theta(step + 1, j, k) - self.theta(step, j, k) - self.drift_step(step, j, k)
    }

    /// Realized covariation of drift-corrected increments.
    pub fn realized_bracket(&self, pair: &BracketPair) -> f64 {
        let (a, b) = (pair.first, pair.second);
        (0..self.steps)
            .map(|n| self.corrected_increment(n, a.0, a.1) * self.corrected_increment(n, b.0, b.1))
            .sum()
    }

    /// `Σ_n Σ_i Θ(φ₁, ⟨∇ψ₁, σ_i⟩) Θ(φ₂, ⟨∇ψ₂, σ_i⟩) dt` for the `index`-th requested pair.
    pub fn predicted_bracket(&self, index: usize) -> f64 {
        let np = self.pairs.len();
        (0..self.steps).map(|n| self.bracket[n * np + index]).sum::<f64>() * self.dt
    }
}

pub(crate) fn trapezoid(values: impl Iterator<Item = f64>, last: usize, h: f64) -> f64 {
    values.enumerate().map(|(i, v)| crate::stats::trapezoid_weight(i, last, h) * v).sum()
}

/// Observer that accumulates a [`TransportSeries`].
#[derive(Debug, Clone)]
pub struct TransportRecorder<'a> {
    kernel: TransportKernel<'a>,
    series: TransportSeries,
}

impl<'a> TransportRecorder<'a> {
    pub fn new(kernel: TransportKernel<'a>, basis: &NoiseBasis, steps: usize, dt: f64) -> Self {
        let (jn, kn) = (kernel.phis().len(), kernel.psis().len());
        let series = TransportSeries {
            phis: jn,
            psis: kn,
            steps,
            dt,
            ito_scale: basis.normalization,
            pairs: kernel.pairs().to_vec(),
            theta: Vec::with_capacity((steps + 1) * jn * kn),
            drift: Vec::with_capacity((steps + 1) * jn * kn),
            laplacian: Vec::with_capacity((steps + 1) * jn * kn),
            martingale: Vec::with_capacity(steps * jn * kn),
            reference: Vec::new(),
            bracket: Vec::with_capacity(steps * kernel.pairs().len()),
        };
        Self { kernel, series }
    }

    pub fn finish(self) -> TransportSeries {
        self.series
    }

    /// Records a frame with weights `phis` in place of the kernel's family.
    pub fn record_with(&mut self, frame: &Frame<'_>, phis: &PhiFamily) {
        let m = self.kernel.compute_with(frame, phis);
        let s = &mut self.series;
        s.theta.extend_from_slice(&m.theta);
        s.drift.extend_from_slice(&m.drift);
        s.laplacian.extend_from_slice(&m.laplacian);
        s.martingale.extend_from_slice(&m.martingale);
        s.reference.extend_from_slice(&m.reference);
        s.bracket.extend_from_slice(&m.bracket);
    }
}

impl Observer for TransportRecorder<'_> {
    fn observe(&mut self, frame: &Frame<'_>) {
        let m = self.kernel.compute(frame);
        let s = &mut self.series;
        s.theta.extend_from_slice(&m.theta);
        s.drift.extend_from_slice(&m.drift);
        s.laplacian.extend_from_slice(&m.laplacian);
        s.martingale.extend_from_slice(&m.martingale);
        s.reference.extend_from_slice(&m.reference);
        s.bracket.extend_from_slice(&m.bracket);
    }
}

/// `∫ φ(x) E[ψ(y) | x]` when `y` is `x + t·c` plus a Brownian motion of covariance `κ t Id`.
pub fn heat_shift_moment(phi: &TrigPoly, psi: &TrigPoly, t: f64, shift_velocity: [f64; 2], kappa: f64) -> f64 {
    let transported = psi
        .map_coefficients(|k, c| {
            let d = (-0.5 * kappa * k.norm_sq() * t).exp();
            [d * c[0], d * c[1]]
        })
        .shifted([-t * shift_velocity[0], -t * shift_velocity[1]]);
    phi.l2_inner(&transported)
}

/// Replica mean of `Θ_T(φ_j, ψ_k)` against a target moment.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentCheck {
    pub j: usize,
    pub k: usize,
    pub estimate: MeanEstimate,
    pub target: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalConfigurationReport {
    pub sigmas: f64,
    pub checks: Vec<MomentCheck>,
}

impl FinalConfigurationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Largest deviation in units of standard error (infinite for a deterministic miss).
    pub fn worst_z(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| {
                let d = (c.estimate.mean - c.target).abs();
                if c.estimate.std_error > 0.0 {
                    d / c.estimate.std_error
                } else if d <= EXACT_FLOOR {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Absolute slack for deterministic (zero-variance) comparisons.
pub const EXACT_FLOOR: f64 = 1e-9;

/// `targets` is row-major `(j, k)`.
pub fn final_configuration_check(series: &[TransportSeries], targets: &[f64], sigmas: f64) -> Result<FinalConfigurationReport> {
    let first = series.first().ok_or_else(|| invalid("series", "at least one replica is required"))?;
    let (jn, kn) = (first.phis, first.psis);
    if targets.len() != jn * kn {
        return Err(Error::Shape(alloc::format!("{} targets for {}×{} moments", targets.len(), jn, kn)));
    }
    let mut checks = Vec::with_capacity(jn * kn);
    for j in 0..jn {
        for k in 0..kn {
            let xs: Vec<f64> = series.iter().map(|s| s.theta(s.steps, j, k)).collect();
            let estimate = MeanEstimate::from_samples(&xs);
            let target = targets[j * kn + k];
            let passed = estimate.within(target, sigmas, EXACT_FLOOR);
            checks.push(MomentCheck { j, k, estimate, target, passed });
        }
    }
    Ok(FinalConfigurationReport { sigmas, checks })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BracketResult {
    pub pair: BracketPair,
    /// Replica means of the realized and predicted totals.
    pub realized: f64,
    pub predicted: f64,
    /// Replica mean of `|predicted_r|`.
    pub predicted_abs: f64,
    /// `Σ_r |realized_r − predicted_r| / Σ_r |predicted_r|` (0 when both vanish).
    pub relative_error: f64,
    /// `‖φ‖² ‖∇ψ‖²_{L²}` for diagonal pairs.
    pub rate_bound: Option<f64>,
    /// Largest realized rate `realized_r / T` over replicas.
    pub max_realized_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BracketReport {
    pub tolerance: f64,
    pub bound_slack: f64,
    pub results: Vec<BracketResult>,
}

impl BracketReport {
    /// Relative error aggregated over all requested pairs.
    pub fn relative_error(&self) -> f64 {
        let num: f64 = self.results.iter().map(|r| r.relative_error * r.predicted_abs).sum();
        let den: f64 = self.results.iter().map(|r| r.predicted_abs).sum();
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    pub fn bound_holds(&self) -> bool {
        self.results.iter().all(|r| match r.rate_bound {
            Some(b) => r.max_realized_rate <= b * (1.0 + self.bound_slack) + EXACT_FLOOR,
            None => true,
        })
    }

    pub fn passed(&self) -> bool {
        self.bound_holds() && self.relative_error() <= self.tolerance
    }
}

/// `phi_norms`/`psi_grad_norms` give `‖φ_j‖` and `‖∇ψ_k‖_{L²}` for the rate bound.
pub fn bracket_check(
    series: &[TransportSeries],
    phi_norms: &[f64],
    psi_grad_norms: &[f64],
    tolerance: f64,
    bound_slack: f64,
) -> Result<BracketReport> {
    let first = series.first().ok_or_else(|| invalid("series", "at least one replica is required"))?;
    let mut results = Vec::new();
    for (idx, pair) in first.pairs.iter().enumerate() {
        let mut realized = Vec::with_capacity(series.len());
        let mut predicted = Vec::with_capacity(series.len());
        for s in series {
            realized.push(s.realized_bracket(pair));
            predicted.push(s.predicted_bracket(idx));
        }
        let num: f64 = realized.iter().zip(&predicted).map(|(r, p)| (r - p).abs()).sum();
        let den: f64 = predicted.iter().map(|p| p.abs()).sum();
        let relative_error = if den > 0.0 {
            num / den
        } else if num <= EXACT_FLOOR {
            0.0
        } else {
            f64::INFINITY
        };
        let rate_bound = pair.is_diagonal().then(|| {
            let (j, k) = pair.first;
            phi_norms[j].powi(2) * psi_grad_norms[k].powi(2)
        });
        let horizon = first.horizon();
        let max_realized_rate = realized.iter().fold(0.0f64, |a, r| a.max(r / horizon));
        let n = series.len() as f64;
        results.push(BracketResult {
            pair: *pair,
            realized: realized.iter().sum::<f64>() / n,
            predicted: predicted.iter().sum::<f64>() / n,
            predicted_abs: den / n,
            relative_error,
            rate_bound,
            max_realized_rate,
        });
    }
    Ok(BracketReport { tolerance, bound_slack, results })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    /// `max_r |R_T|` per `(j, k)`, row-major.
    pub max_abs: Vec<f64>,
    /// `max_abs / (‖φ_j‖ ‖ψ_k‖)`, with zero-norm pairs reported as 0.
    pub scaled: Vec<f64>,
}

impl ResidualReport {
    pub fn worst(&self) -> f64 {
        self.max_abs.iter().fold(0.0, |a, &b| a.max(b))
    }

    pub fn worst_scaled(&self) -> f64 {
        self.scaled.iter().fold(0.0, |a, &b| a.max(b))
    }
}

pub fn martingale_residual(series: &[TransportSeries], phi_norms: &[f64], psi_norms: &[f64]) -> ResidualReport {
    let Some(first) = series.first() else {
        return ResidualReport { max_abs: Vec::new(), scaled: Vec::new() };
    };
    let (jn, kn) = (first.phis, first.psis);
    let mut max_abs = vec![0.0f64; jn * kn];
    for s in series {
        for j in 0..jn {
            for k in 0..kn {
                let r = s.martingale_residual(j, k).abs();
                max_abs[j * kn + k] = max_abs[j * kn + k].max(r);
            }
        }
    }
    let scaled = (0..jn * kn)
        .map(|i| {
            let n = phi_norms[i / kn] * psi_norms[i % kn];
            if n > 0.0 {
                max_abs[i] / n
            } else {
                0.0
            }
        })
        .collect();
    ResidualReport { max_abs, scaled }
}

/// `f ≥ 0` certified by `mean f ≥ Σ_{k≠0} |ĉ_k|`.
pub fn certainly_nonnegative(f: &TrigPoly) -> bool {
    let m = f.mean();
    m >= f.abs_sum() - m.abs()
}

/// Random test polynomials of degree `degree` with decaying coefficients.
/// Every other function is lifted to be nonnegative.
pub fn random_test_family(count: usize, degree: u32, seed: u64, stream_replica: u32) -> Vec<TrigPoly> {
    use crate::rng::{CounterRng, Stream};
    let rng = CounterRng::new(seed, Stream::Auxiliary, stream_replica);
    let d = degree as i32;
    let mut idx = 0u64;
    let mut uniform = || {
        let u = rng.uniform_pair(idx)[0];
        idx += 1;
        2.0 * u - 1.0
    };
    (0..count)
        .map(|i| {
            let mut f = TrigPoly::zero();
            for k1 in 0..=d {
                for k2 in -d..=d {
                    let k = crate::spectral::WaveVector::new(k1, k2);
                    if k.is_zero() || !k.is_canonical() {
                        continue;
                    }
                    let s = 1.0 / k.norm_sq();
                    f.add_term(k, s * uniform(), s * uniform());
                }
            }
            let c = if i % 2 == 1 { f.abs_sum() + 0.1 } else { 0.5 * uniform() };
            f.add_term(crate::spectral::WaveVector::ZERO, c, 0.0);
            f
        })
        .collect()
}

/// Inputs of [`axiom_sweep`]. Test functions are those the series were recorded with.
#[derive(Debug, Clone)]
pub struct AxiomInputs<'a> {
    pub series: &'a [TransportSeries],
    pub phis: &'a [TrigPoly],
    pub psis: &'a [TrigPoly],
    /// Target moments `∫ φ_j(x) ψ_k(y) η(dx, dy)`, row-major.
    pub targets: &'a [f64],
    /// Estimate of `𝓔′(Θ)` used on the right of the drift bound.
    pub energy: f64,
    /// Number of quadrature particles `N`.
    pub particles: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxiomResult {
    pub axiom: u8,
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    /// The limit it is compared with.
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxiomReport {
    pub results: Vec<AxiomResult>,
}

impl AxiomReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

/// Tolerances of the sweep.
pub const AXIOM_SIGMAS: f64 = 3.0;
pub const AXIOM_BRACKET_TOLERANCE: f64 = 0.10;
pub const AXIOM_BOUND_SLACK: f64 = 0.10;
pub const AXIOM_EXACT_SLACK: f64 = 1e-6;

/// Checks the eight defining properties of a generalized flow on recorded series.
pub fn axiom_sweep(inp: &AxiomInputs<'_>) -> Result<AxiomReport> {
    let series = inp.series;
    let first = series.first().ok_or_else(|| invalid("series", "at least one replica is required"))?;
    let (jn, kn) = (first.phis, first.psis);
    if inp.phis.len() != jn || inp.psis.len() != kn {
        return Err(Error::Shape(alloc::format!("series are {jn}×{kn}, families {}×{}", inp.phis.len(), inp.psis.len())));
    }
    let phi_norms: Vec<f64> = inp.phis.iter().map(TrigPoly::l2_norm).collect();
    let psi_norms: Vec<f64> = inp.psis.iter().map(TrigPoly::l2_norm).collect();
    let psi_family = PsiFamily::new(inp.psis);
    let grad_l2 = psi_family.gradient_l2_norms();
    let grad_sup = psi_family.gradient_sup_norms();
    let mut results = Vec::new();

    let fc = final_configuration_check(series, inp.targets, AXIOM_SIGMAS)?;
    results.push(AxiomResult { axiom: 1, name: "final configuration", passed: fc.passed(), worst: fc.worst_z(), limit: AXIOM_SIGMAS });

    // Θ_t(φ, 1) is an exact quadrature; Θ_t(1, ψ) carries the quadrature error of ψ∘g_t.
    let quad = 2.0 / (inp.particles as f64).sqrt();
    let (mut worst_psi_one, mut worst_phi_one) = (0.0f64, 0.0f64);
    let mut phi_one_limit_ratio = 0.0f64;
    for s in series {
        for n in 0..=s.steps {
            for j in 0..jn {
                for k in 0..kn {
                    if inp.psis[k].degree() == 0 {
                        let want = inp.phis[j].mean() * inp.psis[k].mean();
                        worst_psi_one = worst_psi_one.max((s.theta(n, j, k) - want).abs());
                    }
                    if inp.phis[j].degree() == 0 {
                        let want = inp.phis[j].mean() * inp.psis[k].mean();
                        let d = (s.theta(n, j, k) - want).abs();
                        worst_phi_one = worst_phi_one.max(d);
                        let lim = quad * phi_norms[j] * psi_norms[k];
                        if lim > 0.0 {
                            phi_one_limit_ratio = phi_one_limit_ratio.max(d / lim);
                        } else if d > EXACT_FLOOR {
                            phi_one_limit_ratio = f64::INFINITY;
                        }
                    }
                }
            }
        }
    }
    results.push(AxiomResult {
        axiom: 2,
        name: "mass conservation, psi = 1",
        passed: worst_psi_one <= EXACT_FLOOR,
        worst: worst_psi_one,
        limit: EXACT_FLOOR,
    });
    results.push(AxiomResult {
        axiom: 2,
        name: "incompressibility, phi = 1",
        passed: phi_one_limit_ratio <= 1.0,
        worst: worst_phi_one,
        limit: quad,
    });

    let br = bracket_check(series, &phi_norms, &grad_l2, AXIOM_BRACKET_TOLERANCE, AXIOM_BOUND_SLACK)?;
    results.push(AxiomResult {
        axiom: 3,
        name: "bracket identity",
        passed: br.relative_error() <= AXIOM_BRACKET_TOLERANCE,
        worst: br.relative_error(),
        limit: AXIOM_BRACKET_TOLERANCE,
    });
    let worst_rate_ratio = br
        .results
        .iter()
        .filter_map(|r| r.rate_bound.map(|b| if b > 0.0 { r.max_realized_rate / b } else if r.max_realized_rate > EXACT_FLOOR { f64::INFINITY } else { 0.0 }))
        .fold(0.0f64, f64::max);
    results.push(AxiomResult {
        axiom: 4,
        name: "bracket bound",
        passed: br.bound_holds(),
        worst: worst_rate_ratio,
        limit: 1.0 + AXIOM_BOUND_SLACK,
    });

    // E ∫ (DΘ̃)² ≤ 2 𝓔′ ‖φ‖² ‖∇ψ‖²_∞, compared with the estimate's own error bar.
    let mut worst5 = 0.0f64;
    let mut ok5 = true;
    for j in 0..jn {
        for k in 0..kn {
            let xs: Vec<f64> = series.iter().map(|s| s.drift_square_integral(j, k)).collect();
            let e = MeanEstimate::from_samples(&xs);
            let rhs = 2.0 * inp.energy * phi_norms[j].powi(2) * grad_sup[k].powi(2);
            if e.mean > rhs + AXIOM_SIGMAS * e.std_error + EXACT_FLOOR {
                ok5 = false;
            }
            if rhs > 0.0 {
                worst5 = worst5.max(e.mean / rhs);
            } else if e.mean > EXACT_FLOOR {
                worst5 = f64::INFINITY;
            }
        }
    }
    results.push(AxiomResult { axiom: 5, name: "drift energy bound", passed: ok5, worst: worst5, limit: 1.0 });

    let mut worst6 = 0.0f64;
    for s in series {
        for j in 0..jn {
            for k in 0..kn {
                worst6 = worst6.max((s.theta(0, j, k) - inp.phis[j].l2_inner(&inp.psis[k])).abs());
            }
        }
    }
    results.push(AxiomResult { axiom: 6, name: "initial configuration", passed: worst6 <= AXIOM_EXACT_SLACK, worst: worst6, limit: AXIOM_EXACT_SLACK });

    let nonneg_phi: Vec<bool> = inp.phis.iter().map(certainly_nonnegative).collect();
    let nonneg_psi: Vec<bool> = inp.psis.iter().map(certainly_nonnegative).collect();
    let mut min7 = f64::INFINITY;
    let mut worst8 = f64::NEG_INFINITY;
    for s in series {
        for n in 0..=s.steps {
            for j in 0..jn {
                for k in 0..kn {
                    let t = s.theta(n, j, k);
                    if nonneg_phi[j] && nonneg_psi[k] {
                        min7 = min7.min(t);
                    }
                    worst8 = worst8.max(t.abs() - phi_norms[j] * psi_norms[k]);
                }
            }
        }
    }
    if !min7.is_finite() {
        min7 = 0.0;
    }
    results.push(AxiomResult { axiom: 7, name: "nonnegativity", passed: min7 >= -EXACT_FLOOR, worst: min7, limit: -EXACT_FLOOR });
    results.push(AxiomResult { axiom: 8, name: "L2 bound", passed: worst8 <= AXIOM_EXACT_SLACK, worst: worst8, limit: AXIOM_EXACT_SLACK });
    Ok(AxiomReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{initial_grid, FlowConfig, FlowSimulator};
    use crate::runner::Sequential;
    use crate::spectral::WaveVector;

    fn record(
        basis: &NoiseBasis,
        drift: &SpectralField,
        side: usize,
        dt: f64,
        replicas: u32,
        phis: &[TrigPoly],
        psis: &[TrigPoly],
        pairs: &[BracketPair],
    ) -> Vec<TransportSeries> {
        let init = initial_grid(side).unwrap();
        let pf = PhiFamily::from_polys(phis, &init);
        let sf = PsiFamily::new(psis);
        let sim = FlowSimulator::new(basis, drift, FlowConfig::new(dt, 11)).unwrap();
        sim.run_all(
            &Sequential,
            replicas,
            &init,
            |_| {
                let k = TransportKernel::new(&pf, &sf, basis, pairs, None).unwrap();
                TransportRecorder::new(k, basis, sim.steps(), dt)
            },
            |r, _| r.finish(),
        )
        .unwrap()
    }

    #[test]
    fn constant_pair_is_constant() {
        let one = [TrigPoly::constant(1.0)];
        let basis = NoiseBasis::build(2, 0.0).unwrap();
        let s = record(&basis, &SpectralField::zero(0.05).unwrap(), 8, 0.01, 2, &one, &one, &[]);
        for r in &s {
            assert!(r.theta.iter().all(|t| (t - 1.0).abs() < 1e-14));
        }
    }

    #[test]
    fn frozen_flow_keeps_initial_inner_products() {
        let phis = [TrigPoly::cos(1, 0), &TrigPoly::sin(0, 1) + &TrigPoly::constant(0.3)];
        let psis = [TrigPoly::cos(1, 0), TrigPoly::sin(1, 1)];
        let s = record(&NoiseBasis::empty(), &SpectralField::zero(0.05).unwrap(), 8, 0.01, 1, &phis, &psis, &[]);
        for n in 0..=s[0].steps {
            for j in 0..2 {
                for k in 0..2 {
                    assert!((s[0].theta(n, j, k) - phis[j].l2_inner(&psis[k])).abs() < 1e-14);
                }
            }
        }
        assert_eq!(martingale_residual(&s, &[1.0; 2], &[1.0; 2]).worst(), 0.0);
    }

    #[test]
    fn constant_drift_matches_shifted_inner_product() {
        let c = [0.8, -0.5];
        let phis = [&TrigPoly::cos(1, 0) + &TrigPoly::sin(1, 2)];
        let psis = [&TrigPoly::cos(1, 0) + &TrigPoly::cos(1, 2).scale(0.5)];
        let s = record(&NoiseBasis::empty(), &SpectralField::constant(c, 0.5).unwrap(), 16, 0.01, 1, &phis, &psis, &[]);
        for n in [0, 17, 50] {
            let t = n as f64 * 0.01;
            let want = heat_shift_moment(&phis[0], &psis[0], t, c, 0.0);
            assert!((s[0].theta(n, 0, 0) - want).abs() < 1e-6, "step {n}");
        }
    }

    #[test]
    fn heat_shift_moment_closed_form() {
        let f = TrigPoly::cos(1, 0);
        // ∫ cos θ₁ · e^{-t/2} cos(θ₁ + a) = ½ e^{-t/2} cos a
        let m = heat_shift_moment(&f, &f, 2.0, [0.25, 0.0], 1.0);
        assert!((m - 0.5 * (-1.0f64).exp() * 0.5f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn empty_basis_has_no_bracket() {
        let phis = [TrigPoly::constant(1.0)];
        let psis = [TrigPoly::cos(1, 0)];
        let pairs = [BracketPair::diagonal(0, 0)];
        let s = record(&NoiseBasis::empty(), &SpectralField::constant([0.3, 0.1], 0.1).unwrap(), 8, 0.01, 2, &phis, &psis, &pairs);
        let r = bracket_check(&s, &[1.0], &[1.0], 0.1, 0.1).unwrap();
        assert_eq!(r.results[0].predicted, 0.0);
        assert!(r.results[0].realized < 1e-20);
        assert!(r.passed());
    }

    #[test]
    fn constant_psi_has_zero_predicted_bracket() {
        let phis = [&TrigPoly::cos(0, 1) + &TrigPoly::constant(1.0)];
        let psis = [TrigPoly::constant(1.0), TrigPoly::cos(1, 0)];
        let pairs = [BracketPair::diagonal(0, 0), BracketPair::new((0, 0), (0, 1))];
        let basis = NoiseBasis::build(2, 0.0).unwrap();
        let s = record(&basis, &SpectralField::zero(0.05).unwrap(), 8, 0.01, 2, &phis, &psis, &pairs);
        for r in &s {
            assert_eq!(r.predicted_bracket(0), 0.0);
            assert_eq!(r.predicted_bracket(1), 0.0);
            assert!(r.realized_bracket(&pairs[0]).abs() < 1e-20);
        }
    }

    #[test]
    fn degree_guard() {
        let psis = PsiFamily::new(&[TrigPoly::cos(3, 0)]);
        let b = SpectralField::constant_in_time(crate::spectral::VectorTrigPoly::a_mode(WaveVector::new(2, 2)), 1.0).unwrap();
        assert!(check_degree(&psis, &b, 5).is_ok());
        assert!(matches!(check_degree(&psis, &b, 4), Err(Error::DegreeOverflow { degree: 5, max: 4 })));
    }

    #[test]
    fn sparse_family_concat() {
        let init = initial_grid(4).unwrap();
        let a = PhiFamily::from_polys(&[TrigPoly::constant(1.0)], &init);
        let b = PhiFamily::from_polys(&[TrigPoly::cos(1, 0), TrigPoly::constant(2.0)], &init);
        let c = a.concat(&b).unwrap();
        assert_eq!(c.len(), 3);
        assert!((c.masses()[0] - 1.0).abs() < 1e-15);
        assert!(c.masses()[1].abs() < 1e-15);
        assert!((c.masses()[2] - 2.0).abs() < 1e-15);
        assert!((c.norms()[1] - 0.5f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn random_family_alternates_nonnegative() {
        let f = random_test_family(6, 2, 4, 0);
        assert_eq!(f.len(), 6);
        for (i, p) in f.iter().enumerate() {
            assert_eq!(certainly_nonnegative(p), i % 2 == 1, "function {i}");
        }
    }
}
