//! Factorization `g = g̃ ∘ ψ` of a flow with drift into the drift-free flow
//! `g̃` and the random flow `ψ` of the pulled-back drift
//! `b̃ = (T g̃)⁻¹ b(g̃)`, and the transport functional built from it.
//!
//! `g̃` and its Jacobian are integrated with the Stratonovich Heun scheme on
//! the record grid. `b̃` lives on that Lagrangian grid and is interpolated
//! bilinearly in space, piecewise constant in time.

use alloc::vec;
use alloc::vec::Vec;

use crate::drift::{CompiledDrift, SpectralField};
use crate::energy::{generalized_energy_lb, GradientFamily, PartitionFamily};
use crate::error::{invalid, Error, Result};
use crate::flow::{initial_grid, step_count, FlowConfig, Frame, Observer};
use crate::rng::BrownianIncrements;
use crate::spectral::{torus_distance, uniform_grid, Cx, FourierTable, NoiseBasis, PolyEval, TorusPoint, TrigPoly, VectorEval};
use crate::transport::{BracketPair, PhiFamily, PsiFamily, TransportKernel, TransportRecorder, TransportSeries};
use crate::TAU;
#[allow(unused_imports)]
use crate::Float;

/// Row-major 2×2 matrix `[a, b; c, d]`.
pub type Mat2 = [f64; 4];

const IDENTITY: Mat2 = [1.0, 0.0, 0.0, 1.0];

fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

pub fn det(m: &Mat2) -> f64 {
    m[0] * m[3] - m[1] * m[2]
}

/// One step's noise field `v = Σ σ_i ΔW_i` and its Jacobian matrix.
struct NoiseStep {
    v: VectorEval,
    dv: [PolyEval; 4],
}

impl NoiseStep {
    fn new(basis: &NoiseBasis, dw: &[f64]) -> Self {
        let v = basis.combine(dw);
        let dv = [
            v.u1.derivative(0).compile(),
            v.u1.derivative(1).compile(),
            v.u2.derivative(0).compile(),
            v.u2.derivative(1).compile(),
        ];
        Self { v: v.compile(), dv }
    }

    fn jacobian(&self, t: &FourierTable) -> Mat2 {
        [self.dv[0].eval(t), self.dv[1].eval(t), self.dv[2].eval(t), self.dv[3].eval(t)]
    }
}

/// Heun integration of `dg = σ(g) ∘ dW + b(t, g) dt` sharing the noise of a
/// flow simulation with the same `(seed, replica, dt)`.
struct Heun<'a> {
    basis: &'a NoiseBasis,
    drift: Option<CompiledDrift>,
    noise: BrownianIncrements,
    dt: f64,
    steps: usize,
    table: FourierTable,
}

impl<'a> Heun<'a> {
    fn new(basis: &'a NoiseBasis, drift: Option<&SpectralField>, horizon: f64, config: &FlowConfig, replica: u32) -> Result<Self> {
        let dt = config.dt;
        let steps = step_count(horizon, dt)?;
        let mut degree = basis.degree();
        if let Some(d) = drift {
            degree = degree.max(d.degree());
        }
        Ok(Self {
            basis,
            drift: drift.map(SpectralField::compile),
            noise: BrownianIncrements::new(config.seed, replica, basis.len(), dt, config.substeps),
            dt,
            steps,
            table: FourierTable::new(degree),
        })
    }

    fn noise_step(&self, step: usize, dw: &mut [f64]) -> NoiseStep {
        self.noise.fill(step, dw);
        NoiseStep::new(self.basis, dw)
    }

    fn drift_at(&self, t: f64) -> Option<&VectorEval> {
        self.drift.as_ref().map(|d| d.at(t))
    }

    /// Advances `p` (and `jac` if given) across one step.
    fn advance(&mut self, ns: &NoiseStep, b: Option<&VectorEval>, p: TorusPoint, jac: Option<&mut Mat2>) -> TorusPoint {
        let dt = self.dt;
        self.table.fill(p);
        let v0 = ns.v.eval(&self.table);
        let b0 = b.map_or([0.0; 2], |b| b.eval(&self.table));
        let d0 = jac.is_some().then(|| ns.jacobian(&self.table));
        let pred = p.translate([v0[0] + b0[0] * dt, v0[1] + b0[1] * dt]);
        self.table.fill(pred);
        let v1 = ns.v.eval(&self.table);
        let b1 = b.map_or([0.0; 2], |b| b.eval(&self.table));
        if let (Some(j), Some(d0)) = (jac, d0) {
            let d1 = ns.jacobian(&self.table);
            let k0 = mat_mul(&d0, j);
            let jp: Mat2 = core::array::from_fn(|i| j[i] + k0[i]);
            let k1 = mat_mul(&d1, &jp);
            for i in 0..4 {
                j[i] += 0.5 * (k0[i] + k1[i]);
            }
        }
        p.translate([
            0.5 * (v0[0] + v1[0]) + 0.5 * (b0[0] + b1[0]) * dt,
            0.5 * (v0[1] + v1[1]) + 0.5 * (b0[1] + b1[1]) * dt,
        ])
    }

    /// Terminal positions of the flow started at `initial`.
    fn run(mut self, replica: u32, initial: &[TorusPoint]) -> Result<Vec<TorusPoint>> {
        let mut pos = initial.to_vec();
        let mut dw = vec![0.0; self.basis.len()];
        for step in 0..self.steps {
            let ns = self.noise_step(step, &mut dw);
            let b = self.drift_at(step as f64 * self.dt).cloned();
            for p in pos.iter_mut() {
                *p = self.advance(&ns, b.as_ref(), *p, None);
                if !p.is_finite() {
                    return Err(Error::NonFinite { replica, step: step + 1 });
                }
            }
        }
        Ok(pos)
    }
}

/// Drift-free flow `g̃` on a uniform grid with its Jacobian at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleFlowRecord {
    pub basis: NoiseBasis,
    pub side: usize,
    pub dt: f64,
    pub steps: usize,
    pub config: FlowConfig,
    pub replica: u32,
    /// `(steps + 1) × side²`, step-major.
    pub positions: Vec<TorusPoint>,
    pub jacobians: Vec<Mat2>,
    /// `steps × modes` Brownian increments.
    pub increments: Vec<f64>,
}

impl MartingaleFlowRecord {
    pub fn particles(&self) -> usize {
        self.side * self.side
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn initial(&self) -> &[TorusPoint] {
        self.positions_at(0)
    }

    pub fn positions_at(&self, step: usize) -> &[TorusPoint] {
        let n = self.particles();
        &self.positions[step * n..(step + 1) * n]
    }

    pub fn jacobians_at(&self, step: usize) -> &[Mat2] {
        let n = self.particles();
        &self.jacobians[step * n..(step + 1) * n]
    }

    pub fn increments_at(&self, step: usize) -> &[f64] {
        let m = self.basis.len();
        &self.increments[step * m..(step + 1) * m]
    }

    /// `(min, max)` of `det J` over particles and steps.
    pub fn det_range(&self) -> (f64, f64) {
        self.jacobians.iter().map(det).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)))
    }

    pub fn max_det_deviation(&self) -> f64 {
        let (lo, hi) = self.det_range();
        (1.0 - lo).max(hi - 1.0)
    }

    /// Frames of `g̃` carrying the Itô noise `Σσ_i(g̃)ΔW_i` and `b(t, g̃)` for
    /// a transport kernel; `drift` is only reported, not followed.
    pub fn replay(&self, drift: &SpectralField, observer: &mut impl FnMut(&Frame<'_>)) -> Result<()> {
        check_horizon(self, drift)?;
        let n = self.particles();
        let compiled = drift.compile();
        let mut table = FourierTable::new(self.basis.degree().max(drift.degree()));
        let mut phases = vec![[Cx::ONE; 2]; n];
        let mut noise = vec![[0.0; 2]; n];
        let mut bvals = vec![[0.0; 2]; n];
        for step in 0..=self.steps {
            let time = step as f64 * self.dt;
            let terminal = step == self.steps;
            let b = compiled.at(time);
            let v = (!terminal).then(|| self.basis.combine_compiled(self.increments_at(step)));
            for (i, p) in self.positions_at(step).iter().enumerate() {
                phases[i] = FourierTable::base_phases(*p);
                table.fill_phases(phases[i]);
                bvals[i] = b.eval(&table);
                if let Some(v) = &v {
                    noise[i] = v.eval(&table);
                }
            }
            observer(&Frame {
                replica: self.replica,
                step,
                steps: self.steps,
                time,
                dt: self.dt,
                positions: self.positions_at(step),
                phases: &phases,
                increments: if terminal { &[] } else { self.increments_at(step) },
                noise: if terminal { &[] } else { &noise },
                drift: &bvals,
            });
        }
        Ok(())
    }
}

fn check_horizon(record: &MartingaleFlowRecord, drift: &SpectralField) -> Result<()> {
    if (drift.horizon() - record.horizon()).abs() > 1e-9 * drift.horizon().max(1.0) {
        return Err(invalid("drift", alloc::format!("horizon {} differs from the record's {}", drift.horizon(), record.horizon())));
    }
    Ok(())
}

/// Integrates `g̃` and `J = T g̃` on a `side × side` grid by Heun steps.
pub fn martingale_flow_with_jacobian(
    basis: &NoiseBasis,
    side: usize,
    horizon: f64,
    config: &FlowConfig,
    replica: u32,
) -> Result<MartingaleFlowRecord> {
    let initial = initial_grid(side)?;
    let dt = config.dt;
    let mut heun = Heun::new(basis, None, horizon, config, replica)?;
    let steps = heun.steps;
    let n = initial.len();
    let mut positions = Vec::with_capacity((steps + 1) * n);
    let mut jacobians = Vec::with_capacity((steps + 1) * n);
    let mut increments = Vec::with_capacity(steps * basis.len());
    positions.extend_from_slice(&initial);
    jacobians.resize(n, IDENTITY);
    let mut dw = vec![0.0; basis.len()];
    for step in 0..steps {
        let ns = heun.noise_step(step, &mut dw);
        increments.extend_from_slice(&dw);
        let base = step * n;
        for i in 0..n {
            let mut j = jacobians[base + i];
            let p = heun.advance(&ns, None, positions[base + i], Some(&mut j));
            if !p.is_finite() {
                return Err(Error::NonFinite { replica, step: step + 1 });
            }
            let d = det(&j);
            if !(d > 0.0) {
                return Err(Error::Orientation { replica, step: step + 1, det: d });
            }
            positions.push(p);
            jacobians.push(j);
        }
    }
    Ok(MartingaleFlowRecord { basis: basis.clone(), side, dt, steps, config: *config, replica, positions, jacobians, increments })
}

/// Periodic bilinear interpolation of samples on the uniform grid.
fn bilinear<T: Copy>(side: usize, p: TorusPoint, mut at: impl FnMut(usize) -> T, mut mix: impl FnMut(&[(T, f64); 4]) -> T) -> T {
    let h = TAU / side as f64;
    let [x, y] = p.coords();
    let (fx, fy) = (x / h, y / h);
    let (a, b) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - a, fy - b);
    let a0 = (a as usize) % side;
    let b0 = (b as usize) % side;
    let (a1, b1) = ((a0 + 1) % side, (b0 + 1) % side);
    mix(&[
        (at(a0 * side + b0), (1.0 - tx) * (1.0 - ty)),
        (at(a1 * side + b0), tx * (1.0 - ty)),
        (at(a0 * side + b1), (1.0 - tx) * ty),
        (at(a1 * side + b1), tx * ty),
    ])
}

fn mix_vec(c: &[([f64; 2], f64); 4]) -> [f64; 2] {
    c.iter().fold([0.0; 2], |acc, (v, w)| [acc[0] + w * v[0], acc[1] + w * v[1]])
}

fn mix_scalar(c: &[(f64, f64); 4]) -> f64 {
    c.iter().map(|(v, w)| v * w).sum()
}

/// `b̃(t_n, y) = J(t_n, y)⁻¹ b(t_n, g̃_{t_n}(y))` on the record grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PullbackDrift {
    pub side: usize,
    pub dt: f64,
    pub steps: usize,
    /// `(steps + 1) × side²`, step-major.
    pub values: Vec<[f64; 2]>,
}

impl PullbackDrift {
    pub fn at_step(&self, step: usize) -> &[[f64; 2]] {
        let n = self.side * self.side;
        &self.values[step * n..(step + 1) * n]
    }

    /// Bilinear in space; the value of step `n` holds on `[t_n, t_{n+1})`.
    pub fn interpolate(&self, step: usize, p: TorusPoint) -> [f64; 2] {
        let v = self.at_step(step);
        bilinear(self.side, p, |i| v[i], mix_vec)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v[0].is_finite() && v[1].is_finite())
    }
}

pub fn pullback_drift(record: &MartingaleFlowRecord, drift: &SpectralField) -> Result<PullbackDrift> {
    check_horizon(record, drift)?;
    let compiled = drift.compile();
    let mut table = FourierTable::new(drift.degree());
    let mut values = Vec::with_capacity(record.positions.len());
    for step in 0..=record.steps {
        let b = compiled.at(step as f64 * record.dt);
        for (p, j) in record.positions_at(step).iter().zip(record.jacobians_at(step)) {
            table.fill(*p);
            let v = b.eval(&table);
            let d = det(j);
            values.push([(j[3] * v[0] - j[1] * v[1]) / d, (-j[2] * v[0] + j[0] * v[1]) / d]);
        }
    }
    let out = PullbackDrift { side: record.side, dt: record.dt, steps: record.steps, values };
    if !out.is_finite() {
        return Err(Error::NonFinite { replica: record.replica, step: 0 });
    }
    Ok(out)
}

/// `ψ_T` of `dψ = b̃(t, ψ) dt` by classical Runge–Kutta with `b̃` frozen per step.
pub fn integrate_pullback(pullback: &PullbackDrift, initial: &[TorusPoint]) -> Result<Vec<TorusPoint>> {
    let dt = pullback.dt;
    let mut pos = initial.to_vec();
    for step in 0..pullback.steps {
        for p in pos.iter_mut() {
            let k1 = pullback.interpolate(step, *p);
            let k2 = pullback.interpolate(step, p.translate([0.5 * dt * k1[0], 0.5 * dt * k1[1]]));
            let k3 = pullback.interpolate(step, p.translate([0.5 * dt * k2[0], 0.5 * dt * k2[1]]));
            let k4 = pullback.interpolate(step, p.translate([dt * k3[0], dt * k3[1]]));
            *p = p.translate([
                dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
                dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
            ]);
            if !p.is_finite() {
                return Err(Error::NonFinite { replica: 0, step: step + 1 });
            }
        }
    }
    Ok(pos)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationReport {
    pub particles: usize,
    /// `max_x d(g_T(x), g̃_T(ψ_T(x)))`.
    pub max_distance: f64,
    pub mean_distance: f64,
    pub det_range: (f64, f64),
}

/// Compares `g_T` with `g̃_T ∘ ψ_T` on a `particle_side²` grid, `g` being the
/// Heun flow of `σ ∘ dW + b dt` with the record's noise.
pub fn factorize(drift: &SpectralField, record: &MartingaleFlowRecord, particle_side: usize) -> Result<FactorizationReport> {
    let pullback = pullback_drift(record, drift)?;
    let x = initial_grid(particle_side)?;
    let psi_t = integrate_pullback(&pullback, &x)?;
    let horizon = record.horizon();
    let composed = Heun::new(&record.basis, None, horizon, &record.config, record.replica)?.run(record.replica, &psi_t)?;
    let direct = Heun::new(&record.basis, Some(drift), horizon, &record.config, record.replica)?.run(record.replica, &x)?;
    let d: Vec<f64> = composed.iter().zip(&direct).map(|(a, b)| torus_distance(*a, *b)).collect();
    Ok(FactorizationReport {
        particles: d.len(),
        max_distance: d.iter().cloned().fold(0.0, f64::max),
        mean_distance: d.iter().sum::<f64>() / d.len() as f64,
        det_range: record.det_range(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakDivergenceReport {
    /// Per test, `max_n |∫ ⟨∇ϕ, b̃(t_n)⟩|` by grid quadrature.
    pub residuals: Vec<f64>,
    pub tolerance: f64,
}

impl WeakDivergenceReport {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_residual() <= self.tolerance
    }
}

/// Weak divergence of `b̃` against each test function.
pub fn weak_divergence_check(record: &MartingaleFlowRecord, drift: &SpectralField, tests: &[TrigPoly], tolerance: f64) -> Result<WeakDivergenceReport> {
    let pullback = pullback_drift(record, drift)?;
    let grid = record.initial();
    let grads: Vec<Vec<[f64; 2]>> = tests
        .iter()
        .map(|t| {
            let g = t.gradient();
            grid.iter().map(|p| g.eval(*p)).collect()
        })
        .collect();
    let n = grid.len() as f64;
    let residuals = grads
        .iter()
        .map(|g| {
            (0..=pullback.steps)
                .map(|s| {
                    let sum: f64 = pullback.at_step(s).iter().zip(g).map(|(b, g)| b[0] * g[0] + b[1] * g[1]).sum();
                    (sum / n).abs()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(WeakDivergenceReport { residuals, tolerance })
}

/// Solutions of `∂θ/∂t = −b̃·∇θ` sampled on the record grid at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaField {
    pub side: usize,
    pub record_side: usize,
    pub steps: usize,
    /// `(steps + 1) × record_side²`.
    pub samples: Vec<f64>,
    /// `∫θ_t` per step.
    pub mass: Vec<f64>,
    /// `∫θ_t²` per step.
    pub l2: Vec<f64>,
    /// Full-resolution fields at the requested steps.
    pub snapshots: Vec<(usize, Vec<f64>)>,
}

impl ThetaField {
    pub fn samples_at(&self, step: usize) -> &[f64] {
        let n = self.record_side * self.record_side;
        &self.samples[step * n..(step + 1) * n]
    }

    pub fn mass_drift(&self) -> f64 {
        self.mass.iter().map(|m| (m - self.mass[0]).abs()).fold(0.0, f64::max)
    }

    /// Relative loss of `∫θ²` between the first and last step.
    pub fn l2_decay(&self) -> f64 {
        let (a, b) = (self.l2[0], *self.l2.last().unwrap_or(&self.l2[0]));
        if a > 0.0 {
            (a - b) / a
        } else {
            0.0
        }
    }
}

/// Values of `f` on the uniform `side × side` grid.
pub fn sample_grid(side: usize, f: impl Fn(TorusPoint) -> f64) -> Vec<f64> {
    uniform_grid(side).into_iter().map(f).collect()
}

/// Semi-Lagrangian solves on a `side²` grid, one per initial field, sharing
/// the departure points; an additive correction keeps `∫θ` fixed.
pub fn transport_pde(pullback: &PullbackDrift, initial: &[Vec<f64>], side: usize, snapshot_steps: &[usize]) -> Result<Vec<ThetaField>> {
    let rs = pullback.side;
    if side == 0 || side % rs != 0 {
        return Err(invalid("side", alloc::format!("must be a positive multiple of the record side {rs}")));
    }
    if initial.iter().any(|f| f.len() != side * side) {
        return Err(Error::Shape(alloc::format!("initial fields must have {} samples", side * side)));
    }
    let factor = side / rs;
    let nodes = uniform_grid(side);
    let n = nodes.len() as f64;
    let dt = pullback.dt;
    let sub = |f: &[f64]| -> Vec<f64> {
        (0..rs).flat_map(|a| (0..rs).map(move |b| (a, b))).map(|(a, b)| f[a * factor * side + b * factor]).collect()
    };
    let moments = |f: &[f64]| (f.iter().sum::<f64>() / n, f.iter().map(|x| x * x).sum::<f64>() / n);
    let mut fields: Vec<Vec<f64>> = initial.to_vec();
    let mut out: Vec<ThetaField> = fields
        .iter()
        .map(|f| {
            let (m, q) = moments(f);
            ThetaField {
                side,
                record_side: rs,
                steps: pullback.steps,
                samples: sub(f),
                mass: vec![m],
                l2: vec![q],
                snapshots: if snapshot_steps.contains(&0) { vec![(0, f.clone())] } else { Vec::new() },
            }
        })
        .collect();
    let mut departures: Vec<TorusPoint> = Vec::with_capacity(nodes.len());
    let mut next = vec![0.0; nodes.len()];
    for step in 0..pullback.steps {
        departures.clear();
        for p in &nodes {
            let b = pullback.interpolate(step, *p);
            departures.push(p.translate([-dt * b[0], -dt * b[1]]));
        }
        for (f, o) in fields.iter_mut().zip(out.iter_mut()) {
            for (x, d) in next.iter_mut().zip(&departures) {
                *x = bilinear(side, *d, |i| f[i], mix_scalar);
            }
            let target = o.mass[0];
            let shift = target - next.iter().sum::<f64>() / n;
            for x in next.iter_mut() {
                *x += shift;
            }
            core::mem::swap(f, &mut next);
            let (m, q) = moments(f);
            o.mass.push(m);
            o.l2.push(q);
            o.samples.extend(sub(f));
            if snapshot_steps.contains(&(step + 1)) {
                o.snapshots.push((step + 1, f.clone()));
            }
        }
    }
    Ok(out)
}

/// `Θ^{σ,b}_t(φ_j, ψ_k) = ∫ θ^j_t(y) ψ_k(g̃_t(y)) dy` with its drift,
/// Laplacian and martingale integrands, as a transport series.
pub fn theta_sigma_b(
    record: &MartingaleFlowRecord,
    drift: &SpectralField,
    thetas: &[ThetaField],
    psis: &PsiFamily,
    pairs: &[BracketPair],
) -> Result<TransportSeries> {
    let n = record.particles();
    if thetas.iter().any(|t| t.record_side != record.side || t.steps != record.steps) {
        return Err(Error::Shape("θ fields do not match the record grid".into()));
    }
    let rows_at = |step: usize| -> PhiFamily {
        let rows = (0..n)
            .map(|p| thetas.iter().enumerate().map(|(j, t)| (j as u32, t.samples_at(step)[p] / n as f64)).collect())
            .collect();
        PhiFamily::from_rows(thetas.len(), rows)
    };
    let initial = rows_at(0);
    let kernel = TransportKernel::new(&initial, psis, &record.basis, pairs, None)?;
    let mut rec = TransportRecorder::new(kernel, &record.basis, record.steps, record.dt);
    record.replay(drift, &mut |frame| {
        let phis = rows_at(frame.step);
        rec.record_with(frame, &phis);
    })?;
    Ok(rec.finish())
}

/// `Θ^g` of the Heun flow with drift that shares the record's noise, on the record grid.
pub fn companion_series(record: &MartingaleFlowRecord, drift: &SpectralField, phis: &[TrigPoly], psis: &PsiFamily) -> Result<TransportSeries> {
    check_horizon(record, drift)?;
    let init = record.initial().to_vec();
    let pf = PhiFamily::from_polys(phis, &init);
    let kernel = TransportKernel::new(&pf, psis, &record.basis, &[], None)?;
    let mut rec = TransportRecorder::new(kernel, &record.basis, record.steps, record.dt);
    let mut heun = Heun::new(&record.basis, Some(drift), record.horizon(), &record.config, record.replica)?;
    let compiled = drift.compile();
    let mut pos = init;
    let mut phases = vec![[Cx::ONE; 2]; pos.len()];
    let mut noise = vec![[0.0; 2]; pos.len()];
    let mut bvals = vec![[0.0; 2]; pos.len()];
    let mut dw = vec![0.0; record.basis.len()];
    let mut table = FourierTable::new(record.basis.degree().max(drift.degree()));
    for step in 0..=record.steps {
        let time = step as f64 * record.dt;
        let terminal = step == record.steps;
        let ns = (!terminal).then(|| heun.noise_step(step, &mut dw));
        let b = compiled.at(time);
        for (i, p) in pos.iter().enumerate() {
            phases[i] = FourierTable::base_phases(*p);
            table.fill_phases(phases[i]);
            bvals[i] = b.eval(&table);
            if let Some(ns) = &ns {
                noise[i] = ns.v.eval(&table);
            }
        }
        rec.observe(&Frame {
            replica: record.replica,
            step,
            steps: record.steps,
            time,
            dt: record.dt,
            positions: &pos,
            phases: &phases,
            increments: if terminal { &[] } else { &dw },
            noise: if terminal { &[] } else { &noise },
            drift: &bvals,
        });
        if let Some(ns) = ns {
            for p in pos.iter_mut() {
                *p = heun.advance(&ns, Some(b), *p, None);
                if !p.is_finite() {
                    return Err(Error::NonFinite { replica: record.replica, step: step + 1 });
                }
            }
        }
    }
    Ok(rec.finish())
}

/// Configuration of the full construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaBConfig {
    pub pde_side: usize,
    /// Partition level of the energy lower bound.
    pub partition: usize,
    pub slack: f64,
    /// Tolerance of `|Θ^{σ,b} − Θ^g|` on unit-norm pairs.
    pub match_tolerance: f64,
    pub identity_tolerance: f64,
}

impl Default for SigmaBConfig {
    fn default() -> Self {
        Self { pde_side: 128, partition: 8, slack: 0.05, match_tolerance: 0.05, identity_tolerance: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaBReport {
    pub drift_energy: f64,
    pub energy_lb: f64,
    /// `max_{t,j,k} |Θ^{σ,b}_t − Θ^g_t|` over unit-norm pairs.
    pub match_distance: f64,
    /// `‖Θ_T − Θ_0 − ∫(½cL) − M − ∫D‖ / ‖∫D‖` over all pairs.
    pub identity_error: f64,
    pub max_mass_drift: f64,
    pub max_l2_decay: f64,
    pub config: SigmaBConfig,
}

impl SigmaBReport {
    pub fn energy_bound_holds(&self) -> bool {
        self.energy_lb <= self.drift_energy * (1.0 + self.config.slack)
    }

    pub fn matches_flow(&self) -> bool {
        self.match_distance <= self.config.match_tolerance
    }

    pub fn identity_holds(&self) -> bool {
        self.identity_error <= self.config.identity_tolerance
    }

    pub fn passed(&self) -> bool {
        self.energy_bound_holds() && self.matches_flow() && self.identity_holds()
    }
}

/// Builds `Θ^{σ,b}` for unit-norm `phis × psis` and for the partition ×
/// gradient families, and checks it against the flow-built `Θ^g`.
pub fn sigma_b_construction(
    record: &MartingaleFlowRecord,
    drift: &SpectralField,
    phis: &[TrigPoly],
    psis: &[TrigPoly],
    config: &SigmaBConfig,
) -> Result<SigmaBReport> {
    let unit = |f: &TrigPoly| {
        let n = f.l2_norm();
        if n > 0.0 {
            f.scale(1.0 / n)
        } else {
            f.clone()
        }
    };
    let phis: Vec<TrigPoly> = phis.iter().map(unit).collect();
    let psis: Vec<TrigPoly> = psis.iter().map(unit).collect();
    let pullback = pullback_drift(record, drift)?;
    let side = config.pde_side;

    let init: Vec<Vec<f64>> = phis.iter().map(|f| sample_grid(side, |p| f.eval(p))).collect();
    let thetas = transport_pde(&pullback, &init, side, &[])?;
    let sf = PsiFamily::new(&psis);
    let built = theta_sigma_b(record, drift, &thetas, &sf, &[])?;
    let flow = companion_series(record, drift, &phis, &sf)?;
    let match_distance = built.theta.iter().zip(&flow.theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..phis.len() {
        for k in 0..psis.len() {
            let r = built.martingale_residual(j, k);
            let d = built.integrated_drift(j, k);
            num += r * r;
            den += d * d;
        }
    }
    let identity_error = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };

    let partition = PartitionFamily::new(config.partition)?;
    let grid = uniform_grid(side);
    let mut bumps = vec![vec![0.0; grid.len()]; partition.len()];
    for (i, p) in grid.iter().enumerate() {
        for (j, v) in partition.eval(*p) {
            bumps[j as usize][i] = v;
        }
    }
    let masses: Vec<f64> = bumps.iter().map(|b| b.iter().sum::<f64>() / grid.len() as f64).collect();
    let bump_thetas = transport_pde(&pullback, &bumps, side, &[])?;
    let grads = GradientFamily::new().psi_family();
    let energy_series = theta_sigma_b(record, drift, &bump_thetas, &grads, &[])?;
    let energy_lb = generalized_energy_lb(core::slice::from_ref(&energy_series), &masses)?.value;

    let all = thetas.iter().chain(&bump_thetas);
    Ok(SigmaBReport {
        drift_energy: crate::drift::drift_energy(drift).value(),
        energy_lb,
        match_distance,
        identity_error,
        max_mass_drift: all.clone().map(ThetaField::mass_drift).fold(0.0, f64::max),
        max_l2_decay: all.map(ThetaField::l2_decay).fold(0.0, f64::max),
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{VectorTrigPoly, WaveVector};

    fn smooth_drift(horizon: f64) -> SpectralField {
        let v = VectorTrigPoly::a_mode(WaveVector::new(1, 0))
            .scale(0.5)
            .add(&VectorTrigPoly::b_mode(WaveVector::new(1, 1)).scale(0.3))
            .add(&VectorTrigPoly::constant([0.2, -0.1]));
        SpectralField::constant_in_time(v, horizon).unwrap()
    }

    #[test]
    fn empty_basis_freezes_martingale_flow() {
        let r = martingale_flow_with_jacobian(&NoiseBasis::empty(), 4, 0.1, &FlowConfig::new(0.01, 1), 0).unwrap();
        assert_eq!(r.positions_at(r.steps), r.initial());
        assert!(r.jacobians.iter().all(|j| *j == IDENTITY));
    }

    #[test]
    fn determinant_stays_near_one() {
        let basis = NoiseBasis::build(1, 0.0).unwrap();
        let r = martingale_flow_with_jacobian(&basis, 8, 0.25, &FlowConfig::new(1e-3, 3), 0).unwrap();
        let (lo, hi) = r.det_range();
        assert!(lo >= 0.9 && hi <= 1.1, "{lo} {hi}");
    }

    #[test]
    fn zero_drift_factorizes_trivially() {
        let basis = NoiseBasis::build(1, 0.0).unwrap();
        let r = martingale_flow_with_jacobian(&basis, 8, 0.1, &FlowConfig::new(1e-2, 2), 0).unwrap();
        let rep = factorize(&SpectralField::zero(0.1).unwrap(), &r, 4).unwrap();
        assert!(rep.max_distance < 1e-12, "{}", rep.max_distance);
    }

    #[test]
    fn empty_basis_reduces_to_ode_flow() {
        let r = martingale_flow_with_jacobian(&NoiseBasis::empty(), 64, 0.25, &FlowConfig::new(1e-3, 2), 0).unwrap();
        let rep = factorize(&smooth_drift(0.25), &r, 8).unwrap();
        assert!(rep.max_distance < 5e-3, "{}", rep.max_distance);
    }

    #[test]
    fn pde_with_constant_field_shifts() {
        let c = [0.7, -0.4];
        let pb = PullbackDrift { side: 16, dt: 0.01, steps: 20, values: vec![c; 21 * 256] };
        let phi = &TrigPoly::cos(1, 0) + &TrigPoly::sin(0, 1);
        let out = transport_pde(&pb, &[sample_grid(64, |p| phi.eval(p))], 64, &[20]).unwrap();
        let exact = phi.shifted([0.2 * c[0], 0.2 * c[1]]);
        let last = &out[0].snapshots[0].1;
        let err = uniform_grid(64).iter().zip(last).map(|(p, v)| (exact.eval(*p) - v).abs()).fold(0.0, f64::max);
        assert!(err < 0.02, "{err}");
        assert!(out[0].mass_drift() < 1e-12);

        let still = PullbackDrift { values: vec![[0.0; 2]; 21 * 256], ..pb };
        let out = transport_pde(&still, &[sample_grid(32, |p| phi.eval(p))], 32, &[]).unwrap();
        let n = 16 * 16;
        for (a, b) in out[0].samples_at(20).iter().zip(out[0].samples_at(0)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out[0].samples.len(), 21 * n);
    }

    #[test]
    fn zero_drift_construction_matches_martingale_flow() {
        let basis = NoiseBasis::build(1, 0.0).unwrap();
        let r = martingale_flow_with_jacobian(&basis, 16, 0.05, &FlowConfig::new(1e-2, 4), 0).unwrap();
        let zero = SpectralField::zero(0.05).unwrap();
        let phi = [TrigPoly::cos(1, 0)];
        let psis = PsiFamily::new(&[TrigPoly::sin(0, 1), TrigPoly::cos(1, 0)]);
        let th = transport_pde(&pullback_drift(&r, &zero).unwrap(), &[sample_grid(32, |p| phi[0].eval(p))], 32, &[]).unwrap();
        let built = theta_sigma_b(&r, &zero, &th, &psis, &[]).unwrap();
        let flow = companion_series(&r, &zero, &phi, &psis).unwrap();
        for (a, b) in built.theta.iter().zip(&flow.theta) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weak_divergence_vanishes_without_noise() {
        let r = martingale_flow_with_jacobian(&NoiseBasis::empty(), 16, 0.05, &FlowConfig::new(1e-2, 1), 0).unwrap();
        let rep = weak_divergence_check(&r, &smooth_drift(0.05), GradientFamily::new().functions.as_slice(), 1e-12).unwrap();
        assert!(rep.passed(), "{:?}", rep.residuals);
    }
}
