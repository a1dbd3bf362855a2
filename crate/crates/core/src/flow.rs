//! Lagrangian particle ensembles of `dg = σ(g) dW + b(t, g) dt`.
//!
//! All particles of one replica share a single Brownian path over the basis
//! modes, so the ensemble samples a stochastic flow of maps rather than
//! independent diffusions. Steps are Euler–Maruyama on the Itô form, which
//! agrees with the Stratonovich form because `Σ (σ_i·∇)σ_i = 0`.

use alloc::vec;
use alloc::vec::Vec;

use crate::drift::{CompiledDrift, SpectralField};
use crate::error::{invalid, Error, Result};
use crate::rng::BrownianIncrements;
use crate::runner::ReplicaRunner;
use crate::spectral::{uniform_grid, Cx, FourierTable, NoiseBasis, PolyEval, TorusPoint, TrigPoly, WaveVector};
use crate::stats::ComplexMeanEstimate;
#[allow(unused_imports)]
use crate::Float;

/// Number of steps `S` with `S·dt = T`, rejecting steps that do not divide the horizon.
pub fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(invalid("dt", "must be positive and finite"));
    }
    let n = (horizon / dt).round();
    if n < 1.0 || (n * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::StepDoesNotDivide { dt, horizon });
    }
    Ok(n as usize)
}

/// Numerical parameters of a simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub dt: f64,
    pub seed: u64,
    /// Brownian refinement: each step sums this many finer increments, so
    /// `(dt, 2)` and `(dt/2, 1)` see the same Brownian path.
    pub substeps: u32,
    /// Keep every `thin`-th frame in a [`PathEnsemble`] (the last frame is always kept).
    pub thin: usize,
}

impl FlowConfig {
    pub fn new(dt: f64, seed: u64) -> Self {
        Self { dt, seed, substeps: 1, thin: 1 }
    }

    pub fn with_substeps(mut self, substeps: u32) -> Self {
        self.substeps = substeps;
        self
    }

    pub fn with_thin(mut self, thin: usize) -> Self {
        self.thin = thin;
        self
    }
}

/// The state seen by an observer before step `step` is taken.
///
/// At the terminal frame (`step == steps`) `increments` and `noise` are empty.
#[derive(Debug, Clone, Copy)]
pub struct Frame<'a> {
    pub replica: u32,
    pub step: usize,
    pub steps: usize,
    pub time: f64,
    pub dt: f64,
    pub positions: &'a [TorusPoint],
    /// `[e^{iθ₁}, e^{iθ₂}]` of each position, for observers that tabulate phases.
    pub phases: &'a [[Cx; 2]],
    /// Brownian increments `ΔW_i` of this step, one per basis mode.
    pub increments: &'a [f64],
    /// `Σ_i σ_i(g) ΔW_i` per particle.
    pub noise: &'a [[f64; 2]],
    /// `b(t, g)` per particle.
    pub drift: &'a [[f64; 2]],
}

impl Frame<'_> {
    pub fn is_terminal(&self) -> bool {
        self.step == self.steps
    }
}

pub trait Observer {
    fn observe(&mut self, frame: &Frame<'_>);
}

impl<F: FnMut(&Frame<'_>)> Observer for F {
    fn observe(&mut self, frame: &Frame<'_>) {
        self(frame)
    }
}

impl<A: Observer, B: Observer> Observer for (A, B) {
    fn observe(&mut self, frame: &Frame<'_>) {
        self.0.observe(frame);
        self.1.observe(frame);
    }
}

/// Steps particle ensembles for a fixed basis, drift and step size.
#[derive(Debug, Clone)]
pub struct FlowSimulator {
    basis: NoiseBasis,
    drift: CompiledDrift,
    config: FlowConfig,
    steps: usize,
    degree: u32,
}

impl FlowSimulator {
    pub fn new(basis: &NoiseBasis, drift: &SpectralField, config: FlowConfig) -> Result<Self> {
        let steps = step_count(drift.horizon(), config.dt)?;
        if config.thin == 0 {
            return Err(invalid("thin", "must be at least 1"));
        }
        Ok(Self {
            basis: basis.clone(),
            drift: drift.compile(),
            config,
            steps,
            degree: basis.degree().max(drift.degree()),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.config.dt
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn basis(&self) -> &NoiseBasis {
        &self.basis
    }

    pub fn drift(&self) -> &SpectralField {
        self.drift.field()
    }

    pub fn horizon(&self) -> f64 {
        self.drift.field().horizon()
    }

    pub fn noise(&self, replica: u32) -> BrownianIncrements {
        BrownianIncrements::new(self.config.seed, replica, self.basis.len(), self.config.dt, self.config.substeps)
    }

    /// Runs one replica from `initial`, reporting every frame to `observer`,
    /// and returns the terminal positions.
    pub fn run_replica(
        &self,
        replica: u32,
        initial: &[TorusPoint],
        observer: &mut impl Observer,
    ) -> Result<Vec<TorusPoint>> {
        let n = initial.len();
        let dt = self.config.dt;
        let noise = self.noise(replica);
        let mut positions = initial.to_vec();
        let mut dw = vec![0.0; self.basis.len()];
        let mut disp = vec![[0.0; 2]; n];
        let mut drift = vec![[0.0; 2]; n];
        let mut phases = vec![[Cx::ONE; 2]; n];
        let mut table = FourierTable::new(self.degree);
        for step in 0..=self.steps {
            let time = step as f64 * dt;
            let terminal = step == self.steps;
            let b = self.drift.at(time);
            if terminal {
                for i in 0..n {
                    phases[i] = FourierTable::base_phases(positions[i]);
                    table.fill_phases(phases[i]);
                    drift[i] = b.eval(&table);
                }
                observer.observe(&Frame {
                    replica,
                    step,
                    steps: self.steps,
                    time,
                    dt,
                    positions: &positions,
                phases: &phases,
                    increments: &[],
                    noise: &[],
                    drift: &drift,
                });
                break;
            }
            noise.fill(step, &mut dw);
            let v = self.basis.combine_compiled(&dw);
            for i in 0..n {
                phases[i] = FourierTable::base_phases(positions[i]);
                table.fill_phases(phases[i]);
                disp[i] = v.eval(&table);
                drift[i] = b.eval(&table);
            }
            observer.observe(&Frame {
                replica,
                step,
                steps: self.steps,
                time,
                dt,
                positions: &positions,
                phases: &phases,
                increments: &dw,
                noise: &disp,
                drift: &drift,
            });
            for i in 0..n {
                let p = positions[i].translate([disp[i][0] + drift[i][0] * dt, disp[i][1] + drift[i][1] * dt]);
                if !p.is_finite() {
                    return Err(Error::NonFinite { replica, step: step + 1 });
                }
                positions[i] = p;
            }
        }
        Ok(positions)
    }

    /// Runs `replicas` replicas through `runner`, building one observer per replica
    /// with `make` and collecting `finish` of each.
    pub fn run_all<O, T, R>(
        &self,
        runner: &R,
        replicas: u32,
        initial: &[TorusPoint],
        make: impl Fn(u32) -> O + Sync + Send,
        finish: impl Fn(O, Vec<TorusPoint>) -> T + Sync + Send,
    ) -> Result<Vec<T>>
    where
        O: Observer,
        T: Send,
        R: ReplicaRunner + ?Sized,
    {
        runner
            .map(replicas, |r| {
                let mut obs = make(r);
                let last = self.run_replica(r, initial, &mut obs)?;
                Ok(finish(obs, last))
            })
            .into_iter()
            .collect()
    }

    /// Stores the full (optionally thinned) path of one replica.
    pub fn record(&self, replica: u32, initial: &[TorusPoint]) -> Result<PathEnsemble> {
        let thin = self.config.thin;
        let mut recorded_steps = Vec::new();
        let mut frames = Vec::new();
        let mut increments = Vec::with_capacity(self.steps * self.basis.len());
        let mut obs = |f: &Frame<'_>| {
            if f.step % thin == 0 || f.is_terminal() {
                recorded_steps.push(f.step);
                frames.push(f.positions.to_vec());
            }
            increments.extend_from_slice(f.increments);
        };
        self.run_replica(replica, initial, &mut obs)?;
        Ok(PathEnsemble {
            initial: initial.to_vec(),
            dt: self.config.dt,
            steps: self.steps,
            seed: self.config.seed,
            replica,
            modes: self.basis.len(),
            basis_id: self.basis.fingerprint(),
            drift_id: self.drift.field().fingerprint(),
            recorded_steps,
            frames,
            increments,
        })
    }
}

/// Uniform `side × side` grid of initial points, rejecting `side < 2`.
pub fn initial_grid(side: usize) -> Result<Vec<TorusPoint>> {
    if side < 2 {
        return Err(invalid("grid_side", "must be at least 2"));
    }
    Ok(uniform_grid(side))
}

/// Simulates `replicas` independent replicas from the `side × side` grid.
pub fn simulate_ensemble<R: ReplicaRunner + ?Sized>(
    basis: &NoiseBasis,
    drift: &SpectralField,
    grid_side: usize,
    config: FlowConfig,
    replicas: u32,
    runner: &R,
) -> Result<Vec<PathEnsemble>> {
    let sim = FlowSimulator::new(basis, drift, config)?;
    let init = initial_grid(grid_side)?;
    runner.map(replicas, |r| sim.record(r, &init)).into_iter().collect()
}

/// The recorded path of one replica.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub initial: Vec<TorusPoint>,
    pub dt: f64,
    pub steps: usize,
    pub seed: u64,
    pub replica: u32,
    pub modes: usize,
    pub basis_id: u64,
    pub drift_id: u64,
    /// Step index of each stored frame; always starts at 0 and ends at `steps`.
    pub recorded_steps: Vec<usize>,
    pub frames: Vec<Vec<TorusPoint>>,
    /// Row-major `steps × modes` Brownian increments.
    pub increments: Vec<f64>,
}

impl PathEnsemble {
    pub fn particles(&self) -> usize {
        self.initial.len()
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn terminal(&self) -> &[TorusPoint] {
        self.frames.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.recorded_steps.iter().map(move |&s| s as f64 * self.dt)
    }

    pub fn step_increments(&self, step: usize) -> &[f64] {
        &self.increments[step * self.modes..(step + 1) * self.modes]
    }

    /// Pooled mean of the standardized increments `ΔW/√dt` and the bound
    /// `4/√(S·modes)` it is expected to respect.
    pub fn noise_mean_check(&self) -> NoiseMeanCheck {
        let count = self.increments.len();
        let bound = if count == 0 { 0.0 } else { 4.0 / (count as f64).sqrt() };
        let mean = if count == 0 {
            0.0
        } else {
            self.increments.iter().sum::<f64>() / (count as f64 * self.dt.sqrt())
        };
        NoiseMeanCheck { mean, bound }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseMeanCheck {
    pub mean: f64,
    pub bound: f64,
}

impl NoiseMeanCheck {
    pub fn passed(&self) -> bool {
        self.mean.abs() <= self.bound
    }
}

/// Maximum over recorded times of `|(1/N) Σ f(g_t(x_i)) − ∫f|` for each test `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncompressibilityReport {
    pub deviations: Vec<f64>,
}

impl IncompressibilityReport {
    pub fn max_deviation(&self) -> f64 {
        self.deviations.iter().fold(0.0, |a, &b| a.max(b))
    }

    /// Combines reports over replicas by taking the worst case per test.
    pub fn merge(&mut self, other: &IncompressibilityReport) {
        for (a, b) in self.deviations.iter_mut().zip(&other.deviations) {
            *a = a.max(*b);
        }
    }
}

/// Streaming form of [`incompressibility_report`].
#[derive(Debug, Clone)]
pub struct IncompressibilityMonitor {
    tests: Vec<(PolyEval, f64)>,
    degree: u32,
    deviations: Vec<f64>,
}

impl IncompressibilityMonitor {
    pub fn new(tests: &[TrigPoly]) -> Self {
        Self {
            tests: tests.iter().map(|f| (f.compile(), f.mean())).collect(),
            degree: tests.iter().map(TrigPoly::degree).max().unwrap_or(0),
            deviations: vec![0.0; tests.len()],
        }
    }

    pub fn push(&mut self, positions: &[TorusPoint]) {
        let mut sums = vec![0.0; self.tests.len()];
        let mut table = FourierTable::new(self.degree);
        for p in positions {
            table.fill(*p);
            for (s, (f, _)) in sums.iter_mut().zip(&self.tests) {
                *s += f.eval(&table);
            }
        }
        let n = positions.len().max(1) as f64;
        for ((d, s), (_, m)) in self.deviations.iter_mut().zip(sums).zip(&self.tests) {
            *d = d.max((s / n - m).abs());
        }
    }

    pub fn report(&self) -> IncompressibilityReport {
        IncompressibilityReport { deviations: self.deviations.clone() }
    }
}

impl Observer for IncompressibilityMonitor {
    fn observe(&mut self, frame: &Frame<'_>) {
        self.push(frame.positions);
    }
}

pub fn incompressibility_report(paths: &PathEnsemble, tests: &[TrigPoly]) -> IncompressibilityReport {
    let mut m = IncompressibilityMonitor::new(tests);
    for f in &paths.frames {
        m.push(f);
    }
    m.report()
}

/// Pooled `(x, g_T(x))` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmpiricalCoupling {
    pub pairs: Vec<(TorusPoint, TorusPoint)>,
}

impl EmpiricalCoupling {
    pub fn from_terminal(initial: &[TorusPoint], terminal: &[TorusPoint]) -> Self {
        Self { pairs: initial.iter().copied().zip(terminal.iter().copied()).collect() }
    }

    pub fn extend(&mut self, other: EmpiricalCoupling) {
        self.pairs.extend(other.pairs);
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `∫ φ(x) ψ(y) η(dx, dy)` under the empirical coupling.
    pub fn moment(&self, phi: &TrigPoly, psi: &TrigPoly) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        let s: f64 = self.pairs.iter().map(|(x, y)| phi.eval(*x) * psi.eval(*y)).sum();
        s / self.pairs.len() as f64
    }
}

pub fn endpoint_coupling(ensembles: &[PathEnsemble]) -> EmpiricalCoupling {
    let mut c = EmpiricalCoupling::default();
    for e in ensembles {
        c.extend(EmpiricalCoupling::from_terminal(&e.initial, e.terminal()));
    }
    c
}

/// `E[e^{i k·X_t}]` for a diffusion with generator `(c/2)Δ` started at `x`.
pub fn heat_characteristic(k: WaveVector, x: TorusPoint, t: f64, normalization: f64) -> Cx {
    let kv = k.as_f64();
    let phase = kv[0] * x.theta1() + kv[1] * x.theta2();
    Cx::expi(phase).scale((-0.5 * normalization * k.norm_sq() * t).exp())
}

/// Monte Carlo estimate of `E[e^{i k·g_T(x)}]` from terminal samples of one starting point.
pub fn characteristic_estimate(k: WaveVector, samples: &[TorusPoint]) -> ComplexMeanEstimate {
    let kv = k.as_f64();
    let zs: Vec<(f64, f64)> = samples
        .iter()
        .map(|p| {
            let a = kv[0] * p.theta1() + kv[1] * p.theta2();
            (a.cos(), a.sin())
        })
        .collect();
    ComplexMeanEstimate::from_samples(&zs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::Sequential;
    use crate::spectral::torus_distance;

    #[test]
    fn step_count_requires_divisibility() {
        assert_eq!(step_count(0.5, 1e-3).unwrap(), 500);
        assert!(matches!(step_count(0.5, 0.3), Err(Error::StepDoesNotDivide { .. })));
        assert!(step_count(0.5, 0.0).is_err());
    }

    #[test]
    fn frozen_without_noise_or_drift() {
        let drift = SpectralField::zero(0.1).unwrap();
        let e = simulate_ensemble(&NoiseBasis::empty(), &drift, 4, FlowConfig::new(0.01, 1), 2, &Sequential).unwrap();
        for r in &e {
            assert_eq!(r.frames.len(), 11);
            for f in &r.frames {
                assert_eq!(f, &r.initial);
            }
        }
        assert!(endpoint_coupling(&e).pairs.iter().all(|(x, y)| x == y));
    }

    #[test]
    fn constant_drift_translates_the_grid() {
        let c = [0.7, -1.3];
        let drift = SpectralField::constant(c, 1.0).unwrap();
        let e = simulate_ensemble(&NoiseBasis::empty(), &drift, 3, FlowConfig::new(0.01, 0), 1, &Sequential).unwrap();
        for (x, y) in e[0].initial.iter().zip(e[0].terminal()) {
            assert!(torus_distance(x.translate(c), *y) < 1e-12);
        }
    }

    #[test]
    fn thinning_keeps_endpoints() {
        let basis = NoiseBasis::build(1, 0.0).unwrap();
        let drift = SpectralField::zero(0.1).unwrap();
        let sim = FlowSimulator::new(&basis, &drift, FlowConfig::new(0.01, 3).with_thin(3)).unwrap();
        let p = sim.record(0, &initial_grid(2).unwrap()).unwrap();
        assert_eq!(p.recorded_steps, vec![0, 3, 6, 9, 10]);
        assert_eq!(p.increments.len(), 10 * basis.len());
        let full = FlowSimulator::new(&basis, &drift, FlowConfig::new(0.01, 3)).unwrap();
        assert_eq!(full.record(0, &p.initial).unwrap().terminal(), p.terminal());
    }

    #[test]
    fn coincident_particles_stay_together() {
        let basis = NoiseBasis::build(2, 1.0).unwrap();
        let drift = SpectralField::constant_in_time(
            crate::spectral::VectorTrigPoly::a_mode(WaveVector::new(1, 1)),
            0.2,
        )
        .unwrap();
        let sim = FlowSimulator::new(&basis, &drift, FlowConfig::new(0.01, 5)).unwrap();
        let p = TorusPoint::new(1.0, 2.0);
        let out = sim.run_replica(0, &[p, p], &mut |_: &Frame<'_>| {}).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn substeps_reproduce_the_finer_path() {
        let basis = NoiseBasis::build(1, 0.0).unwrap();
        let drift = SpectralField::zero(0.1).unwrap();
        let coarse = FlowSimulator::new(&basis, &drift, FlowConfig::new(0.02, 8).with_substeps(2)).unwrap();
        let fine = FlowSimulator::new(&basis, &drift, FlowConfig::new(0.01, 8)).unwrap();
        let (c, f) = (coarse.noise(1), fine.noise(1));
        for step in 0..5 {
            for m in 0..basis.len() {
                let sum = f.increment(2 * step, m) + f.increment(2 * step + 1, m);
                assert!((c.increment(step, m) - sum).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn incompressibility_of_frozen_flow_is_exact() {
        let drift = SpectralField::zero(0.05).unwrap();
        let e = simulate_ensemble(&NoiseBasis::empty(), &drift, 8, FlowConfig::new(0.01, 1), 1, &Sequential).unwrap();
        let r = incompressibility_report(&e[0], &[TrigPoly::constant(1.0), TrigPoly::cos(1, 0)]);
        assert_eq!(r.deviations[0], 0.0);
        assert!(r.deviations[1] < 1e-15);
    }

    #[test]
    fn heat_characteristic_decays() {
        let z = heat_characteristic(WaveVector::new(1, 1), TorusPoint::new(0.0, 0.0), 1.0, 1.0);
        assert!((z.re - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(z.im, 0.0);
    }
}
