//! Energy minimization under a prescribed final configuration, and flows
//! with a prescribed rough drift.
//!
//! The search runs over a finite spectral drift family. The endpoint
//! constraint `E[Θ_T(φ_j, ψ_k)] = target(j, k)` is enforced by a quadratic
//! penalty whose Monte Carlo estimate always uses the same noise (common
//! random numbers), which makes the objective a smooth deterministic function
//! of the drift coefficients.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::drift::{drift_energy, regularize, SpectralField, TimeBin};
use crate::energy::{flow_energy, EnergyEstimate, EnergyRecorder, GradientFamily, PartitionFamily};
use crate::error::{invalid, Error, Result};
use crate::flow::{initial_grid, EmpiricalCoupling, FlowConfig, FlowSimulator, Frame, Observer};
use crate::rng::{CounterRng, Stream};
use crate::runner::ReplicaRunner;
use crate::spectral::{NoiseBasis, TrigPoly, VectorTrigPoly, WaveVector};
use crate::stats::MeanEstimate;
use crate::transport::{final_configuration_check, heat_shift_moment, FinalConfigurationReport, PhiFamily, PsiFamily, TransportKernel, TransportRecorder, TransportSeries};
#[allow(unused_imports)]
use crate::Float;

/// A prescribed joint law of `(x, g_T(x))`, seen through test moments.
#[derive(Debug, Clone, PartialEq)]
pub enum FinalConfiguration {
    Coupling(EmpiricalCoupling),
    /// Row-major `∫ φ_j(x) ψ_k(y) η(dx, dy)`.
    Moments(Vec<f64>),
}

/// Moment table of `eta` over the given families.
pub fn moment_targets(eta: &FinalConfiguration, phis: &[TrigPoly], psis: &[TrigPoly]) -> Result<Vec<f64>> {
    match eta {
        FinalConfiguration::Coupling(c) => {
            Ok(phis.iter().flat_map(|f| psis.iter().map(move |g| c.moment(f, g))).collect())
        }
        FinalConfiguration::Moments(m) => {
            if m.len() != phis.len() * psis.len() {
                return Err(Error::Shape(alloc::format!("{} moments for {}×{} families", m.len(), phis.len(), psis.len())));
            }
            Ok(m.clone())
        }
    }
}

/// Moments of `y = x + shift + B`, `B` a Brownian motion of covariance `κ t Id`.
pub fn heat_shift_targets(phis: &[TrigPoly], psis: &[TrigPoly], t: f64, velocity: [f64; 2], kappa: f64) -> Vec<f64> {
    phis.iter().flat_map(|f| psis.iter().map(move |g| heat_shift_moment(f, g, t, velocity, kappa))).collect()
}

/// Test families of the endpoint constraint: seven low harmonics against the
/// four embedding functions, 28 moments in total.
pub fn constraint_families() -> (Vec<TrigPoly>, Vec<TrigPoly>) {
    let phis = vec![
        TrigPoly::cos(1, 0),
        TrigPoly::sin(1, 0),
        TrigPoly::cos(0, 1),
        TrigPoly::sin(0, 1),
        TrigPoly::cos(1, 1),
        TrigPoly::sin(1, 1),
        TrigPoly::cos(1, -1),
    ];
    (phis, GradientFamily::new().functions.to_vec())
}

/// Drifts with `bins` equal time bins, each a constant vector plus
/// `(a_k cos k·θ + b_k sin k·θ) k⊥/|k|` for canonical `0 < |k|∞ ≤ kb`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftParameterization {
    pub kb: u32,
    pub bins: usize,
    pub horizon: f64,
    waves: Vec<WaveVector>,
}

impl DriftParameterization {
    pub fn new(kb: u32, bins: usize, horizon: f64) -> Result<Self> {
        if bins == 0 {
            return Err(invalid("bins", "must be positive"));
        }
        if !(horizon > 0.0) {
            return Err(invalid("horizon", "must be positive"));
        }
        let d = kb as i32;
        let mut waves = Vec::new();
        for k1 in 0..=d {
            for k2 in -d..=d {
                let k = WaveVector::new(k1, k2);
                if !k.is_zero() && k.is_canonical() {
                    waves.push(k);
                }
            }
        }
        Ok(Self { kb, bins, horizon, waves })
    }

    pub fn per_bin(&self) -> usize {
        2 + 2 * self.waves.len()
    }

    /// `bins × (2 + 2·#{canonical k})`.
    pub fn dim(&self) -> usize {
        self.bins * self.per_bin()
    }

    pub fn to_field(&self, params: &[f64]) -> Result<SpectralField> {
        if params.len() != self.dim() {
            return Err(Error::Shape(alloc::format!("{} parameters for dimension {}", params.len(), self.dim())));
        }
        let w = self.horizon / self.bins as f64;
        let bins = params
            .chunks_exact(self.per_bin())
            .enumerate()
            .map(|(i, c)| {
                let mut v = VectorTrigPoly::constant([c[0], c[1]]);
                for (m, k) in self.waves.iter().enumerate() {
                    let p = k.perp();
                    let n = k.norm_sq().sqrt();
                    let u = [p[0] / n, p[1] / n];
                    let (a, b) = (c[2 + 2 * m], c[3 + 2 * m]);
                    v = v.add(&VectorTrigPoly::mode(*k, [a * u[0], a * u[1]], [b * u[0], b * u[1]]));
                }
                TimeBin { t_start: i as f64 * w, t_end: (i + 1) as f64 * w, field: v }
            })
            .collect();
        SpectralField::new(self.horizon, bins)
    }

    /// `e_i` with `drift_energy = Σ e_i θ_i²`.
    pub fn energy_weights(&self) -> Vec<f64> {
        let w = self.horizon / self.bins as f64;
        (0..self.dim()).map(|i| if i % self.per_bin() < 2 { 0.5 * w } else { 0.25 * w }).collect()
    }

    pub fn energy(&self, params: &[f64]) -> f64 {
        self.energy_weights().iter().zip(params).map(|(e, x)| e * x * x).sum()
    }
}

/// Records `Θ_T` only, at the terminal frame.
#[derive(Debug, Clone)]
pub struct TerminalMoments<'a> {
    kernel: TransportKernel<'a>,
    theta: Vec<f64>,
}

impl<'a> TerminalMoments<'a> {
    pub fn new(kernel: TransportKernel<'a>) -> Self {
        Self { kernel, theta: Vec::new() }
    }

    pub fn finish(self) -> Vec<f64> {
        self.theta
    }
}

impl Observer for TerminalMoments<'_> {
    fn observe(&mut self, frame: &Frame<'_>) {
        if frame.is_terminal() {
            self.theta = self.kernel.compute(frame).theta.clone();
        }
    }
}

/// Monte Carlo estimator of the endpoint moments of a drift.
#[derive(Debug, Clone)]
pub struct MomentProblem {
    pub basis: NoiseBasis,
    pub horizon: f64,
    pub grid_side: usize,
    pub dt: f64,
    pub replicas: u32,
    pub phis: Vec<TrigPoly>,
    pub psis: Vec<TrigPoly>,
}

impl MomentProblem {
    /// Replica means of `Θ_T(φ_j, ψ_k)` and their standard errors.
    pub fn moments<R: ReplicaRunner + ?Sized>(&self, drift: &SpectralField, seed: u64, runner: &R) -> Result<(Vec<f64>, Vec<f64>)> {
        let init = initial_grid(self.grid_side)?;
        let pf = PhiFamily::from_polys(&self.phis, &init);
        let sf = PsiFamily::new(&self.psis);
        let sim = FlowSimulator::new(&self.basis, drift, FlowConfig::new(self.dt, seed))?;
        let kernel = TransportKernel::new(&pf, &sf, &self.basis, &[], None)?;
        let per = sim.run_all(runner, self.replicas, &init, |_| TerminalMoments::new(kernel.clone()), |o, _| o.finish())?;
        let m = self.phis.len() * self.psis.len();
        let mut mean = vec![0.0; m];
        let mut se = vec![0.0; m];
        for i in 0..m {
            let xs: Vec<f64> = per.iter().map(|v| v[i]).collect();
            let e = MeanEstimate::from_samples(&xs);
            mean[i] = e.mean;
            se[i] = e.std_error;
        }
        Ok((mean, se))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Gauss–Newton when the dimension allows it, otherwise SPSA.
    Auto,
    GaussNewton,
    Spsa,
}

/// Dimension up to which [`Method::Auto`] uses finite-difference Gauss–Newton.
pub const GAUSS_NEWTON_MAX_DIM: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// Seed of the common random numbers.
    pub seed: u64,
    /// Penalty weights, used in order with warm restarts until the residual
    /// meets `residual_threshold`.
    pub lambdas: Vec<f64>,
    pub max_evaluations: usize,
    pub method: Method,
    pub fd_step: f64,
    /// Residual `max |r|` above which the result is flagged as not converged.
    pub residual_threshold: f64,
    pub spsa_a: f64,
    pub spsa_c: f64,
    pub spsa_stability: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            lambdas: vec![10.0, 100.0],
            max_evaluations: 400,
            method: Method::Auto,
            fd_step: 1e-2,
            residual_threshold: 0.05,
            spsa_a: 0.05,
            spsa_c: 0.05,
            spsa_stability: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRecord {
    pub index: usize,
    pub lambda: f64,
    pub energy: f64,
    /// `max_{j,k} |Ê[Θ_T] − target|`.
    pub residual: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub evaluations: usize,
    pub lambda: f64,
    /// Best-so-far values under the current penalty weight.
    pub energy: f64,
    pub residual: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizationResult {
    pub params: Vec<f64>,
    pub drift: SpectralField,
    pub energy: f64,
    pub residual: f64,
    pub objective: f64,
    pub initial_objective: f64,
    pub seed: u64,
    pub method: Method,
    pub evaluations: Vec<EvaluationRecord>,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
}

struct Evaluated {
    params: Vec<f64>,
    energy: f64,
    misfit: Vec<f64>,
}

impl Evaluated {
    fn objective(&self, lambda: f64) -> f64 {
        self.energy + lambda * self.misfit.iter().map(|r| r * r).sum::<f64>()
    }

    fn residual(&self) -> f64 {
        self.misfit.iter().fold(0.0, |a, r| a.max(r.abs()))
    }
}

struct Search<'p, R: ReplicaRunner + ?Sized> {
    problem: &'p MomentProblem,
    param: &'p DriftParameterization,
    targets: &'p [f64],
    runner: &'p R,
    seed: u64,
    budget: usize,
    history: Vec<Evaluated>,
    records: Vec<EvaluationRecord>,
}

impl<R: ReplicaRunner + ?Sized> Search<'_, R> {
    fn exhausted(&self) -> bool {
        self.history.len() >= self.budget
    }

    fn eval(&mut self, params: &[f64], lambda: f64) -> Result<usize> {
        let drift = self.param.to_field(params)?;
        let (m, _) = self.problem.moments(&drift, self.seed, self.runner)?;
        let misfit: Vec<f64> = m.iter().zip(self.targets).map(|(a, b)| a - b).collect();
        let e = Evaluated { params: params.to_vec(), energy: self.param.energy(params), misfit };
        self.records.push(EvaluationRecord {
            index: self.history.len(),
            lambda,
            energy: e.energy,
            residual: e.residual(),
            objective: e.objective(lambda),
        });
        self.history.push(e);
        Ok(self.history.len() - 1)
    }

    fn best(&self, lambda: f64) -> usize {
        let mut best = 0;
        for (i, e) in self.history.iter().enumerate() {
            if e.objective(lambda) < self.history[best].objective(lambda) {
                best = i;
            }
        }
        best
    }
}

/// Minimizes `drift_energy(b) + λ Σ (Ê[Θ_T(φ_j, ψ_k)](b) − target)²` over the
/// parameterization, starting from `b = 0`.
pub fn minimize_energy<R: ReplicaRunner + ?Sized>(
    problem: &MomentProblem,
    targets: &[f64],
    param: &DriftParameterization,
    opt: &OptimizerConfig,
    runner: &R,
) -> Result<MinimizationResult> {
    if targets.len() != problem.phis.len() * problem.psis.len() {
        return Err(Error::Shape(alloc::format!("{} targets for the constraint families", targets.len())));
    }
    if opt.lambdas.is_empty() || opt.lambdas.iter().any(|l| !(*l >= 0.0)) {
        return Err(invalid("lambdas", "need at least one nonnegative penalty weight"));
    }
    if opt.max_evaluations == 0 {
        return Err(invalid("max_evaluations", "must be positive"));
    }
    let method = match opt.method {
        Method::Auto if param.dim() <= GAUSS_NEWTON_MAX_DIM => Method::GaussNewton,
        Method::Auto => Method::Spsa,
        m => m,
    };
    let mut s = Search {
        problem,
        param,
        targets,
        runner,
        seed: opt.seed,
        budget: opt.max_evaluations,
        history: Vec::new(),
        records: Vec::new(),
    };
    let mut iterations = Vec::new();
    s.eval(&vec![0.0; param.dim()], opt.lambdas[0])?;
    let stages = opt.lambdas.len();
    let mut last = opt.lambdas[0];
    for (stage, &lambda) in opt.lambdas.iter().enumerate() {
        let stage_budget = s.history.len() + (opt.max_evaluations - s.history.len()) / (stages - stage);
        let start = s.best(lambda);
        match method {
            Method::GaussNewton => gauss_newton(&mut s, start, lambda, stage_budget, opt, &mut iterations)?,
            _ => spsa(&mut s, start, lambda, stage_budget, opt, &mut iterations)?,
        }
        last = lambda;
        // A stiffer penalty past this point only buys energy to fit Monte Carlo noise.
        if s.history[s.best(lambda)].residual() <= opt.residual_threshold {
            break;
        }
    }
    let b = s.best(last);
    let best = &s.history[b];
    let residual = best.residual();
    Ok(MinimizationResult {
        drift: param.to_field(&best.params)?,
        params: best.params.clone(),
        energy: best.energy,
        residual,
        objective: best.objective(last),
        initial_objective: s.history[0].objective(last),
        seed: opt.seed,
        method,
        converged: residual <= opt.residual_threshold,
        evaluations: s.records,
        iterations,
    })
}

fn push_iteration<R: ReplicaRunner + ?Sized>(s: &Search<'_, R>, lambda: f64, out: &mut Vec<IterationRecord>) {
    let b = &s.history[s.best(lambda)];
    out.push(IterationRecord {
        iteration: out.len(),
        evaluations: s.history.len(),
        lambda,
        energy: b.energy,
        residual: b.residual(),
        objective: b.objective(lambda),
    });
}

/// Levenberg–Marquardt on the stacked residual `[√e_i θ_i ; √λ r(θ)]` with a
/// forward-difference Jacobian of the moment misfit.
fn gauss_newton<R: ReplicaRunner + ?Sized>(
    s: &mut Search<'_, R>,
    start: usize,
    lambda: f64,
    budget: usize,
    opt: &OptimizerConfig,
    iterations: &mut Vec<IterationRecord>,
) -> Result<()> {
    let n = s.param.dim();
    let m = s.targets.len();
    let sqrt_e: Vec<f64> = s.param.energy_weights().iter().map(|e| e.sqrt()).collect();
    let sl = lambda.sqrt();
    let mut cur = start;
    let mut mu = 1e-3;
    while s.history.len() + n < budget {
        let x = s.history[cur].params.clone();
        let r0 = s.history[cur].misfit.clone();
        let mut jac = DMatrix::<f64>::zeros(n + m, n);
        for i in 0..n {
            jac[(i, i)] = sqrt_e[i];
        }
        for i in 0..n {
            let mut xp = x.clone();
            xp[i] += opt.fd_step;
            let idx = s.eval(&xp, lambda)?;
            for j in 0..m {
                jac[(n + j, i)] = sl * (s.history[idx].misfit[j] - r0[j]) / opt.fd_step;
            }
        }
        let mut res = DVector::<f64>::zeros(n + m);
        for i in 0..n {
            res[i] = sqrt_e[i] * x[i];
        }
        for j in 0..m {
            res[n + j] = sl * r0[j];
        }
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &res;
        let f0 = s.history[cur].objective(lambda);
        let mut improved = false;
        while !s.exhausted() && s.history.len() < budget {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += mu * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&grad))) else {
                mu *= 10.0;
                continue;
            };
            let xn: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + d).collect();
            let idx = s.eval(&xn, lambda)?;
            if s.history[idx].objective(lambda) < f0 {
                cur = idx;
                mu = (mu / 3.0).max(1e-9);
                improved = true;
                break;
            }
            mu *= 4.0;
            if mu > 1e8 {
                break;
            }
        }
        // Finite-difference probes may themselves improve on the iterate.
        let best = s.best(lambda);
        if s.history[best].objective(lambda) < s.history[cur].objective(lambda) {
            cur = best;
            improved = true;
        }
        push_iteration(s, lambda, iterations);
        if !improved {
            break;
        }
    }
    Ok(())
}

/// Simultaneous-perturbation stochastic approximation with Rademacher
/// directions; the best evaluated point is kept.
fn spsa<R: ReplicaRunner + ?Sized>(
    s: &mut Search<'_, R>,
    start: usize,
    lambda: f64,
    budget: usize,
    opt: &OptimizerConfig,
    iterations: &mut Vec<IterationRecord>,
) -> Result<()> {
    let n = s.param.dim();
    let rng = CounterRng::new(opt.seed, Stream::Perturbation, iterations.len() as u32);
    let mut x = s.history[start].params.clone();
    let mut k = 0u64;
    while s.history.len() + 2 <= budget {
        let ak = opt.spsa_a / (k as f64 + 1.0 + opt.spsa_stability).powf(0.602);
        let ck = opt.spsa_c / (k as f64 + 1.0).powf(0.101);
        let delta: Vec<f64> = (0..n).map(|i| rng.sign(k * n as u64 + i as u64)).collect();
        let xp: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + ck * d).collect();
        let xm: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a - ck * d).collect();
        let ip = s.eval(&xp, lambda)?;
        let im = s.eval(&xm, lambda)?;
        let diff = (s.history[ip].objective(lambda) - s.history[im].objective(lambda)) / (2.0 * ck);
        for (xi, d) in x.iter_mut().zip(&delta) {
            *xi -= ak * diff * d;
        }
        k += 1;
        push_iteration(s, lambda, iterations);
    }
    Ok(())
}

/// Parameters of a prescribed-drift or mixture experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub grid_side: usize,
    pub flow: FlowConfig,
    pub replicas: u32,
    /// Partition level of the energy lower bound.
    pub partition: usize,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrescribedDriftLevel {
    pub eps: f64,
    pub energy: f64,
    /// `‖Σ(∫DΘ̃^ε − ∫Θ^ε(φ, div(ψ b)))‖ / ‖∫Θ^ε(φ, div(ψ b))‖` over all pairs.
    pub identity_error: f64,
    /// Per-pair relative errors, row-major.
    pub pair_errors: Vec<f64>,
    pub energy_lb: EnergyEstimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrescribedDriftReport {
    pub rough_energy: f64,
    pub slack: f64,
    pub levels: Vec<PrescribedDriftLevel>,
}

impl PrescribedDriftReport {
    /// `𝓔(b_ε) ≤ 𝓔(b)` at every level, exactly.
    pub fn energies_contract(&self) -> bool {
        self.levels.iter().all(|l| l.energy <= self.rough_energy)
    }

    /// Energies are nondecreasing as `ε` decreases (levels ordered by decreasing `ε`).
    pub fn energies_monotone(&self) -> bool {
        self.levels.windows(2).all(|w| w[1].energy >= w[0].energy)
    }

    pub fn identity_decreasing(&self) -> bool {
        self.levels.windows(2).all(|w| w[1].identity_error < w[0].identity_error)
    }

    pub fn final_identity_error(&self) -> f64 {
        self.levels.last().map_or(f64::INFINITY, |l| l.identity_error)
    }

    pub fn lower_bounds_hold(&self) -> bool {
        self.levels.iter().all(|l| l.energy_lb.value <= self.rough_energy * (1.0 + self.slack))
    }
}

/// Flows of the regularized drifts `b_ε` and the integrated drift identity
/// `∫ DΘ̃^ε = ∫ Θ^ε(φ, div(ψ b))` along the ladder.
pub fn prescribed_drift_flow<R: ReplicaRunner + ?Sized>(
    b_rough: &SpectralField,
    eps_ladder: &[f64],
    basis: &NoiseBasis,
    phis: &[TrigPoly],
    psis: &[TrigPoly],
    config: &ExperimentConfig,
    runner: &R,
) -> Result<PrescribedDriftReport> {
    let init = initial_grid(config.grid_side)?;
    let test_phis = PhiFamily::from_polys(phis, &init);
    let partition = PartitionFamily::new(config.partition)?;
    let bumps = partition.phi_family(&init);
    let sf = PsiFamily::new(psis);
    let grads = GradientFamily::new().psi_family();
    let (jn, kn) = (phis.len(), psis.len());
    let mut levels = Vec::new();
    for &eps in eps_ladder {
        let b = regularize(b_rough, eps)?;
        let sim = FlowSimulator::new(basis, &b, config.flow)?;
        let tk = TransportKernel::new(&test_phis, &sf, basis, &[], Some(b_rough))?;
        let ek = TransportKernel::new(&bumps, &grads, basis, &[], None)?;
        let energy_rec = EnergyRecorder::new(ek, vec![0..bumps.len()], sim.steps())?;
        let out = sim.run_all(
            runner,
            config.replicas,
            &init,
            |_| (TransportRecorder::new(tk.clone(), basis, sim.steps(), config.flow.dt), energy_rec.clone()),
            |(t, e), _| (t.finish(), e.finish()[0]),
        )?;
        let n = out.len() as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        let mut pair_errors = Vec::with_capacity(jn * kn);
        for j in 0..jn {
            for k in 0..kn {
                let d: f64 = out.iter().map(|(s, _)| s.integrated_drift(j, k)).sum::<f64>() / n;
                let r: f64 = out.iter().map(|(s, _)| s.integrated_reference(j, k)).sum::<f64>() / n;
                num += (d - r) * (d - r);
                den += r * r;
                pair_errors.push(if r != 0.0 { (d - r).abs() / r.abs() } else { (d - r).abs() });
            }
        }
        let lb: Vec<f64> = out.iter().map(|(_, e)| *e).collect();
        levels.push(PrescribedDriftLevel {
            eps,
            energy: drift_energy(&b).value(),
            identity_error: if den > 0.0 { (num / den).sqrt() } else { num.sqrt() },
            pair_errors,
            energy_lb: EnergyEstimate::from_replicas(&lb),
        });
    }
    Ok(PrescribedDriftReport { rough_energy: drift_energy(b_rough).value(), slack: config.slack, levels })
}

/// Two drifts with the same endpoint law when driven by the same noise:
/// `(c, 0)` on `[0, T]` and `(2c, 0)` on `[0, T/2]` followed by rest.
pub fn equal_target_pair(c: f64, horizon: f64) -> Result<(SpectralField, SpectralField)> {
    let b1 = SpectralField::constant([c, 0.0], horizon)?;
    let b2 = SpectralField::uniform(horizon, vec![VectorTrigPoly::constant([2.0 * c, 0.0]), VectorTrigPoly::zero()])?;
    Ok((b1, b2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureReport {
    pub energies: [f64; 2],
    /// Replicas driven by each drift.
    pub counts: [usize; 2],
    pub mixture_energy: EnergyEstimate,
    pub target: FinalConfigurationReport,
}

impl MixtureReport {
    /// `𝓔′(mixture) ≤ ½(𝓔₁ + 𝓔₂) + 3 SE`.
    pub fn convexity_holds(&self) -> bool {
        self.mixture_energy.value <= 0.5 * (self.energies[0] + self.energies[1]) + 3.0 * self.mixture_energy.std_error
    }

    pub fn passed(&self) -> bool {
        self.convexity_holds() && self.target.passed()
    }
}

/// Randomized ½–½ mixture: a fair coin per replica selects the drift.
#[allow(clippy::too_many_arguments)]
pub fn mixture_probe<R: ReplicaRunner + ?Sized>(
    basis: &NoiseBasis,
    drifts: [&SpectralField; 2],
    phis: &[TrigPoly],
    psis: &[TrigPoly],
    targets: &[f64],
    config: &ExperimentConfig,
    runner: &R,
) -> Result<MixtureReport> {
    let init = initial_grid(config.grid_side)?;
    let test_phis = PhiFamily::from_polys(phis, &init);
    let sf = PsiFamily::new(psis);
    let partition = PartitionFamily::new(config.partition)?;
    let bumps = partition.phi_family(&init);
    let grads = GradientFamily::new().psi_family();
    let sims = [FlowSimulator::new(basis, drifts[0], config.flow)?, FlowSimulator::new(basis, drifts[1], config.flow)?];
    if sims[0].steps() != sims[1].steps() {
        return Err(invalid("drifts", "both drifts must share the horizon"));
    }
    let steps = sims[0].steps();
    let tk = TransportKernel::new(&test_phis, &sf, basis, &[], None)?;
    let ek = TransportKernel::new(&bumps, &grads, basis, &[], None)?;
    let energy_rec = EnergyRecorder::new(ek, vec![0..bumps.len()], steps)?;
    let coin = CounterRng::new(config.flow.seed, Stream::Coin, 0);
    let out = runner
        .map(config.replicas, |r| {
            let pick = usize::from(coin.coin(u64::from(r)));
            let mut obs = (TransportRecorder::new(tk.clone(), basis, steps, config.flow.dt), energy_rec.clone());
            sims[pick].run_replica(r, &init, &mut obs)?;
            Ok::<_, Error>((pick, obs.0.finish(), obs.1.finish()[0]))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut counts = [0usize; 2];
    for (p, _, _) in &out {
        counts[*p] += 1;
    }
    let series: Vec<TransportSeries> = out.iter().map(|(_, s, _)| s.clone()).collect();
    let lb: Vec<f64> = out.iter().map(|(_, _, e)| *e).collect();
    Ok(MixtureReport {
        energies: [flow_energy(drifts[0]).value(), flow_energy(drifts[1]).value()],
        counts,
        mixture_energy: EnergyEstimate::from_replicas(&lb),
        target: final_configuration_check(&series, targets, 3.0)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::rough_drift;
    use crate::flow::endpoint_coupling;
    use crate::runner::Sequential;

    #[test]
    fn parameterization_energy_is_exact() {
        let p = DriftParameterization::new(1, 2, 0.5).unwrap();
        assert_eq!(p.dim(), 2 * (2 + 2 * 4));
        let x: Vec<f64> = (0..p.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = p.to_field(&x).unwrap();
        assert!((p.energy(&x) - drift_energy(&f).value()).abs() < 1e-14);
    }

    #[test]
    fn targets_of_simple_couplings() {
        let (phis, psis) = constraint_families();
        let diag = heat_shift_targets(&phis, &psis, 0.0, [0.0; 2], 0.0);
        for (j, f) in phis.iter().enumerate() {
            for (k, g) in psis.iter().enumerate() {
                assert!((diag[j * psis.len() + k] - f.l2_inner(g)).abs() < 1e-15);
            }
        }
        let flow = crate::flow::simulate_ensemble(
            &NoiseBasis::empty(),
            &SpectralField::zero(0.1).unwrap(),
            8,
            FlowConfig::new(0.05, 0),
            1,
            &Sequential,
        )
        .unwrap();
        let c = moment_targets(&FinalConfiguration::Coupling(endpoint_coupling(&flow)), &phis, &psis).unwrap();
        for (a, b) in c.iter().zip(&diag) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(moment_targets(&FinalConfiguration::Moments(vec![0.0; 3]), &phis, &psis).is_err());
    }

    fn small_problem() -> MomentProblem {
        let (phis, psis) = constraint_families();
        MomentProblem {
            basis: NoiseBasis::build(1, 0.0).unwrap(),
            horizon: 0.2,
            grid_side: 6,
            dt: 0.05,
            replicas: 4,
            phis,
            psis,
        }
    }

    #[test]
    fn zero_penalty_returns_zero_drift() {
        let prob = small_problem();
        let param = DriftParameterization::new(0, 1, prob.horizon).unwrap();
        let targets = heat_shift_targets(&prob.phis, &prob.psis, prob.horizon, [0.4, 0.0], 1.0);
        let opt = OptimizerConfig { lambdas: vec![0.0], max_evaluations: 12, ..Default::default() };
        let r = minimize_energy(&prob, &targets, &param, &opt, &Sequential).unwrap();
        assert!(r.params.iter().all(|x| *x == 0.0));
        assert_eq!(r.energy, 0.0);
    }

    #[test]
    fn best_so_far_never_worse_and_deterministic() {
        let prob = small_problem();
        let param = DriftParameterization::new(0, 1, prob.horizon).unwrap();
        let targets = heat_shift_targets(&prob.phis, &prob.psis, prob.horizon, [0.5, 0.0], 1.0);
        let opt = OptimizerConfig { max_evaluations: 30, ..Default::default() };
        let a = minimize_energy(&prob, &targets, &param, &opt, &Sequential).unwrap();
        let b = minimize_energy(&prob, &targets, &param, &opt, &Sequential).unwrap();
        assert_eq!(a, b);
        assert!(a.objective <= a.initial_objective);
        for w in a.iterations.windows(2) {
            if w[0].lambda == w[1].lambda {
                assert!(w[1].objective <= w[0].objective);
            }
        }
        let spsa = OptimizerConfig { method: Method::Spsa, max_evaluations: 20, ..Default::default() };
        let c = minimize_energy(&prob, &targets, &param, &spsa, &Sequential).unwrap();
        assert_eq!(c.method, Method::Spsa);
        assert!(c.objective <= c.initial_objective);
    }

    #[test]
    fn mixture_of_equal_target_drifts() {
        let (b1, b2) = equal_target_pair(0.5, 0.2).unwrap();
        assert!((flow_energy(&b2).value() - 2.0 * flow_energy(&b1).value()).abs() < 1e-14);
        let (phis, psis) = constraint_families();
        let targets = heat_shift_targets(&phis, &psis, 0.2, [0.5, 0.0], 0.0);
        let cfg = ExperimentConfig { grid_side: 8, flow: FlowConfig::new(0.02, 3), replicas: 8, partition: 4, slack: 0.05 };
        let r = mixture_probe(&NoiseBasis::empty(), [&b1, &b2], &phis, &psis, &targets, &cfg, &Sequential).unwrap();
        assert_eq!(r.counts[0] + r.counts[1], 8);
        assert!(r.target.passed(), "{:?}", r.target.worst_z());
        assert!(r.convexity_holds());
    }

    #[test]
    fn prescribed_drift_energies_contract() {
        let b = rough_drift(0.2, 2, 3, 1.0, 5).unwrap();
        let cfg = ExperimentConfig { grid_side: 8, flow: FlowConfig::new(0.01, 2), replicas: 2, partition: 2, slack: 0.05 };
        let (phis, psis) = constraint_families();
        let r = prescribed_drift_flow(&b, &[0.2, 0.1], &NoiseBasis::build(1, 0.0).unwrap(), &phis[..2], &psis, &cfg, &Sequential).unwrap();
        assert!(r.energies_contract());
        assert!(r.energies_monotone());
    }
}
