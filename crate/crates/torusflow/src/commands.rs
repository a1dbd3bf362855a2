//! The subcommands. Each one fills a run directory and returns its report.

use std::path::{Path, PathBuf};

use serde::Serialize;
use torusflow_core::decomposition::{factorize, martingale_flow_with_jacobian, pullback_drift, sample_grid, sigma_b_construction, transport_pde, weak_divergence_check, SigmaBConfig};
use torusflow_core::drift::{drift_energy, rough_drift, SpectralField};
use torusflow_core::energy::{energy_ladder, flow_energy, GradientFamily, LadderConfig};
use torusflow_core::flow::{initial_grid, FlowConfig, FlowSimulator, Frame, PathEnsemble};
use torusflow_core::spectral::{check_structure, NoiseBasis, TorusPoint, TrigPoly};
use torusflow_core::transport::{axiom_sweep, bracket_check, check_degree, AxiomInputs, BracketPair, PhiFamily, PsiFamily, TransportKernel, TransportRecorder, TransportSeries, AXIOM_BOUND_SLACK, AXIOM_BRACKET_TOLERANCE};
use torusflow_core::variational::{constraint_families, heat_shift_targets, minimize_energy, moment_targets, DriftParameterization, FinalConfiguration, Method, MinimizationResult, MomentProblem, OptimizerConfig};
use torusflow_core::Error as CoreError;

use crate::config::{BracketMode, Config, ConfigError, DriftKind, TargetSource};
use crate::format::{self, fmt, BasisDoc, FieldDoc, FormatError, TargetDoc};
use crate::manifest::{read_manifest, verify, RunDir, RunManifest};
use crate::plot::{Heatmap, LinePlot, Series};
use crate::report::{merge, Families, MergeError, Report};
use crate::runner::Parallel;

/// Largest allowed `|(1/N) Σ ψ(g_t(x_i)) − ∫ψ|` over the embedding family.
pub const INCOMPRESSIBILITY_TOLERANCE: f64 = 0.05;

/// Errors that stop a command before it can judge anything; they exit with 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    CheckBasis,
    Simulate,
    Transport,
    Energy,
    Minimize,
    Decompose,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::CheckBasis => "check-basis",
            Command::Simulate => "simulate",
            Command::Transport => "transport",
            Command::Energy => "energy",
            Command::Minimize => "minimize",
            Command::Decompose => "decompose",
        }
    }
}

fn input(e: CoreError) -> CliError {
    CliError::Input(e.to_string())
}

/// Numerical breakdowns are check failures; anything else is a bad input.
fn runtime<T>(r: Result<T, CoreError>, report: &mut Report) -> Result<Option<T>, CliError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ (CoreError::NonFinite { .. } | CoreError::Orientation { .. })) => {
            report.fail(e.to_string());
            Ok(None)
        }
        Err(e) => Err(input(e)),
    }
}

pub fn load_basis(cfg: &Config) -> Result<NoiseBasis, CliError> {
    match &cfg.basis.file {
        Some(p) => Ok(format::read_basis(p)?),
        None => NoiseBasis::build(cfg.basis.cutoff, cfg.basis.decay).map_err(input),
    }
}

pub fn load_drift(cfg: &Config) -> Result<SpectralField, CliError> {
    let d = &cfg.drift;
    let t = cfg.flow.horizon;
    let field = match d.kind {
        DriftKind::Zero => SpectralField::zero(t),
        DriftKind::Constant => SpectralField::constant(d.velocity, t),
        DriftKind::Rough => rough_drift(t, d.bins, d.cutoff, d.amplitude, d.seed),
        DriftKind::File => {
            let p = d.file.as_ref().ok_or_else(|| CliError::Input("drift.file is not set".into()))?;
            let f = format::read_field(p)?;
            if (f.horizon() - t).abs() > 1e-12 * t {
                return Err(CliError::Input(format!("{}: drift horizon {} differs from flow.T = {t}", p.display(), f.horizon())));
            }
            Ok(f)
        }
    };
    field.map_err(input)
}

/// Velocity of a drift that is constant in space and time.
pub fn constant_velocity(drift: &SpectralField) -> Option<[f64; 2]> {
    let bins = drift.bins();
    let first = bins.first()?;
    if bins.iter().any(|b| b.field.degree() > 0 || b.field != first.field) {
        return None;
    }
    Some([first.field.u1.mean(), first.field.u2.mean()])
}

pub fn families(cfg: &Config) -> Result<(Vec<TrigPoly>, Vec<TrigPoly>, Families), CliError> {
    let parse = |v: &[String]| v.iter().map(|s| format::parse_trig(s)).collect::<Result<Vec<_>, _>>();
    let phis = parse(&cfg.transport.phis)?;
    let psis = parse(&cfg.transport.psis)?;
    if phis.is_empty() || psis.is_empty() {
        return Err(CliError::Input("transport.phis and transport.psis must be nonempty".into()));
    }
    Ok((phis, psis, Families { phis: cfg.transport.phis.clone(), psis: cfg.transport.psis.clone() }))
}

fn flow_params(r: &mut Report, cfg: &Config) {
    let f = &cfg.flow;
    r.param("dt", f.dt).param("T", f.horizon).param("grid", f.grid as f64).param("replicas", f64::from(f.replicas)).param("seed", f.seed as f64);
}

fn svg(run: &mut RunDir, cfg: &Config, name: &str, body: String) -> Result<(), CliError> {
    if cfg.output.svg {
        run.write(name, body.as_bytes())?;
    }
    Ok(())
}

/// Low-discrepancy points on the torus.
pub fn check_points(n: usize) -> Vec<TorusPoint> {
    const A: f64 = 0.754_877_666_246_692_7;
    const B: f64 = 0.569_840_290_998_053_3;
    (0..n).map(|i| TorusPoint::new(torusflow_core::TAU * ((0.5 + i as f64 * A) % 1.0), torusflow_core::TAU * ((0.5 + i as f64 * B) % 1.0))).collect()
}

fn check_basis(cfg: &Config, run: &mut RunDir) -> Result<Report, CliError> {
    let basis = load_basis(cfg)?;
    let rep = check_structure(&basis, &check_points(cfg.basis.check_points));
    let mut r = Report::new(Command::CheckBasis.name());
    r.check_le("divergence", rep.max_divergence, rep.tolerance)
        .check_le("covariance deviation", rep.max_covariance_deviation, rep.tolerance)
        .check_le("self advection", rep.max_self_advection, rep.tolerance)
        .param("cutoff", f64::from(basis.cutoff))
        .param("decay", basis.decay)
        .metric("modes", basis.len() as f64)
        .metric("points", rep.points as f64)
        .metric("normalization", basis.normalization);
    let doc = BasisDoc::from(&basis);
    run.write_json("basis.json", &doc)?;
    r.details = serde_json::to_value(&doc).expect("basis serializes");
    Ok(r)
}

struct ReplicaRun {
    deviation: Vec<f64>,
    increment_sum: f64,
    increment_count: usize,
    paths: Option<PathEnsemble>,
}

/// `max` over the embedding functions of `|mean|`; read off the particle phases.
fn embedding_deviation(f: &Frame<'_>) -> f64 {
    let n = f.phases.len().max(1) as f64;
    let mut s = [0.0; 4];
    for p in f.phases {
        s[0] += p[0].re;
        s[1] += p[0].im;
        s[2] += p[1].re;
        s[3] += p[1].im;
    }
    s.iter().fold(0.0, |a, x| a.max((x / n).abs()))
}

fn simulate(cfg: &Config, runner: &Parallel, run: &mut RunDir) -> Result<Report, CliError> {
    let basis = load_basis(cfg)?;
    let drift = load_drift(cfg)?;
    let f = &cfg.flow;
    let sim = FlowSimulator::new(&basis, &drift, FlowConfig::new(f.dt, f.seed).with_thin(f.thin)).map_err(input)?;
    let init = initial_grid(f.grid).map_err(input)?;
    let steps = sim.steps();
    let results = torusflow_core::runner::ReplicaRunner::map(runner, f.replicas, |rep| {
        let save = rep < f.save_replicas;
        let mut out = ReplicaRun { deviation: Vec::with_capacity(steps + 1), increment_sum: 0.0, increment_count: 0, paths: None };
        let (mut rec_steps, mut frames, mut incs) = (Vec::new(), Vec::new(), Vec::new());
        let mut obs = |fr: &Frame<'_>| {
            out.deviation.push(embedding_deviation(fr));
            out.increment_sum += fr.increments.iter().sum::<f64>();
            out.increment_count += fr.increments.len();
            if save {
                if fr.step % f.thin == 0 || fr.is_terminal() {
                    rec_steps.push(fr.step);
                    frames.push(fr.positions.to_vec());
                }
                incs.extend_from_slice(fr.increments);
            }
        };
        sim.run_replica(rep, &init, &mut obs)?;
        if save {
            out.paths = Some(PathEnsemble {
                initial: init.clone(),
                dt: f.dt,
                steps,
                seed: f.seed,
                replica: rep,
                modes: basis.len(),
                basis_id: basis.fingerprint(),
                drift_id: drift.fingerprint(),
                recorded_steps: rec_steps,
                frames,
                increments: incs,
            });
        }
        Ok::<_, CoreError>(out)
    });
    let mut r = Report::new(Command::Simulate.name());
    flow_params(&mut r, cfg);
    r.param("thin", f.thin as f64);
    let mut runs = Vec::new();
    for res in results {
        if let Some(x) = runtime(res, &mut r)? {
            runs.push(x);
        }
    }
    if runs.is_empty() {
        return Ok(r);
    }
    let mut worst = vec![0.0f64; steps + 1];
    for x in &runs {
        for (w, d) in worst.iter_mut().zip(&x.deviation) {
            *w = w.max(*d);
        }
    }
    let dev = worst.iter().copied().fold(0.0, f64::max);
    r.check_le("incompressibility", dev, INCOMPRESSIBILITY_TOLERANCE);
    let count: usize = runs.iter().map(|x| x.increment_count).sum();
    if count > 0 {
        let mean = runs.iter().map(|x| x.increment_sum).sum::<f64>() / (count as f64 * f.dt.sqrt());
        r.check_le("noise mean", mean.abs(), 4.0 / (count as f64).sqrt());
    }
    r.metric("modes", basis.len() as f64).metric("drift energy", drift_energy(&drift).value());

    let rows: Vec<Vec<String>> = worst.iter().enumerate().map(|(n, d)| vec![n.to_string(), fmt(n as f64 * f.dt), fmt(*d)]).collect();
    run.write("incompressibility.csv", &format::csv_bytes(&["step", "time", "max_deviation"], rows)?)?;
    let plot = LinePlot {
        title: "incompressibility".into(),
        x_label: "t".into(),
        y_label: "max |mean ψ(g_t) − ∫ψ|".into(),
        series: vec![Series::new("embedding family", worst.iter().enumerate().map(|(n, d)| (n as f64 * f.dt, *d)).collect())],
        hlines: vec![("tolerance".into(), INCOMPRESSIBILITY_TOLERANCE)],
        log_y: false,
    };
    svg(run, cfg, "incompressibility.svg", plot.to_svg())?;
    for p in runs.iter().filter_map(|x| x.paths.as_ref()) {
        run.write(&format!("paths/replica-{:03}.bin", p.replica), &format::paths_to_bytes(p))?;
        if p.frames.len() * p.particles() <= f.csv_max_rows {
            run.write(&format!("paths/replica-{:03}.csv", p.replica), &format::paths_csv(p)?)?;
        }
        if p.replica == 0 {
            let side = 16;
            let mut counts = vec![0.0; side * side];
            for q in p.terminal() {
                let a = ((q.theta1() / torusflow_core::TAU * side as f64) as usize).min(side - 1);
                let b = ((q.theta2() / torusflow_core::TAU * side as f64) as usize).min(side - 1);
                counts[b * side + a] += 1.0;
            }
            svg(run, cfg, "terminal_density.svg", Heatmap { title: "particles per cell at T, replica 0".into(), side, values: counts }.to_svg())?;
        }
    }
    Ok(r)
}

/// Moments `∫ φ_j ψ_k dη` the transport is compared with.
fn transport_targets(cfg: &Config, basis: &NoiseBasis, drift: &SpectralField, phis: &[TrigPoly], psis: &[TrigPoly], runner: &Parallel) -> Result<(Vec<f64>, &'static str), CliError> {
    let f = &cfg.flow;
    let analytic = constant_velocity(drift);
    match (cfg.transport.targets, analytic) {
        (TargetSource::Auto | TargetSource::Analytic, Some(c)) => Ok((heat_shift_targets(phis, psis, f.horizon, c, basis.normalization), "analytic")),
        (TargetSource::Analytic, None) => Err(CliError::Input("transport.targets = \"analytic\" needs a drift constant in space and time".into())),
        _ => {
            let problem = MomentProblem {
                basis: basis.clone(),
                horizon: f.horizon,
                grid_side: f.grid,
                dt: f.dt,
                replicas: f.replicas.saturating_mul(cfg.transport.reference_factor.max(1)),
                phis: phis.to_vec(),
                psis: psis.to_vec(),
            };
            // An independent seed keeps the reference free of the run's own noise.
            let seed = f.seed ^ 0x5bd1_e995_0000_0001;
            Ok((problem.moments(drift, seed, runner).map_err(input)?.0, "reference"))
        }
    }
}

/// Records transport series for all replicas of the configured flow.
pub fn record_series(
    basis: &NoiseBasis,
    drift: &SpectralField,
    init: &[TorusPoint],
    phis: &[TrigPoly],
    psis: &[TrigPoly],
    pairs: &[BracketPair],
    flow: FlowConfig,
    replicas: u32,
    runner: &Parallel,
) -> Result<Vec<TransportSeries>, CoreError> {
    let pf = PhiFamily::from_polys(phis, init);
    let sf = PsiFamily::new(psis);
    let kernel = TransportKernel::new(&pf, &sf, basis, pairs, None)?;
    let sim = FlowSimulator::new(basis, drift, flow)?;
    let steps = sim.steps();
    sim.run_all(runner, replicas, init, |_| TransportRecorder::new(kernel.clone(), basis, steps, flow.dt), |r, _| r.finish())
}

fn transport(cfg: &Config, runner: &Parallel, run: &mut RunDir) -> Result<Report, CliError> {
    let basis = load_basis(cfg)?;
    let drift = load_drift(cfg)?;
    let (phis, psis, fams) = families(cfg)?;
    check_degree(&PsiFamily::new(&psis), &drift, cfg.transport.max_degree).map_err(input)?;
    let f = &cfg.flow;
    let init = initial_grid(f.grid).map_err(input)?;
    let pairs: Vec<BracketPair> = match cfg.transport.brackets {
        BracketMode::None => Vec::new(),
        BracketMode::Diagonal => (0..phis.len()).flat_map(|j| (0..psis.len()).map(move |k| BracketPair::diagonal(j, k))).collect(),
    };
    let (targets, source) = transport_targets(cfg, &basis, &drift, &phis, &psis, runner)?;
    let mut r = Report::new(Command::Transport.name());
    flow_params(&mut r, cfg);
    r.families = Some(fams);
    let Some(series) = runtime(record_series(&basis, &drift, &init, &phis, &psis, &pairs, FlowConfig::new(f.dt, f.seed), f.replicas, runner), &mut r)? else {
        return Ok(r);
    };
    let energy = flow_energy(&drift).value();
    let sweep = axiom_sweep(&AxiomInputs { series: &series, phis: &phis, psis: &psis, targets: &targets, energy, particles: init.len() }).map_err(input)?;
    for a in &sweep.results {
        r.check(format!("axiom {}: {}", a.axiom, a.name), a.passed, a.worst, a.limit);
    }
    r.metric("flow energy", energy);
    let phi_norms: Vec<f64> = phis.iter().map(TrigPoly::l2_norm).collect();
    let grads = PsiFamily::new(&psis).gradient_l2_norms();
    let br = bracket_check(&series, &phi_norms, &grads, AXIOM_BRACKET_TOLERANCE, AXIOM_BOUND_SLACK).map_err(input)?;
    if !pairs.is_empty() {
        r.metric("bracket relative error", br.relative_error());
        let rows = br.results.iter().map(|b| {
            vec![b.pair.first.0.to_string(), b.pair.first.1.to_string(), fmt(b.realized), fmt(b.predicted), fmt(b.relative_error)]
        });
        run.write("brackets.csv", &format::csv_bytes(&["j", "k", "realized", "predicted", "relative_error"], rows)?)?;
    }
    run.write("series_replica_000.csv", &format::series_csv(&series[0], 0)?)?;

    let s0 = &series[0];
    let n = series.len() as f64;
    let mut plot = LinePlot { title: "replica mean of Θ_t(φ_j, ψ_k)".into(), x_label: "t".into(), y_label: "Θ".into(), ..Default::default() };
    for j in 0..s0.phis {
        for k in 0..s0.psis {
            if psis[k].degree() == 0 || plot.series.len() >= 8 {
                continue;
            }
            let pts = (0..=s0.steps).step_by((s0.steps / 200).max(1)).map(|t| (t as f64 * s0.dt, series.iter().map(|s| s.theta(t, j, k)).sum::<f64>() / n)).collect();
            plot.series.push(Series::new(format!("φ{j} ψ{k}"), pts));
        }
    }
    svg(run, cfg, "transport.svg", plot.to_svg())?;
    r.details = serde_json::json!({ "target_source": source, "targets": targets });
    Ok(r)
}

fn energy(cfg: &Config, runner: &Parallel, run: &mut RunDir) -> Result<Report, CliError> {
    let basis = load_basis(cfg)?;
    let drift = load_drift(cfg)?;
    let f = &cfg.flow;
    let e = &cfg.energy;
    let lc = LadderConfig { levels: e.levels.clone(), grid_side: f.grid, flow: FlowConfig::new(f.dt, f.seed), replicas: f.replicas, slack: e.slack, max_final_gap: e.max_final_gap };
    let mut r = Report::new(Command::Energy.name());
    flow_params(&mut r, cfg);
    let Some(rep) = runtime(energy_ladder(&basis, &drift, &lc, runner), &mut r)? else {
        return Ok(r);
    };
    let limit = rep.flow_energy * (1.0 + rep.slack);
    for l in &rep.ladder {
        r.check_le(format!("lower bound m={}", l.m), l.value, limit);
    }
    if let Some(g) = rep.gaps().last() {
        r.check_le("final gap", *g, rep.max_final_gap);
    }
    r.check("gap shrinks", rep.gap_shrinks(), rep.gaps().first().copied().unwrap_or(0.0), rep.gaps().last().copied().unwrap_or(0.0));
    r.metric("flow energy", rep.flow_energy);
    let rows = rep.ladder.iter().map(|l| vec![l.m.to_string(), fmt(l.eps), fmt(l.delta), fmt(l.value), fmt(l.std_error)]);
    run.write("ladder.csv", &format::csv_bytes(&["m", "eps", "delta", "lower_bound", "std_error"], rows)?)?;
    let plot = LinePlot {
        title: "energy lower bounds".into(),
        x_label: "partition side m".into(),
        y_label: "lower bound".into(),
        series: vec![Series::new("family bound", rep.ladder.iter().map(|l| (l.m as f64, l.value)).collect())],
        hlines: vec![("flow energy".into(), rep.flow_energy), ("+slack".into(), limit)],
        log_y: false,
    };
    svg(run, cfg, "energy.svg", plot.to_svg())?;
    r.details = serde_json::json!({
        "ladder": rep.ladder.iter().map(|l| serde_json::json!({"m": l.m, "eps": l.eps, "delta": l.delta, "value": l.value, "std_error": l.std_error})).collect::<Vec<_>>(),
    });
    Ok(r)
}

#[derive(Serialize)]
struct MinimizationDoc {
    params: Vec<f64>,
    drift: FieldDoc,
    energy: f64,
    residual: f64,
    objective: f64,
    initial_objective: f64,
    seed: u64,
    method: String,
    evaluations: usize,
    converged: bool,
    reference_energy: Option<f64>,
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Auto => "auto",
        Method::GaussNewton => "gauss-newton",
        Method::Spsa => "spsa",
    }
}

fn minimize(cfg: &Config, runner: &Parallel, run: &mut RunDir) -> Result<Report, CliError> {
    let m = &cfg.minimize;
    let path = m.target.as_ref().ok_or_else(|| CliError::Input("minimize needs a target file (minimize.target or --target)".into()))?;
    let doc: TargetDoc = format::read_json(path)?;
    let basis = load_basis(cfg)?;
    let t = cfg.flow.horizon;
    let (phis, psis) = constraint_families();
    let problem = MomentProblem { basis, horizon: t, grid_side: m.grid, dt: m.dt, replicas: m.replicas, phis, psis };
    let (targets, reference_energy) = match &doc {
        TargetDoc::Moments { moments } => (moment_targets(&FinalConfiguration::Moments(moments.clone()), &problem.phis, &problem.psis).map_err(input)?, None),
        TargetDoc::Coupling { .. } => {
            let c = doc.coupling().expect("coupling document");
            (moment_targets(&FinalConfiguration::Coupling(c), &problem.phis, &problem.psis).map_err(input)?, None)
        }
        TargetDoc::Drift { velocity, replicas, seed } => {
            let reference = SpectralField::constant(*velocity, t).map_err(input)?;
            let p = MomentProblem { replicas: *replicas, ..problem.clone() };
            (p.moments(&reference, *seed, runner).map_err(input)?.0, Some(drift_energy(&reference).value()))
        }
    };
    let param = DriftParameterization::new(m.kb, m.bins, t).map_err(input)?;
    let method = match m.method.as_str() {
        "gauss-newton" => Method::GaussNewton,
        "spsa" => Method::Spsa,
        _ => Method::Auto,
    };
    let opt = OptimizerConfig {
        seed: cfg.flow.seed,
        lambdas: m.lambda.clone(),
        max_evaluations: m.iters,
        method,
        fd_step: m.fd_step,
        residual_threshold: m.residual_threshold,
        ..OptimizerConfig::default()
    };
    let mut r = Report::new(Command::Minimize.name());
    r.param("dt", m.dt).param("T", t).param("grid", m.grid as f64).param("replicas", f64::from(m.replicas)).param("seed", cfg.flow.seed as f64);
    r.param("kb", f64::from(m.kb)).param("bins", m.bins as f64);
    let Some(res): Option<MinimizationResult> = runtime(minimize_energy(&problem, &targets, &param, &opt, runner), &mut r)? else {
        return Ok(r);
    };
    r.check_le("moment residual", res.residual, m.residual_threshold);
    r.check_le("objective evaluations", res.evaluations.len() as f64, m.iters as f64);
    if let Some(e) = reference_energy {
        r.check_le("energy vs reference", res.energy, (1.1 * e).max(0.01));
    }
    r.metric("energy", res.energy).metric("objective", res.objective).metric("initial objective", res.initial_objective);
    let out = MinimizationDoc {
        params: res.params.clone(),
        drift: FieldDoc::from(&res.drift),
        energy: res.energy,
        residual: res.residual,
        objective: res.objective,
        initial_objective: res.initial_objective,
        seed: res.seed,
        method: method_name(res.method).into(),
        evaluations: res.evaluations.len(),
        converged: res.converged,
        reference_energy,
    };
    run.write_json("minimization.json", &out)?;
    run.write_json("drift.json", &out.drift)?;
    let rows = res.iterations.iter().map(|i| vec![i.iteration.to_string(), i.evaluations.to_string(), fmt(i.lambda), fmt(i.energy), fmt(i.residual), fmt(i.objective)]);
    run.write("convergence.csv", &format::csv_bytes(&["iteration", "evaluations", "lambda", "energy", "residual", "objective"], rows)?)?;
    let plot = LinePlot {
        title: "minimization".into(),
        x_label: "iteration".into(),
        y_label: "value".into(),
        series: vec![
            Series::new("energy", res.iterations.iter().map(|i| (i.iteration as f64, i.energy.max(1e-12))).collect()),
            Series::new("residual", res.iterations.iter().map(|i| (i.iteration as f64, i.residual.max(1e-12))).collect()),
        ],
        hlines: vec![("residual threshold".into(), m.residual_threshold)],
        log_y: true,
    };
    svg(run, cfg, "convergence.svg", plot.to_svg())?;
    r.details = serde_json::to_value(&out).expect("result serializes");
    Ok(r)
}

fn decompose(cfg: &Config, run: &mut RunDir) -> Result<Report, CliError> {
    let basis = load_basis(cfg)?;
    let drift = load_drift(cfg)?;
    let (phis, psis, fams) = families(cfg)?;
    let d = &cfg.decompose;
    let f = &cfg.flow;
    let mut r = Report::new(Command::Decompose.name());
    r.param("dt", f.dt).param("T", f.horizon).param("record_grid", d.record_grid as f64).param("pde_grid", d.pde_grid as f64).param("seed", f.seed as f64);
    r.families = Some(fams);
    let Some(record) = runtime(martingale_flow_with_jacobian(&basis, d.record_grid, f.horizon, &FlowConfig::new(f.dt, f.seed), d.replica), &mut r)? else {
        return Ok(r);
    };
    let (lo, hi) = record.det_range();
    r.metric("det J min", lo).metric("det J max", hi);
    if let Some(fact) = runtime(factorize(&drift, &record, d.particles), &mut r)? {
        r.check_le("factorization distance", fact.max_distance, d.factorization_tolerance);
        r.metric("factorization mean distance", fact.mean_distance);
    }
    let mut tests: Vec<TrigPoly> = GradientFamily::new().functions.to_vec();
    tests.extend([TrigPoly::cos(1, 1), TrigPoly::sin(1, -1)]);
    let weak = weak_divergence_check(&record, &drift, &tests, d.weak_tolerance).map_err(input)?;
    r.check_le("weak divergence", weak.max_residual(), d.weak_tolerance);
    let sbc = SigmaBConfig { pde_side: d.pde_grid, partition: d.partition, slack: d.slack, match_tolerance: d.match_tolerance, identity_tolerance: d.identity_tolerance };
    if let Some(sb) = runtime(sigma_b_construction(&record, &drift, &phis, &psis, &sbc), &mut r)? {
        r.check_le("transport energy bound", sb.energy_lb, sb.drift_energy * (1.0 + sb.config.slack));
        r.check_le("transport matches flow", sb.match_distance, sb.config.match_tolerance);
        r.check_le("transport identity", sb.identity_error, sb.config.identity_tolerance);
        r.metric("drift energy", sb.drift_energy).metric("mass drift", sb.max_mass_drift).metric("l2 decay", sb.max_l2_decay);
    }
    // θ snapshots of the first non-constant φ.
    let phi = phis.iter().find(|p| p.degree() > 0).unwrap_or(&phis[0]);
    let pullback = pullback_drift(&record, &drift).map_err(input)?;
    let count = d.snapshots.max(2);
    let mut snaps: Vec<usize> = (0..count).map(|i| i * record.steps / (count - 1)).collect();
    snaps.dedup();
    let init = sample_grid(d.pde_grid, |p| phi.eval(p));
    let fields = transport_pde(&pullback, &[init], d.pde_grid, &snaps).map_err(input)?;
    for (step, values) in &fields[0].snapshots {
        run.write(&format!("theta/step-{step:05}.csv"), &format::grid_csv(d.pde_grid, values)?)?;
        let title = format!("θ at t = {}", fmt(*step as f64 * record.dt));
        svg(run, cfg, &format!("theta/step-{step:05}.svg"), Heatmap { title, side: d.pde_grid, values: values.clone() }.to_svg())?;
    }
    Ok(r)
}

/// Default run directory: the command and a digest of the configuration.
pub fn default_run_dir(cfg: &Config, command: &str) -> PathBuf {
    cfg.output.dir.join(format!("{command}-{}", cfg.digest()))
}

/// Runs `command` into `dir` and writes the report and manifest.
pub fn execute(command: Command, cfg: &Config, dir: &Path, runner: &Parallel) -> Result<(Report, RunManifest), CliError> {
    let mut run = RunDir::create(dir)?;
    let report = match command {
        Command::CheckBasis => check_basis(cfg, &mut run),
        Command::Simulate => simulate(cfg, runner, &mut run),
        Command::Transport => transport(cfg, runner, &mut run),
        Command::Energy => energy(cfg, runner, &mut run),
        Command::Minimize => minimize(cfg, runner, &mut run),
        Command::Decompose => decompose(cfg, &mut run),
    }?;
    run.write_json("report.json", &report)?;
    run.write("report.md", report.to_markdown().as_bytes())?;
    let config = serde_json::to_value(cfg).expect("config serializes");
    let manifest = run.finish(command.name(), config, cfg.flow.seed, runner.workers(), report.passed)?;
    Ok((report, manifest))
}

/// Merges the reports of finished runs into `out`.
pub fn report(runs: &[PathBuf], out: &Path, svg_plots: bool) -> Result<crate::report::Summary, CliError> {
    let mut reports = Vec::new();
    for dir in runs {
        let m = read_manifest(dir)?;
        let bad = verify(dir, &m);
        if !bad.is_empty() {
            return Err(CliError::Input(format!("{}: checksum mismatch for {}", dir.display(), bad.join(", "))));
        }
        let rep: Report = format::read_json(&dir.join("report.json"))?;
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        reports.push((name, rep));
    }
    let summary = merge(&reports)?;
    let mut run = RunDir::create(out)?;
    run.write_json("summary.json", &summary)?;
    run.write("summary.md", summary.to_markdown().as_bytes())?;
    if svg_plots {
        run.write("comparison.svg", summary.comparison_plot().to_svg().as_bytes())?;
    }
    let inputs = serde_json::json!({ "runs": runs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>() });
    run.finish("report", inputs, 0, 1, summary.passed)?;
    Ok(summary)
}
