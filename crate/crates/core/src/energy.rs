//! Kinetic energy of a flow and the test-family lower bound of its transport energy.
//!
//! For a partition of unity `(φ^j)` and a gradient family `(ψ^k)` with
//! `Σ_k ⟨∇ψ^k, v⟩² ≤ ‖v‖²`,
//!
//! ```text
//! ½ Σ_{j,k} E ∫₀ᵀ (DΘ̃_t(φ^j, ψ^k))² / Θ_t(φ^j, 1) dt
//! ```
//!
//! never exceeds the flow energy; refining the partition closes the gap.

use alloc::vec;
use alloc::vec::Vec;

use crate::drift::{drift_energy, EnergyValue, SpectralField};
use crate::error::{invalid, Error, Result};
use crate::flow::{initial_grid, FlowConfig, FlowSimulator, Frame, Observer};
use crate::runner::ReplicaRunner;
use crate::spectral::{torus_distance, NoiseBasis, TorusPoint, TrigPoly};
use crate::stats::{trapezoid_weight, MeanEstimate};
use crate::transport::{PhiFamily, PsiFamily, TransportKernel, TransportSeries};
#[allow(unused_imports)]
use crate::Float;
use crate::TAU;

/// Support radius as a multiple of the center spacing.
pub const PARTITION_RADIUS_FACTOR: f64 = 1.2;

/// Smallest admissible `Θ(φ^j, 1)`.
pub const MIN_MASS: f64 = 1e-12;

/// `𝓔(g)`: for a deterministic drift the expectation and space integral collapse.
pub fn flow_energy(drift: &SpectralField) -> EnergyValue {
    drift_energy(drift)
}

/// Normalized squared-cosine bumps on an `m × m` grid of centers.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionFamily {
    m: usize,
    radius: f64,
    centers: Vec<TorusPoint>,
}

impl PartitionFamily {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(invalid("m", "must be at least 1"));
        }
        let h = TAU / m as f64;
        let centers = (0..m)
            .flat_map(|a| (0..m).map(move |b| TorusPoint::new(a as f64 * h, b as f64 * h)))
            .collect();
        Ok(Self { m, radius: PARTITION_RADIUS_FACTOR * h, centers })
    }

    pub fn side(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn centers(&self) -> &[TorusPoint] {
        &self.centers
    }

    fn bump(&self, r: f64) -> f64 {
        if r >= self.radius {
            0.0
        } else {
            let c = (core::f64::consts::FRAC_PI_2 * r / self.radius).cos();
            c * c
        }
    }

    /// Nonzero `(j, φ^j(p))`.
    pub fn eval(&self, p: TorusPoint) -> Vec<(u32, f64)> {
        let mut raw: Vec<(u32, f64)> = self
            .centers
            .iter()
            .enumerate()
            .filter_map(|(j, c)| {
                let b = self.bump(torus_distance(p, *c));
                (b > 0.0).then_some((j as u32, b))
            })
            .collect();
        let total: f64 = raw.iter().map(|e| e.1).sum();
        for e in raw.iter_mut() {
            e.1 /= total;
        }
        raw
    }

    /// Quadrature weights `φ^j(x_p)/N` on the initial points.
    pub fn phi_family(&self, initial: &[TorusPoint]) -> PhiFamily {
        let n = initial.len() as f64;
        let rows = initial
            .iter()
            .map(|p| self.eval(*p).into_iter().map(|(j, v)| (j, v / n)).collect())
            .collect();
        PhiFamily::from_rows(self.len(), rows)
    }

    /// `max_p |Σ_j φ^j(p) − 1|`.
    pub fn partition_defect(&self, points: &[TorusPoint]) -> f64 {
        points
            .iter()
            .map(|p| (self.eval(*p).iter().map(|e| e.1).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest distance from a center at which its function is nonzero.
    pub fn max_support_radius(&self, points: &[TorusPoint]) -> f64 {
        let mut r = 0.0f64;
        for p in points {
            for (j, _) in self.eval(*p) {
                r = r.max(torus_distance(*p, self.centers[j as usize]));
            }
        }
        r
    }

    /// `δ = min_j ∫φ^j / ε²`, with `∫` over the torus of area `(2π)²`.
    pub fn mass_constant(&self, masses: &[f64]) -> f64 {
        let min = masses.iter().copied().fold(f64::INFINITY, f64::min);
        min * TAU * TAU / (self.radius * self.radius)
    }
}

/// The flat isometric embedding `{cos θ₁, sin θ₁, cos θ₂, sin θ₂}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientFamily {
    pub functions: [TrigPoly; 4],
}

impl Default for GradientFamily {
    fn default() -> Self {
        Self::new()
    }
}

impl GradientFamily {
    pub fn new() -> Self {
        Self { functions: [TrigPoly::cos(1, 0), TrigPoly::sin(1, 0), TrigPoly::cos(0, 1), TrigPoly::sin(0, 1)] }
    }

    /// `Σ_k ⟨∇ψ^k(p), v⟩² − ‖v‖²`.
    pub fn identity_residual(&self, p: TorusPoint, v: [f64; 2]) -> f64 {
        let s: f64 = self
            .functions
            .iter()
            .map(|f| {
                let g = f.gradient().eval(p);
                let d = g[0] * v[0] + g[1] * v[1];
                d * d
            })
            .sum();
        s - (v[0] * v[0] + v[1] * v[1])
    }

    pub fn psi_family(&self) -> PsiFamily {
        PsiFamily::new(&self.functions)
    }
}

fn check_masses(masses: &[f64]) -> Result<()> {
    for (index, &mass) in masses.iter().enumerate() {
        if !(mass >= MIN_MASS) {
            return Err(Error::DegenerateMass { index, mass });
        }
    }
    Ok(())
}

/// Lower-bound estimate with its Monte Carlo error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyEstimate {
    pub value: f64,
    pub std_error: f64,
    pub replicas: usize,
}

impl EnergyEstimate {
    /// `½ × mean` of per-replica integrals `Σ_{j,k} ∫ D²/m_j dt`.
    pub fn from_replicas(integrals: &[f64]) -> Self {
        let e = MeanEstimate::from_samples(integrals);
        Self { value: 0.5 * e.mean, std_error: 0.5 * e.std_error, replicas: e.samples }
    }
}

/// `Σ_{j,k} ∫ (DΘ̃)² / m_j dt` for one replica from a recorded series.
pub fn family_integral(series: &TransportSeries, masses: &[f64]) -> Result<f64> {
    check_masses(masses)?;
    if masses.len() != series.phis {
        return Err(Error::Shape(alloc::format!("{} masses for {} functions", masses.len(), series.phis)));
    }
    let mut total = 0.0;
    for (j, m) in masses.iter().enumerate() {
        for k in 0..series.psis {
            total += series.drift_square_integral(j, k) / m;
        }
    }
    Ok(total)
}

/// Lower bound of `𝓔′` from recorded series of a partition × gradient family.
pub fn generalized_energy_lb(series: &[TransportSeries], masses: &[f64]) -> Result<EnergyEstimate> {
    let xs = series.iter().map(|s| family_integral(s, masses)).collect::<Result<Vec<f64>>>()?;
    Ok(EnergyEstimate::from_replicas(&xs))
}

/// Streams `Σ_{j,k} D²/m_j` through the trapezoid rule for several families at once.
///
/// `groups[g]` is the index range of family `g` inside the concatenated φ family.
#[derive(Debug, Clone)]
pub struct EnergyRecorder<'a> {
    kernel: TransportKernel<'a>,
    groups: Vec<core::ops::Range<usize>>,
    masses: Vec<f64>,
    steps: usize,
    totals: Vec<f64>,
}

impl<'a> EnergyRecorder<'a> {
    pub fn new(kernel: TransportKernel<'a>, groups: Vec<core::ops::Range<usize>>, steps: usize) -> Result<Self> {
        let masses = kernel.phis().masses().to_vec();
        check_masses(&masses)?;
        let totals = vec![0.0; groups.len()];
        Ok(Self { kernel, groups, masses, steps, totals })
    }

    /// Per-group integrals of this replica.
    pub fn finish(self) -> Vec<f64> {
        self.totals
    }
}

impl Observer for EnergyRecorder<'_> {
    fn observe(&mut self, frame: &Frame<'_>) {
        let w = trapezoid_weight(frame.step, self.steps, frame.dt);
        let kn = self.kernel.psis().len();
        let m = self.kernel.compute(frame);
        for (g, range) in self.groups.iter().enumerate() {
            let mut s = 0.0;
            for j in range.clone() {
                let row = &m.drift[j * kn..(j + 1) * kn];
                s += row.iter().map(|d| d * d).sum::<f64>() / self.masses[j];
            }
            self.totals[g] += w * s;
        }
    }
}

/// Simulation parameters of a ladder run.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderConfig {
    pub levels: Vec<usize>,
    pub grid_side: usize,
    pub flow: FlowConfig,
    pub replicas: u32,
    /// Relative slack on `lb ≤ 𝓔(g)`.
    pub slack: f64,
    /// Required `1 − lb_final/𝓔(g)` at the finest level.
    pub max_final_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderEntry {
    pub m: usize,
    pub eps: f64,
    pub delta: f64,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderReport {
    pub flow_energy: f64,
    pub slack: f64,
    pub max_final_gap: f64,
    pub ladder: Vec<LadderEntry>,
}

impl LadderReport {
    pub fn bounds_hold(&self) -> bool {
        let cap = self.flow_energy * (1.0 + self.slack);
        self.ladder.iter().all(|e| e.value <= cap + 1e-12)
    }

    /// Relative gap `1 − value/𝓔` of each level (0 for a zero-energy flow).
    pub fn gaps(&self) -> Vec<f64> {
        self.ladder
            .iter()
            .map(|e| if self.flow_energy > 0.0 { 1.0 - e.value / self.flow_energy } else { e.value.abs() })
            .collect()
    }

    /// The finest level's gap is within tolerance and no larger than the coarsest's.
    pub fn gap_shrinks(&self) -> bool {
        let g = self.gaps();
        match (g.first(), g.last()) {
            (Some(a), Some(b)) => *b <= self.max_final_gap && *b <= *a + 1e-12,
            _ => false,
        }
    }

    pub fn passed(&self) -> bool {
        self.bounds_hold() && self.gap_shrinks()
    }
}

/// Runs the flow once and evaluates the lower bound for every partition level.
pub fn energy_ladder<R: ReplicaRunner + ?Sized>(
    basis: &NoiseBasis,
    drift: &SpectralField,
    config: &LadderConfig,
    runner: &R,
) -> Result<LadderReport> {
    if config.levels.is_empty() {
        return Err(invalid("levels", "at least one partition level is required"));
    }
    let init = initial_grid(config.grid_side)?;
    let mut partitions = Vec::new();
    let mut groups = Vec::new();
    let mut family: Option<PhiFamily> = None;
    for &m in &config.levels {
        let p = PartitionFamily::new(m)?;
        let f = p.phi_family(&init);
        let start = family.as_ref().map_or(0, PhiFamily::len);
        groups.push(start..start + f.len());
        family = Some(match family {
            None => f,
            Some(prev) => prev.concat(&f)?,
        });
        partitions.push(p);
    }
    let family = family.unwrap_or_else(|| PhiFamily::from_rows(0, Vec::new()));
    let psis = GradientFamily::new().psi_family();
    let sim = FlowSimulator::new(basis, drift, config.flow)?;
    let per_replica = sim.run_all(
        runner,
        config.replicas,
        &init,
        |_| {
            let k = TransportKernel::new(&family, &psis, basis, &[], None).expect("family without bracket pairs");
            EnergyRecorder::new(k, groups.clone(), sim.steps()).expect("masses were checked")
        },
        |r, _| r.finish(),
    )?;
    // Validate masses up front so the closures above cannot fail.
    check_masses(family.masses())?;
    let mut ladder = Vec::new();
    for (g, p) in partitions.iter().enumerate() {
        let xs: Vec<f64> = per_replica.iter().map(|v| v[g]).collect();
        let est = EnergyEstimate::from_replicas(&xs);
        ladder.push(LadderEntry {
            m: p.side(),
            eps: p.radius(),
            delta: p.mass_constant(&family.masses()[groups[g].clone()]),
            value: est.value,
            std_error: est.std_error,
        });
    }
    Ok(LadderReport {
        flow_energy: flow_energy(drift).value(),
        slack: config.slack,
        max_final_gap: config.max_final_gap,
        ladder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::Sequential;
    use crate::spectral::{uniform_grid, VectorTrigPoly, WaveVector};

    #[test]
    fn flow_energy_fixtures() {
        assert_eq!(flow_energy(&SpectralField::zero(1.0).unwrap()).value(), 0.0);
        assert!((flow_energy(&SpectralField::constant([1.0, 0.0], 1.0).unwrap()).value() - 0.5).abs() < 1e-15);
        let a = SpectralField::constant_in_time(VectorTrigPoly::a_mode(WaveVector::new(1, 0)), 1.0).unwrap();
        assert!((flow_energy(&a).value() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn partition_of_unity() {
        let pts = uniform_grid(37);
        for m in [1, 2, 4, 8] {
            let p = PartitionFamily::new(m).unwrap();
            assert!(p.partition_defect(&pts) < 1e-12, "m = {m}");
            assert!(p.max_support_radius(&pts) < p.radius());
            for q in &pts[..50] {
                assert!(p.eval(*q).iter().all(|e| e.1 >= 0.0));
            }
        }
    }

    #[test]
    fn masses_and_delta() {
        let init = uniform_grid(32);
        let p = PartitionFamily::new(4).unwrap();
        let f = p.phi_family(&init);
        for m in f.masses() {
            assert!((m - 1.0 / 16.0).abs() < 1e-12);
        }
        let d = p.mass_constant(f.masses());
        assert!((d - 1.0 / 1.44).abs() < 1e-9);
        let one = PartitionFamily::new(1).unwrap().phi_family(&init);
        assert!((one.masses()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_identity() {
        let g = GradientFamily::new();
        for i in 0..20 {
            let t = i as f64 * 0.37;
            let r = g.identity_residual(TorusPoint::new(t, 2.0 * t + 1.0), [t.cos() * 3.0, 0.5 - t]);
            assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_drift_has_zero_bound() {
        let cfg = LadderConfig {
            levels: vec![2, 4],
            grid_side: 8,
            flow: FlowConfig::new(0.01, 1),
            replicas: 2,
            slack: 0.05,
            max_final_gap: 1.0,
        };
        let r = energy_ladder(&NoiseBasis::build(1, 0.0).unwrap(), &SpectralField::zero(0.1).unwrap(), &cfg, &Sequential).unwrap();
        assert!(r.ladder.iter().all(|e| e.value == 0.0));
        assert!(r.bounds_hold());
    }

    #[test]
    fn single_cell_constant_drift() {
        // φ¹ = 1: Θ(1, ⟨∇ψ, c⟩) = ∫⟨∇ψ, c⟩ = 0 for the periodic embedding.
        let cfg = LadderConfig {
            levels: vec![1],
            grid_side: 8,
            flow: FlowConfig::new(0.05, 1),
            replicas: 1,
            slack: 0.05,
            max_final_gap: 1.0,
        };
        let r = energy_ladder(&NoiseBasis::empty(), &SpectralField::constant([1.0, 0.0], 1.0).unwrap(), &cfg, &Sequential).unwrap();
        assert!(r.ladder[0].value.abs() < 1e-20);
        assert!(r.bounds_hold());
    }

    #[test]
    fn degenerate_masses_are_rejected() {
        assert!(matches!(check_masses(&[0.5, 0.0]), Err(Error::DegenerateMass { index: 1, .. })));
    }
}
