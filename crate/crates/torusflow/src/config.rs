//! Run configuration: a TOML file with one section per module, overridden by
//! `section.key=value` assignments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config: {0}")]
    Parse(String),
    #[error("override {0:?} is not of the form section.key=value")]
    Override(String),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub basis: BasisSection,
    pub drift: DriftSection,
    pub flow: FlowSection,
    pub transport: TransportSection,
    pub energy: EnergySection,
    pub minimize: MinimizeSection,
    pub decompose: DecomposeSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisSection {
    /// Sup-norm cutoff `K` of the wave vectors.
    pub cutoff: u32,
    /// Mode weights decay like `|k|^-decay`.
    pub decay: f64,
    /// Basis JSON replacing `cutoff`/`decay` when set.
    pub file: Option<PathBuf>,
    /// Points used by `check-basis`.
    pub check_points: usize,
}

impl Default for BasisSection {
    fn default() -> Self {
        Self { cutoff: 3, decay: 2.0, file: None, check_points: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftKind {
    Zero,
    Constant,
    Rough,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftSection {
    pub kind: DriftKind,
    /// Used by `constant`.
    pub velocity: [f64; 2],
    /// The remaining keys parameterize the `rough` fixture.
    pub bins: usize,
    pub cutoff: u32,
    pub amplitude: f64,
    pub seed: u64,
    /// Field JSON, used by `file`.
    pub file: Option<PathBuf>,
}

impl Default for DriftSection {
    fn default() -> Self {
        Self { kind: DriftKind::Zero, velocity: [1.0, 0.0], bins: 4, cutoff: 8, amplitude: 1.0, seed: 7, file: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    /// Particles per side of the initial grid.
    pub grid: usize,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub seed: u64,
    pub replicas: u32,
    /// Stored frames are every `thin`-th step plus the last.
    pub thin: usize,
    /// Replicas whose paths `simulate` writes to disk.
    pub save_replicas: u32,
    /// Paths with more rows than this are not exported as CSV.
    pub csv_max_rows: usize,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self { grid: 64, dt: 1e-3, horizon: 0.5, seed: 1, replicas: 64, thin: 10, save_replicas: 1, csv_max_rows: 200_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BracketMode {
    None,
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSource {
    /// Closed form for constant drifts, otherwise a reference run.
    Auto,
    Analytic,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportSection {
    /// Test functions such as `"1 + 0.5*cos(0,1)"`.
    pub phis: Vec<String>,
    pub psis: Vec<String>,
    pub brackets: BracketMode,
    pub targets: TargetSource,
    /// Replicas of the reference run, as a multiple of `flow.replicas`.
    pub reference_factor: u32,
    pub max_degree: u32,
}

impl Default for TransportSection {
    fn default() -> Self {
        Self {
            phis: ["1", "1 + 0.5*cos(0,1)", "cos(1,0)", "sin(0,1)"].map(String::from).to_vec(),
            psis: ["1", "cos(1,0)", "sin(1,0)", "cos(0,1)", "sin(0,1)", "cos(1,1)"].map(String::from).to_vec(),
            brackets: BracketMode::Diagonal,
            targets: TargetSource::Auto,
            reference_factor: 4,
            max_degree: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergySection {
    /// Partition sides `m`.
    pub levels: Vec<usize>,
    pub slack: f64,
    /// Largest allowed relative gap at the finest level.
    pub max_final_gap: f64,
}

impl Default for EnergySection {
    fn default() -> Self {
        Self { levels: vec![4, 8, 16], slack: 0.05, max_final_gap: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinimizeSection {
    /// Target JSON (moments, coupling pairs or a reference drift).
    pub target: Option<PathBuf>,
    pub kb: u32,
    pub bins: usize,
    pub lambda: Vec<f64>,
    pub iters: usize,
    /// `auto`, `gauss-newton` or `spsa`.
    pub method: String,
    pub grid: usize,
    pub dt: f64,
    pub replicas: u32,
    pub residual_threshold: f64,
    pub fd_step: f64,
}

impl Default for MinimizeSection {
    fn default() -> Self {
        Self {
            target: None,
            kb: 1,
            bins: 1,
            lambda: vec![10.0, 100.0],
            iters: 400,
            method: "auto".into(),
            grid: 16,
            dt: 1e-2,
            replicas: 64,
            residual_threshold: 0.05,
            fd_step: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeSection {
    /// Side of the grid carrying the martingale flow and its Jacobian.
    pub record_grid: usize,
    pub pde_grid: usize,
    /// Side of the particle grid used for the factorization distance.
    pub particles: usize,
    pub partition: usize,
    pub slack: f64,
    pub match_tolerance: f64,
    pub identity_tolerance: f64,
    pub factorization_tolerance: f64,
    pub weak_tolerance: f64,
    /// Number of θ snapshots written as CSV and SVG.
    pub snapshots: usize,
    pub replica: u32,
}

impl Default for DecomposeSection {
    fn default() -> Self {
        Self {
            record_grid: 64,
            pde_grid: 128,
            particles: 16,
            partition: 8,
            slack: 0.05,
            match_tolerance: 0.05,
            identity_tolerance: 0.1,
            factorization_tolerance: 0.05,
            weak_tolerance: 0.03,
            snapshots: 4,
            replica: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Parent of the run directories.
    pub dir: PathBuf,
    pub svg: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs"), svg: true }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.into())),
        Err(_) => toml::Value::String(value.into()),
    }
}

/// Applies `section.key=value` to a raw table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, value) = assignment.split_once('=').ok_or_else(|| ConfigError::Override(assignment.into()))?;
    let (section, field) = key.trim().split_once('.').ok_or_else(|| ConfigError::Override(assignment.into()))?;
    if section.is_empty() || field.is_empty() {
        return Err(ConfigError::Override(assignment.into()));
    }
    let entry = table.entry(section.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(t) = entry else {
        return Err(ConfigError::Parse(format!("`{section}` is not a section")));
    };
    t.insert(field.to_string(), parse_value(value.trim()));
    Ok(())
}

impl Config {
    /// Reads `path` (defaults when `None`), applies `overrides` in order and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.display().to_string(), source })?;
                text.parse::<toml::Table>().map_err(|e| ConfigError::Parse(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let f = &self.flow;
        if !(f.dt > 0.0 && f.dt.is_finite()) {
            return bad(format!("flow.dt = {} must be positive", f.dt));
        }
        if !(f.horizon > 0.0 && f.horizon.is_finite()) {
            return bad(format!("flow.T = {} must be positive", f.horizon));
        }
        if let Err(e) = torusflow_core::flow::step_count(f.horizon, f.dt) {
            return bad(format!("flow: {e}"));
        }
        if f.grid < 2 {
            return bad(format!("flow.grid = {} must be at least 2", f.grid));
        }
        if f.replicas == 0 {
            return bad("flow.replicas must be at least 1".into());
        }
        if f.thin == 0 {
            return bad("flow.thin must be at least 1".into());
        }
        if self.basis.file.is_none() && self.basis.cutoff == 0 {
            return bad("basis.cutoff must be at least 1".into());
        }
        if self.drift.kind == DriftKind::File && self.drift.file.is_none() {
            return bad("drift.kind = \"file\" needs drift.file".into());
        }
        if self.energy.levels.is_empty() || self.energy.levels.contains(&0) {
            return bad("energy.levels must be nonempty positive partition sides".into());
        }
        let m = &self.minimize;
        if !matches!(m.method.as_str(), "auto" | "gauss-newton" | "spsa") {
            return bad(format!("minimize.method = {:?} is not auto, gauss-newton or spsa", m.method));
        }
        if m.lambda.is_empty() || m.lambda.iter().any(|l| !(*l > 0.0)) {
            return bad("minimize.lambda must be a nonempty list of positive weights".into());
        }
        if let Err(e) = torusflow_core::flow::step_count(f.horizon, m.dt) {
            return bad(format!("minimize: {e}"));
        }
        let d = &self.decompose;
        if d.record_grid < 2 || d.pde_grid % d.record_grid != 0 {
            return bad(format!("decompose.pde_grid = {} must be a multiple of decompose.record_grid = {}", d.pde_grid, d.record_grid));
        }
        Ok(())
    }

    /// Short stable digest of the effective configuration.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = toml::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..4])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        let text = toml::to_string(&c).unwrap();
        assert!(text.contains("T = 0.5"));
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_errors() {
        let c = Config::load(None, &["flow.grid=8".into(), "flow.T=0.25".into(), "minimize.lambda=[1.0, 5.0]".into(), "drift.kind=constant".into()]).unwrap();
        assert_eq!(c.flow.grid, 8);
        assert_eq!(c.flow.horizon, 0.25);
        assert_eq!(c.minimize.lambda, vec![1.0, 5.0]);
        assert_eq!(c.drift.kind, DriftKind::Constant);

        let e = Config::load(None, &["flow.dt=0.003".into()]).unwrap_err();
        assert!(e.to_string().contains("does not divide"), "{e}");
        assert!(Config::load(None, &["flow.nope=1".into()]).is_err());
        assert!(Config::load(None, &["grid=1".into()]).is_err());
    }

    #[test]
    fn reads_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[flow]\ngrid = 12\n[basis]\ncutoff = 2\n").unwrap();
        let c = Config::load(Some(&p), &["flow.grid=10".into()]).unwrap();
        assert_eq!((c.flow.grid, c.basis.cutoff), (10, 2));
        assert!(Config::load(Some(&dir.path().join("missing.toml")), &[]).is_err());
    }
}
