//! On-disk representations: JSON documents for bases and drifts, binary and
//! CSV path files, CSV time series.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use torusflow_core::drift::{SpectralField, TimeBin};
use torusflow_core::flow::{EmpiricalCoupling, PathEnsemble};
use torusflow_core::spectral::{check_structure, uniform_grid, NoiseBasis, NoiseMode, Parity, TorusPoint, TrigPoly, VectorTrigPoly, WaveVector};
use torusflow_core::transport::TransportSeries;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] torusflow_core::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.display().to_string(), source }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| FormatError::Json { path: path.display().to_string(), source })
}

/// Pretty JSON with a trailing newline; byte-identical for equal values.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable value");
    out.push(b'\n');
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParityDoc {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDoc {
    pub k: [i32; 2],
    pub parity: ParityDoc,
    pub weight: f64,
}

/// `{cutoff, decay, normalization, modes: [{k, parity, weight}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisDoc {
    pub cutoff: u32,
    pub decay: f64,
    pub normalization: f64,
    pub modes: Vec<ModeDoc>,
}

impl From<&NoiseBasis> for BasisDoc {
    fn from(b: &NoiseBasis) -> Self {
        Self {
            cutoff: b.cutoff,
            decay: b.decay,
            normalization: b.normalization,
            modes: b
                .modes
                .iter()
                .map(|m| ModeDoc {
                    k: [m.k.k1, m.k.k2],
                    parity: match m.parity {
                        Parity::A => ParityDoc::A,
                        Parity::B => ParityDoc::B,
                    },
                    weight: m.weight,
                })
                .collect(),
        }
    }
}

impl BasisDoc {
    /// Rebuilds the basis and verifies its structure on a 16×16 grid.
    pub fn to_basis(&self) -> Result<NoiseBasis> {
        let basis = NoiseBasis {
            cutoff: self.cutoff,
            decay: self.decay,
            normalization: self.normalization,
            modes: self
                .modes
                .iter()
                .map(|m| NoiseMode {
                    k: WaveVector::new(m.k[0], m.k[1]),
                    parity: match m.parity {
                        ParityDoc::A => Parity::A,
                        ParityDoc::B => Parity::B,
                    },
                    weight: m.weight,
                })
                .collect(),
        };
        let report = check_structure(&basis, &uniform_grid(16));
        if !report.passed() {
            return Err(FormatError::Invalid(format!("basis fails its structure checks: {report:?}")));
        }
        Ok(basis)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldModeDoc {
    pub k: [i32; 2],
    pub cos: [f64; 2],
    pub sin: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinDoc {
    pub t_start: f64,
    pub t_end: f64,
    pub modes: Vec<FieldModeDoc>,
}

/// `{T, bins: [{t_start, t_end, modes: [{k, cos, sin}]}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDoc {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub bins: Vec<BinDoc>,
}

fn vector_modes(v: &VectorTrigPoly) -> Vec<FieldModeDoc> {
    let mut ks: Vec<WaveVector> = v.u1.terms().chain(v.u2.terms()).map(|(k, _)| k).collect();
    ks.sort();
    ks.dedup();
    ks.into_iter()
        .filter_map(|k| {
            let (a, b) = (v.u1.coefficient(k), v.u2.coefficient(k));
            (a != [0.0; 2] || b != [0.0; 2]).then_some(FieldModeDoc { k: [k.k1, k.k2], cos: [a[0], b[0]], sin: [a[1], b[1]] })
        })
        .collect()
}

fn modes_vector(modes: &[FieldModeDoc]) -> VectorTrigPoly {
    let mut u1 = TrigPoly::zero();
    let mut u2 = TrigPoly::zero();
    for m in modes {
        let k = WaveVector::new(m.k[0], m.k[1]);
        u1.add_term(k, m.cos[0], m.sin[0]);
        u2.add_term(k, m.cos[1], m.sin[1]);
    }
    VectorTrigPoly::new(u1, u2)
}

impl From<&SpectralField> for FieldDoc {
    fn from(f: &SpectralField) -> Self {
        Self {
            horizon: f.horizon(),
            bins: f.bins().iter().map(|b| BinDoc { t_start: b.t_start, t_end: b.t_end, modes: vector_modes(&b.field) }).collect(),
        }
    }
}

impl FieldDoc {
    /// Rebuilds the field; tiling and divergence are validated.
    pub fn to_field(&self) -> Result<SpectralField> {
        let bins = self.bins.iter().map(|b| TimeBin { t_start: b.t_start, t_end: b.t_end, field: modes_vector(&b.modes) }).collect();
        Ok(SpectralField::new(self.horizon, bins)?)
    }
}

pub fn read_basis(path: &Path) -> Result<NoiseBasis> {
    read_json::<BasisDoc>(path)?.to_basis()
}

pub fn read_field(path: &Path) -> Result<SpectralField> {
    read_json::<FieldDoc>(path)?.to_field()
}

pub const PATH_SCHEMA: &str = "torusflow.paths/1";

/// First line of a binary path file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathHeader {
    pub schema: String,
    #[serde(rename = "N")]
    pub particles: usize,
    #[serde(rename = "S")]
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
    pub replica: u32,
    pub modes: usize,
    pub basis_id: String,
    pub drift_id: String,
    /// Step index of each stored frame.
    pub recorded_steps: Vec<usize>,
}

impl From<&PathEnsemble> for PathHeader {
    fn from(p: &PathEnsemble) -> Self {
        Self {
            schema: PATH_SCHEMA.into(),
            particles: p.particles(),
            steps: p.steps,
            dt: p.dt,
            seed: p.seed,
            replica: p.replica,
            modes: p.modes,
            basis_id: format!("{:016x}", p.basis_id),
            drift_id: format!("{:016x}", p.drift_id),
            recorded_steps: p.recorded_steps.clone(),
        }
    }
}

fn parse_id(s: &str) -> Result<u64> {
    u64::from_str_radix(s, 16).map_err(|e| FormatError::Invalid(format!("bad id {s:?}: {e}")))
}

/// JSON header line, `\n`, then little-endian `f64`: every frame's
/// `(θ₁, θ₂)` per particle, followed by the `S × modes` noise increments.
pub fn write_paths(w: &mut impl Write, p: &PathEnsemble) -> std::io::Result<()> {
    let header = serde_json::to_string(&PathHeader::from(p)).expect("serializable header");
    w.write_all(header.as_bytes())?;
    w.write_all(b"\n")?;
    for frame in &p.frames {
        for q in frame {
            w.write_all(&q.theta1().to_le_bytes())?;
            w.write_all(&q.theta2().to_le_bytes())?;
        }
    }
    for x in &p.increments {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn paths_to_bytes(p: &PathEnsemble) -> Vec<u8> {
    let mut out = Vec::new();
    write_paths(&mut out, p).expect("writing to memory");
    out
}

pub fn read_paths(r: impl Read) -> Result<PathEnsemble> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line).map_err(io_err(Path::new("<paths>")))?;
    let h: PathHeader = serde_json::from_str(line.trim_end()).map_err(|source| FormatError::Json { path: "<paths header>".into(), source })?;
    if h.schema != PATH_SCHEMA {
        return Err(FormatError::Invalid(format!("unsupported path schema {:?}", h.schema)));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io_err(Path::new("<paths>")))?;
    let expected = 8 * (2 * h.particles * h.recorded_steps.len() + h.steps * h.modes);
    if bytes.len() != expected {
        return Err(FormatError::Invalid(format!("path payload has {} bytes, header implies {expected}", bytes.len())));
    }
    let mut vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let frames: Vec<Vec<TorusPoint>> = (0..h.recorded_steps.len())
        .map(|_| {
            (0..h.particles)
                .map(|_| {
                    let a = vals.next().unwrap_or(f64::NAN);
                    let b = vals.next().unwrap_or(f64::NAN);
                    TorusPoint::new(a, b)
                })
                .collect()
        })
        .collect();
    let increments: Vec<f64> = vals.collect();
    Ok(PathEnsemble {
        initial: frames.first().cloned().unwrap_or_default(),
        dt: h.dt,
        steps: h.steps,
        seed: h.seed,
        replica: h.replica,
        modes: h.modes,
        basis_id: parse_id(&h.basis_id)?,
        drift_id: parse_id(&h.drift_id)?,
        recorded_steps: h.recorded_steps,
        frames,
        increments,
    })
}

pub fn read_paths_file(path: &Path) -> Result<PathEnsemble> {
    read_paths(fs::File::open(path).map_err(io_err(path))?)
}

pub fn write_paths_file(path: &Path, p: &PathEnsemble) -> Result<()> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    write_paths(&mut w, p).and_then(|_| w.flush()).map_err(io_err(path))
}

/// CSV of `records` under `header`.
pub fn csv_bytes<R: AsRef<[String]>>(header: &[&str], records: impl IntoIterator<Item = R>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in records {
        w.write_record(r.as_ref())?;
    }
    w.into_inner().map_err(|e| FormatError::Invalid(e.to_string()))
}

/// `step, time, particle, theta1, theta2` for every stored frame.
pub fn paths_csv(p: &PathEnsemble) -> Result<Vec<u8>> {
    let rows = p.recorded_steps.iter().zip(&p.frames).flat_map(|(&s, frame)| {
        frame.iter().enumerate().map(move |(i, q)| {
            vec![s.to_string(), fmt(s as f64 * p.dt), i.to_string(), fmt(q.theta1()), fmt(q.theta2())]
        })
    });
    csv_bytes(&["step", "time", "particle", "theta1", "theta2"], rows)
}

/// One row per step and `(j, k)`.
pub fn series_csv(s: &TransportSeries, replica: u32) -> Result<Vec<u8>> {
    let mut rows = Vec::with_capacity((s.steps + 1) * s.phis * s.psis);
    for n in 0..=s.steps {
        for j in 0..s.phis {
            for k in 0..s.psis {
                let m = if n < s.steps { fmt(s.martingale_increment(n, j, k)) } else { String::new() };
                rows.push(vec![
                    replica.to_string(),
                    n.to_string(),
                    fmt(n as f64 * s.dt),
                    j.to_string(),
                    k.to_string(),
                    fmt(s.theta(n, j, k)),
                    fmt(s.drift_integrand(n, j, k)),
                    fmt(s.laplacian_integrand(n, j, k)),
                    m,
                ]);
            }
        }
    }
    csv_bytes(&["replica", "step", "time", "j", "k", "theta", "drift", "laplacian", "martingale_increment"], rows)
}

/// Row-major `side × side` grid of values.
pub fn grid_csv(side: usize, values: &[f64]) -> Result<Vec<u8>> {
    let header: Vec<String> = (0..side).map(|b| format!("b{b}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = values.chunks(side).map(|r| r.iter().map(|v| fmt(*v)).collect::<Vec<_>>());
    csv_bytes(&header, rows)
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt(x: f64) -> String {
    format!("{x:?}")
}

/// Parses `"1 + 0.5*cos(0,1) - sin(1,-1)"`-style sums of terms.
pub fn parse_trig(s: &str) -> Result<TrigPoly> {
    let bad = |why: &str| FormatError::Invalid(format!("test function {s:?}: {why}"));
    let mut p = TrigPoly::zero();
    let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if compact.is_empty() {
        return Err(bad("empty"));
    }
    let mut terms = Vec::new();
    let mut start = 0;
    let mut depth = 0;
    for (i, c) in compact.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            '+' | '-' if depth == 0 && i > start && !compact[..i].ends_with(['e', 'E']) => {
                terms.push(&compact[start..i]);
                start = i;
            }
            _ => {}
        }
    }
    terms.push(&compact[start..]);
    for t in terms {
        let (sign, body) = match t.strip_prefix('-') {
            Some(b) => (-1.0, b),
            None => (1.0, t.strip_prefix('+').unwrap_or(t)),
        };
        let (coef, func) = match body.find(|c: char| c.is_ascii_alphabetic() && c != 'e' && c != 'E') {
            Some(0) => (1.0, body),
            Some(i) => {
                let c = body[..i].trim_end_matches('*');
                (c.parse::<f64>().map_err(|_| bad("bad coefficient"))?, &body[i..])
            }
            None => {
                p.add_term(WaveVector::ZERO, sign * body.parse::<f64>().map_err(|_| bad("bad constant"))?, 0.0);
                continue;
            }
        };
        let (name, args) = func.split_once('(').ok_or_else(|| bad("expected cos(k1,k2) or sin(k1,k2)"))?;
        let args = args.strip_suffix(')').ok_or_else(|| bad("missing ')'"))?;
        let (a, b) = args.split_once(',').ok_or_else(|| bad("expected two wave numbers"))?;
        let k = WaveVector::new(a.parse().map_err(|_| bad("bad wave number"))?, b.parse().map_err(|_| bad("bad wave number"))?);
        match name {
            "cos" => p.add_term(k, sign * coef, 0.0),
            "sin" => p.add_term(k, 0.0, sign * coef),
            _ => return Err(bad("unknown function")),
        }
    }
    Ok(p)
}

/// Endpoint target of `minimize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TargetDoc {
    /// Row-major moments over the constraint families.
    Moments { moments: Vec<f64> },
    /// Samples `[x₁, x₂, y₁, y₂]` of the coupling.
    Coupling { pairs: Vec<[f64; 4]> },
    /// Moments of a reference run with a constant drift.
    Drift {
        velocity: [f64; 2],
        #[serde(default = "default_reference_replicas")]
        replicas: u32,
        #[serde(default = "default_reference_seed")]
        seed: u64,
    },
}

fn default_reference_replicas() -> u32 {
    1024
}

fn default_reference_seed() -> u64 {
    999
}

impl TargetDoc {
    pub fn coupling(&self) -> Option<EmpiricalCoupling> {
        match self {
            TargetDoc::Coupling { pairs } => Some(EmpiricalCoupling {
                pairs: pairs.iter().map(|p| (TorusPoint::new(p[0], p[1]), TorusPoint::new(p[2], p[3]))).collect(),
            }),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use torusflow_core::drift::rough_drift;
    use torusflow_core::flow::{simulate_ensemble, FlowConfig};
    use torusflow_core::runner::Sequential;

    #[test]
    fn basis_and_field_round_trip() {
        let b = NoiseBasis::build(2, 1.5).unwrap();
        let doc = BasisDoc::from(&b);
        let text = serde_json::to_string(&doc).unwrap();
        assert!(text.contains("\"parity\":\"A\""));
        assert_eq!(serde_json::from_str::<BasisDoc>(&text).unwrap().to_basis().unwrap(), b);

        let f = rough_drift(0.5, 3, 2, 1.0, 4).unwrap();
        let doc = FieldDoc::from(&f);
        let text = serde_json::to_string(&doc).unwrap();
        assert!(text.starts_with("{\"T\":0.5"));
        assert_eq!(serde_json::from_str::<FieldDoc>(&text).unwrap().to_field().unwrap(), f);
    }

    #[test]
    fn path_file_round_trip() {
        let basis = NoiseBasis::build(1, 0.0).unwrap();
        let drift = SpectralField::constant([0.3, 0.1], 0.1).unwrap();
        let p = simulate_ensemble(&basis, &drift, 4, FlowConfig::new(0.02, 9).with_thin(2), 1, &Sequential).unwrap().remove(0);
        let bytes = paths_to_bytes(&p);
        assert_eq!(read_paths(bytes.as_slice()).unwrap(), p);
        assert!(read_paths(&bytes[..bytes.len() - 3]).is_err());
        let csv = String::from_utf8(paths_csv(&p).unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 1 + p.frames.len() * 16);
    }

    #[test]
    fn target_documents() {
        let t: TargetDoc = serde_json::from_str(r#"{"kind":"drift","velocity":[0.3,0.0]}"#).unwrap();
        assert_eq!(t, TargetDoc::Drift { velocity: [0.3, 0.0], replicas: 1024, seed: 999 });
        let c: TargetDoc = serde_json::from_str(r#"{"kind":"coupling","pairs":[[0,0,1,1]]}"#).unwrap();
        assert_eq!(c.coupling().unwrap().len(), 1);
        assert!(serde_json::from_str::<TargetDoc>(r#"{"kind":"moments"}"#).is_err());
    }

    #[test]
    fn parses_test_functions() {
        let p = parse_trig("1 + 0.5*cos(0,1) - sin(1,-1) + 2e-1cos(2,0)").unwrap();
        let mut want = TrigPoly::constant(1.0);
        want.add_term(WaveVector::new(0, 1), 0.5, 0.0);
        want.add_term(WaveVector::new(1, -1), 0.0, -1.0);
        want.add_term(WaveVector::new(2, 0), 0.2, 0.0);
        assert_eq!(p, want);
        assert!(parse_trig("tan(1,0)").is_err());
        assert!(parse_trig("").is_err());
    }
}
