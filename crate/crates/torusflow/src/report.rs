//! Schema-versioned check reports and their merged summaries.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::plot::{LinePlot, Series};

pub const REPORT_SCHEMA: &str = "torusflow.report/1";
pub const SUMMARY_SCHEMA: &str = "torusflow.summary/1";

/// An `f64` that survives JSON: non-finite values are written as strings.
#[derive(Debug, Clone, Copy, Default)]
pub struct Num(pub f64);

impl PartialEq for Num {
    fn eq(&self, o: &Self) -> bool {
        self.0 == o.0 || (self.0.is_nan() && o.0.is_nan())
    }
}

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let x = self.0;
        if x.is_finite() {
            s.serialize_f64(x)
        } else if x.is_nan() {
            s.serialize_str("NaN")
        } else if x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            F(f64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::F(x) => Ok(Num(x)),
            Raw::S(s) => match s.as_str() {
                "NaN" => Ok(Num(f64::NAN)),
                "inf" => Ok(Num(f64::INFINITY)),
                "-inf" => Ok(Num(f64::NEG_INFINITY)),
                _ => Err(serde::de::Error::custom(format!("{s:?} is not a number"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: Num,
    pub limit: Num,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Families {
    pub phis: Vec<String>,
    pub psis: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub command: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    /// Names of failed checks and errors, machine-readable.
    pub failures: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub families: Option<Families>,
    /// Run parameters such as `dt`, `T`, `grid`, `replicas`.
    pub parameters: BTreeMap<String, Num>,
    pub metrics: BTreeMap<String, Num>,
    /// Command-specific payload.
    #[serde(default)]
    pub details: serde_json::Value,
}

impl Report {
    pub fn new(command: &str) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            command: command.into(),
            passed: true,
            checks: Vec::new(),
            failures: Vec::new(),
            families: None,
            parameters: BTreeMap::new(),
            metrics: BTreeMap::new(),
            details: serde_json::Value::Null,
        }
    }

    pub fn check(&mut self, name: impl Into<String>, passed: bool, value: f64, limit: f64) -> &mut Self {
        let name = name.into();
        if !passed {
            self.failures.push(name.clone());
            self.passed = false;
        }
        self.checks.push(Check { name, passed, value: Num(value), limit: Num(limit) });
        self
    }

    /// `value ≤ limit`.
    pub fn check_le(&mut self, name: impl Into<String>, value: f64, limit: f64) -> &mut Self {
        self.check(name, value <= limit, value, limit)
    }

    /// Records an error that prevented a check from running.
    pub fn fail(&mut self, message: impl Into<String>) -> &mut Self {
        self.failures.push(message.into());
        self.passed = false;
        self
    }

    pub fn param(&mut self, name: &str, v: f64) -> &mut Self {
        self.parameters.insert(name.into(), Num(v));
        self
    }

    pub fn metric(&mut self, name: &str, v: f64) -> &mut Self {
        self.metrics.insert(name.into(), Num(v));
        self
    }

    /// Human-readable table of the checks.
    pub fn to_markdown(&self) -> String {
        let mut s = format!("# {}: {}\n\n| check | value | limit | result |\n|---|---|---|---|\n", self.command, if self.passed { "PASS" } else { "FAIL" });
        for c in &self.checks {
            let _ = writeln!(s, "| {} | {:.6e} | {:.6e} | {} |", c.name, c.value.0, c.limit.0, if c.passed { "pass" } else { "FAIL" });
        }
        for f in self.failures.iter().filter(|f| !self.checks.iter().any(|c| &c.name == *f)) {
            let _ = writeln!(s, "\nerror: {f}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run: String,
    pub command: String,
    pub dt: Option<Num>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub command: String,
    pub check: String,
    /// One entry per run, `None` when the run lacks the check.
    pub values: Vec<Option<Num>>,
    pub passed: Vec<Option<bool>>,
    /// Value at the coarsest `dt` over value at the finest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence_ratio: Option<Num>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub passed: bool,
    pub runs: Vec<RunRow>,
    pub dt_levels: Vec<f64>,
    pub rows: Vec<SummaryRow>,
    pub reports: Vec<Report>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MergeError {
    #[error("no reports to merge")]
    Empty,
    #[error("runs {0} and {1} use different test families")]
    MismatchedFamilies(String, String),
}

pub fn merge(reports: &[(String, Report)]) -> Result<Summary, MergeError> {
    if reports.is_empty() {
        return Err(MergeError::Empty);
    }
    let mut fam: Option<(&str, &Families)> = None;
    for (name, r) in reports {
        if let Some(f) = &r.families {
            match fam {
                Some((first, g)) if g != f => return Err(MergeError::MismatchedFamilies(first.into(), name.clone())),
                None => fam = Some((name, f)),
                _ => {}
            }
        }
    }
    let dts: Vec<Option<f64>> = reports.iter().map(|(_, r)| r.parameters.get("dt").map(|n| n.0)).collect();
    let mut dt_levels: Vec<f64> = dts.iter().flatten().copied().collect();
    dt_levels.sort_by(|a, b| a.total_cmp(b));
    dt_levels.dedup();

    let mut keys: Vec<(String, String)> = Vec::new();
    for (_, r) in reports {
        for c in &r.checks {
            let k = (r.command.clone(), c.name.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
    }
    let rows = keys
        .into_iter()
        .map(|(command, check)| {
            let find = |r: &Report| (r.command == command).then(|| r.checks.iter().find(|c| c.name == check)).flatten().cloned();
            let values: Vec<Option<Num>> = reports.iter().map(|(_, r)| find(r).map(|c| c.value)).collect();
            let passed = reports.iter().map(|(_, r)| find(r).map(|c| c.passed)).collect();
            let convergence_ratio = (dt_levels.len() >= 2)
                .then(|| {
                    let at = |dt: f64| values.iter().zip(&dts).find(|(v, d)| v.is_some() && **d == Some(dt)).and_then(|(v, _)| *v);
                    match (at(dt_levels[dt_levels.len() - 1]), at(dt_levels[0])) {
                        (Some(coarse), Some(fine)) => Some(Num(coarse.0 / fine.0)),
                        _ => None,
                    }
                })
                .flatten();
            SummaryRow { command, check, values, passed, convergence_ratio }
        })
        .collect();
    Ok(Summary {
        schema: SUMMARY_SCHEMA.into(),
        passed: reports.iter().all(|(_, r)| r.passed),
        runs: reports
            .iter()
            .zip(&dts)
            .map(|((n, r), dt)| RunRow { run: n.clone(), command: r.command.clone(), dt: dt.map(Num), passed: r.passed })
            .collect(),
        dt_levels,
        rows,
        reports: reports.iter().map(|(_, r)| r.clone()).collect(),
    })
}

impl Summary {
    pub fn to_markdown(&self) -> String {
        let ratio = self.dt_levels.len() >= 2;
        let mut s = String::from("# Summary\n\n| run | command | dt | result |\n|---|---|---|---|\n");
        for r in &self.runs {
            let dt = r.dt.map_or(String::from("-"), |d| format!("{}", d.0));
            let _ = writeln!(s, "| {} | {} | {} | {} |", r.run, r.command, dt, if r.passed { "PASS" } else { "FAIL" });
        }
        s.push_str("\n| command | check |");
        for r in &self.runs {
            let _ = write!(s, " {} |", r.run);
        }
        if ratio {
            s.push_str(" convergence ratio |");
        }
        s.push_str("\n|---|---|");
        s.push_str(&"---|".repeat(self.runs.len() + usize::from(ratio)));
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "| {} | {} |", row.command, row.check);
            for (v, p) in row.values.iter().zip(&row.passed) {
                match (v, p) {
                    (Some(v), Some(p)) => {
                        let _ = write!(s, " {:.4e} {} |", v.0, if *p { "pass" } else { "FAIL" });
                    }
                    _ => s.push_str(" - |"),
                }
            }
            if ratio {
                match row.convergence_ratio {
                    Some(r) => {
                        let _ = write!(s, " {:.3} |", r.0);
                    }
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }

    /// One line per check across runs, normalized by its limit.
    pub fn comparison_plot(&self) -> LinePlot {
        let series = self
            .rows
            .iter()
            .map(|row| {
                let pts = row.values.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i as f64, v.0))).collect();
                Series::new(format!("{}: {}", row.command, row.check), pts)
            })
            .collect();
        LinePlot { title: "checks by run".into(), x_label: "run index".into(), y_label: "value".into(), series, hlines: Vec::new(), log_y: false }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dt: f64, v: f64) -> Report {
        let mut r = Report::new("transport");
        r.check_le("bracket", v, 0.1).check_le("other", 1.0, 2.0).param("dt", dt).metric("x", f64::INFINITY);
        r.families = Some(Families { phis: vec!["1".into()], psis: vec!["cos(1,0)".into()] });
        r
    }

    #[test]
    fn json_round_trip_with_non_finite_values() {
        let mut r = sample(1e-3, f64::NAN);
        r.fail("boom");
        let text = serde_json::to_string(&r).unwrap();
        let back: Report = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        assert!(!back.passed);
        assert_eq!(back.failures, vec!["bracket".to_string(), "boom".to_string()]);
    }

    #[test]
    fn merge_adds_ratio_for_two_dt_levels() {
        let s = merge(&[("a".into(), sample(2e-3, 0.08)), ("b".into(), sample(1e-3, 0.05))]).unwrap();
        assert_eq!(s.dt_levels, vec![1e-3, 2e-3]);
        let row = &s.rows[0];
        assert!((row.convergence_ratio.unwrap().0 - 1.6).abs() < 1e-12);
        assert!(s.to_markdown().contains("convergence ratio"));

        let single = merge(&[("a".into(), sample(1e-3, 0.05))]).unwrap();
        assert!(single.rows.iter().all(|r| r.convergence_ratio.is_none()));
        assert_eq!(single.reports[0], sample(1e-3, 0.05));
        assert!(!single.to_markdown().contains("convergence ratio"));
    }

    #[test]
    fn merge_refusals() {
        assert_eq!(merge(&[]), Err(MergeError::Empty));
        let mut other = sample(1e-3, 0.05);
        other.families.as_mut().unwrap().psis.push("sin(1,0)".into());
        assert!(matches!(merge(&[("a".into(), sample(1e-3, 0.05)), ("b".into(), other)]), Err(MergeError::MismatchedFamilies(..))));
    }
}
