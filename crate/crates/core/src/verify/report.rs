use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One executed check: residual against tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub inputs_digest: String,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Log-log slope fitted over a refinement or ε ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slope {
    pub name: String,
    pub slope: f64,
    /// `(abscissa, value)` pairs the slope was fitted to.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub suite: String,
    pub checks: Vec<CheckRecord>,
    pub slopes: Vec<Slope>,
    /// Informational quantities that carry no verdict.
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl VerificationReport {
    pub fn new(suite: impl Into<String>) -> Self {
        Self {
            suite: suite.into(),
            checks: Vec::new(),
            slopes: Vec::new(),
            metrics: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    /// Records a check; the verdict is `residual ≤ tolerance` (NaN fails).
    pub fn check(&mut self, name: impl Into<String>, digest: String, residual: f64, tolerance: f64) -> bool {
        let passed = residual <= tolerance;
        self.checks.push(CheckRecord {
            name: name.into(),
            inputs_digest: digest,
            residual,
            tolerance,
            passed,
        });
        passed
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRecord> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// Largest residual among checks whose name starts with `prefix`.
    pub fn worst(&self, prefix: &str) -> Option<f64> {
        self.checks
            .iter()
            .filter(|c| c.name.starts_with(prefix))
            .map(|c| c.residual)
            .reduce(f64::max)
    }

    pub fn merge(&mut self, other: VerificationReport) {
        self.checks.extend(other.checks);
        self.slopes.extend(other.slopes);
        self.metrics.extend(other.metrics);
        self.notes.extend(other.notes);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }

    /// Aligned-column rendering for terminals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "suite {} [{verdict}]", self.suite);
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(4).max(5);
        let _ = writeln!(
            out,
            "  {:<width$}  {:<16}  {:>12}  {:>10}  verdict",
            "check", "inputs", "residual", "tolerance"
        );
        for c in &self.checks {
            let _ = writeln!(
                out,
                "  {:<width$}  {:<16}  {:>12.4e}  {:>10.1e}  {}",
                c.name,
                c.inputs_digest,
                c.residual,
                c.tolerance,
                if c.passed { "pass" } else { "FAIL" }
            );
        }
        for s in &self.slopes {
            let _ = writeln!(out, "  slope {:<width$} {:>8.4}", s.name, s.slope);
        }
        for (k, v) in &self.metrics {
            let _ = writeln!(out, "  metric {k} = {v:.6e}");
        }
        for n in &self.notes {
            let _ = writeln!(out, "  note: {n}");
        }
        out
    }
}

/// Short hex digest of a label and the bit patterns of the inputs.
pub fn digest(label: &str, values: &[f64]) -> String {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    for v in values {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Least-squares slope of `ln value` against `ln abscissa`; entries with a
/// non-positive coordinate are skipped.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
