//! Batch commands behind the `riccati-lqr` binary: solve, verify and sweep.
//!
//! Every command writes `manifest.json` into its output directory. The
//! manifest digest covers everything that determines the outputs (command,
//! config contents, seed and options) and excludes the timestamp and the
//! output location, so identical runs produce identical files. JSON outputs
//! carry the digest in a `manifest_digest` field and CSV outputs start with
//! a `# manifest <digest>` comment line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use riccati_lqr::closed_loop::{feedback_pair, solve_phi, FlowSummary};
use riccati_lqr::config::ProblemConfig;
use riccati_lqr::linalg::{bilinear, spectral_norm};
use riccati_lqr::riccati::{class_q_certificate, solve_ire_picard, RiccatiSummary};
use riccati_lqr::verify::{resolve_suites, value_identity, VerificationReport, VerifyContext};

pub const THREADS_ENV: &str = "RICCATI_LQR_THREADS";

/// Options shared by all commands; unused ones stay at their defaults.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub tol_overrides: Vec<(String, f64)>,
    pub suites: Vec<String>,
    pub perturb: f64,
    pub parameter: Option<String>,
    pub ladder: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    /// SHA-256 of the config file contents.
    pub config_sha256: String,
    pub seed: u64,
    pub output_dir: String,
    pub tolerance_overrides: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub suites: Vec<String>,
    #[serde(default)]
    pub perturb: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ladder: Vec<f64>,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str, opts: &RunOptions) -> Result<Self> {
        let text = fs::read(&opts.config).with_context(|| format!("reading {}", opts.config.display()))?;
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| format!("unix:{}", d.as_secs()))
            .unwrap_or_else(|_| "unix:0".into());
        Ok(Self {
            command: command.into(),
            config_path: opts.config.display().to_string(),
            config_sha256: hex::encode(Sha256::digest(&text)),
            seed: opts.seed,
            output_dir: opts.out.display().to_string(),
            tolerance_overrides: opts.tol_overrides.iter().cloned().collect(),
            suites: opts.suites.clone(),
            perturb: opts.perturb,
            parameter: opts.parameter.clone(),
            ladder: opts.ladder.clone(),
            timestamp,
        })
    }

    /// Hex SHA-256 of the manifest without timestamp, paths and output location.
    pub fn digest(&self) -> String {
        let mut keyed = self.clone();
        keyed.timestamp.clear();
        keyed.config_path.clear();
        keyed.output_dir.clear();
        let bytes = serde_json::to_vec(&keyed).expect("manifest is serializable");
        hex::encode(Sha256::digest(bytes))
    }
}

/// What a command produced; `passed` decides the exit status.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub files: Vec<PathBuf>,
    pub text: String,
}

/// Parses `KEY=VALUE` for `--tol-override`.
pub fn parse_override(s: &str) -> Result<(String, f64)> {
    let (k, v) = s
        .split_once('=')
        .with_context(|| format!("expected KEY=VALUE, got {s:?}"))?;
    let v: f64 = v
        .trim()
        .parse()
        .with_context(|| format!("tolerance {k} is not a number: {v:?}"))?;
    Ok((k.trim().to_string(), v))
}

/// Sizes the global rayon pool from `RICCATI_LQR_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        ensure!(n > 0, "{THREADS_ENV} must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn load_config(opts: &RunOptions) -> Result<ProblemConfig> {
    let mut cfg = ProblemConfig::load(&opts.config)?;
    for (k, v) in &opts.tol_overrides {
        cfg.tolerances.set(k, *v)?;
    }
    Ok(cfg)
}

struct OutputDir {
    root: PathBuf,
    digest: String,
    files: Vec<PathBuf>,
}

impl OutputDir {
    fn create(manifest: &RunManifest, root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let mut dir = Self {
            root: root.to_path_buf(),
            digest: manifest.digest(),
            files: Vec::new(),
        };
        let mut value = serde_json::to_value(manifest)?;
        value["digest"] = dir.digest.clone().into();
        dir.write_text("manifest.json", &(serde_json::to_string_pretty(&value)? + "\n"))?;
        Ok(dir)
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.root.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(path);
        Ok(())
    }

    /// Writes `{"manifest_digest": ..., <key>: value}`.
    fn write_json<T: Serialize>(&mut self, name: &str, key: &str, value: &T) -> Result<()> {
        let mut map = serde_json::Map::new();
        map.insert("manifest_digest".into(), self.digest.clone().into());
        map.insert(key.into(), serde_json::to_value(value)?);
        self.write_text(name, &(serde_json::to_string_pretty(&map)? + "\n"))
    }

    /// Lets `write` produce a CSV file, then prefixes it with the digest line.
    fn write_csv(&mut self, name: &str, write: impl FnOnce(&Path) -> riccati_lqr::Result<()>) -> Result<()> {
        let path = self.root.join(name);
        write(&path)?;
        let body = fs::read_to_string(&path)?;
        fs::write(&path, format!("# manifest {}\n{body}", self.digest))?;
        self.files.push(path);
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct ProbeValue {
    x: Vec<f64>,
    dre: f64,
    ire: f64,
}

#[derive(Debug, Serialize)]
struct SolveSummary {
    problem_kind: riccati_lqr::config::ProblemKind,
    state_dim: usize,
    control_dim: usize,
    node_count: usize,
    grading_exponent: f64,
    alpha: f64,
    anchor: f64,
    dre: RiccatiSummary,
    ire: RiccatiSummary,
    flow: FlowSummary,
    /// `‖P_dre(s) − Q_ire(s)‖₂` at the anchor.
    method_gap: f64,
    /// `|⟨P(s)x,x⟩ − J_s(û)|` for the stored optimal pair.
    value_gap: f64,
    pair_initial_state: Vec<f64>,
    values: Vec<ProbeValue>,
}

/// Solves the DRE and the IRE, the closed loop at the anchor, and the optimal
/// pair from the first probe vector.
pub fn cmd_solve(opts: &RunOptions) -> Result<Outcome> {
    let manifest = RunManifest::new("solve", opts)?;
    let cfg = load_config(opts)?;
    let ctx = VerifyContext::from_config(&cfg, opts.seed, 0.0)?;
    let q = solve_ire_picard(&ctx.spec, &ctx.table)?;
    let s = ctx.anchor_node();
    let flow = solve_phi(&ctx.spec, &ctx.table, &ctx.p, s)?;
    let probes = ctx.probes("solve");
    let x = &probes[0];
    let pair = feedback_pair(&ctx.spec, &ctx.p, &flow, x)?;

    let mut out = OutputDir::create(&manifest, &opts.out)?;
    out.write_csv("p_dre.csv", |p| ctx.p.write_csv(p))?;
    out.write_csv("p_ire.csv", |p| q.write_csv(p))?;
    out.write_csv("flow.csv", |p| flow.write_csv(p))?;
    out.write_csv("pair_state.csv", |p| pair.state.write_csv(p, "y"))?;
    out.write_csv("pair_control.csv", |p| pair.control.write_csv(p, "u"))?;

    let summary = SolveSummary {
        problem_kind: cfg.problem_kind,
        state_dim: ctx.spec.state_dim,
        control_dim: ctx.spec.control_dim,
        node_count: ctx.spec.grid().len(),
        grading_exponent: ctx.spec.grid().grading_exponent(),
        alpha: ctx.spec.alpha,
        anchor: ctx.spec.grid().node(s),
        dre: ctx.p.summary(),
        ire: q.summary(),
        flow: flow.summary(),
        method_gap: spectral_norm(&(ctx.p.at(s) - q.at(s))),
        value_gap: value_identity(&ctx.spec, &ctx.table, &ctx.p, &flow, x)?,
        pair_initial_state: x.iter().copied().collect(),
        values: probes
            .iter()
            .map(|x| ProbeValue {
                x: x.iter().copied().collect(),
                dre: bilinear(x, ctx.p.at(s), x),
                ire: bilinear(x, q.at(s), x),
            })
            .collect(),
    };
    out.write_json("summary.json", "summary", &summary)?;

    let mut text = String::new();
    writeln!(
        text,
        "solved {} (n = {}, m = {}, {} nodes)",
        opts.config.display(),
        summary.state_dim,
        summary.control_dim,
        summary.node_count
    )?;
    writeln!(
        text,
        "  <P(s)e1,e1>  dre {:.10}  ire {:.10}",
        summary.values[0].dre, summary.values[0].ire
    )?;
    writeln!(text, "  ||P_dre(s) - Q_ire(s)|| = {:.3e}", summary.method_gap)?;
    writeln!(
        text,
        "  picard iterations {} (sweeps {})",
        summary.ire.iterations, summary.ire.sweeps
    )?;
    writeln!(text, "  value identity gap {:.3e}", summary.value_gap)?;
    Ok(Outcome {
        passed: true,
        files: out.files,
        text,
    })
}

#[derive(Debug, Serialize)]
struct SuiteVerdict {
    suite: String,
    passed: bool,
    checks: usize,
    failures: Vec<String>,
}

/// Runs the selected suites (all when none are given) and writes one JSON
/// report per suite plus `verify.json`.
pub fn cmd_verify(opts: &RunOptions) -> Result<Outcome> {
    let suites = resolve_suites(&opts.suites)?;
    let manifest = RunManifest::new("verify", opts)?;
    let cfg = load_config(opts)?;
    let ctx = VerifyContext::from_config(&cfg, opts.seed, opts.perturb)?;
    let mut out = OutputDir::create(&manifest, &opts.out)?;
    let mut verdicts = Vec::new();
    let mut text = String::new();
    for suite in suites {
        let report: VerificationReport = ctx.run(suite)?;
        out.write_json(&format!("{suite}.json"), "report", &report)?;
        let failures: Vec<String> = report
            .failures()
            .map(|c| format!("{} residual {:.3e} > {:.1e}", c.name, c.residual, c.tolerance))
            .collect();
        writeln!(
            text,
            "{:<22} {}  ({} checks, worst {:.3e})",
            suite,
            if report.passed() { "PASS" } else { "FAIL" },
            report.checks.len(),
            report.checks.iter().map(|c| c.residual).fold(0.0, f64::max)
        )?;
        for f in &failures {
            writeln!(text, "    {f}")?;
        }
        verdicts.push(SuiteVerdict {
            suite: suite.into(),
            passed: report.passed(),
            checks: report.checks.len(),
            failures,
        });
    }
    let passed = verdicts.iter().all(|v| v.passed);
    out.write_json("verify.json", "suites", &verdicts)?;
    writeln!(text, "overall {}", if passed { "PASS" } else { "FAIL" })?;
    Ok(Outcome {
        passed,
        files: out.files,
        text,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    NodeCount,
    StateDim,
    Alpha,
}

impl std::str::FromStr for SweepParameter {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "node_count" => Self::NodeCount,
            "state_dim" => Self::StateDim,
            "alpha" => Self::Alpha,
            other => bail!("unknown sweep parameter {other:?}; expected node_count, state_dim or alpha"),
        })
    }
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            Self::NodeCount => "node_count",
            Self::StateDim => "state_dim",
            Self::Alpha => "alpha",
        }
    }
}

/// Residual columns of a sweep, in output order.
pub const SWEEP_COLUMNS: [&str; 4] = ["sandwich_gap", "value_gap", "fundamental_gap", "class_q_certificate"];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub parameter: SweepParameter,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Observed order of column `col` between rows `i−1` and `i`.
    ///
    /// For node counts this is `ln(e_{i−1}/e_i) / ln(h_{i−1}/h_i)` with
    /// `h ∝ 1/(N−1)`, which is the log₂ ratio on a doubling ladder; for the
    /// other parameters it is the plain log₂ ratio. `None` when either
    /// residual is zero.
    pub fn order(&self, i: usize, col: usize) -> Option<f64> {
        if i == 0 {
            return None;
        }
        let (a, b) = (&self.rows[i - 1], &self.rows[i]);
        let (ea, eb) = (a.residuals[col], b.residuals[col]);
        if !(ea > 0.0 && eb > 0.0) {
            return None;
        }
        let ratio = (ea / eb).ln();
        Some(match self.parameter {
            SweepParameter::NodeCount => ratio / ((b.value - 1.0) / (a.value - 1.0)).ln(),
            _ => ratio / std::f64::consts::LN_2,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(self.parameter.name());
        for c in SWEEP_COLUMNS {
            let _ = write!(out, ",{c},order_{c}");
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{:?}", row.value);
            for (k, r) in row.residuals.iter().enumerate() {
                let order = self.order(i, k).map_or("n/a".to_string(), |o| format!("{o:?}"));
                let _ = write!(out, ",{r:?},{order}");
            }
            out.push('\n');
        }
        out
    }
}

/// Checks a sweep ladder: at least three strictly monotone values, integral
/// where the parameter is a count.
pub fn validate_ladder(parameter: SweepParameter, ladder: &[f64]) -> Result<()> {
    ensure!(
        ladder.len() >= 3,
        "a sweep ladder needs at least 3 values, got {}",
        ladder.len()
    );
    let up = ladder.windows(2).all(|w| w[1] > w[0]);
    let down = ladder.windows(2).all(|w| w[1] < w[0]);
    ensure!(up || down, "sweep ladder must be strictly monotone, got {ladder:?}");
    if parameter != SweepParameter::Alpha {
        for v in ladder {
            ensure!(
                v.fract() == 0.0 && *v >= 1.0,
                "{} values must be positive integers, got {v}",
                parameter.name()
            );
        }
    }
    Ok(())
}

fn configure(cfg: &ProblemConfig, parameter: SweepParameter, value: f64) -> Result<ProblemConfig> {
    Ok(match parameter {
        SweepParameter::NodeCount => cfg.with_node_count(value as usize)?,
        SweepParameter::StateDim => cfg.with_state_dim(value as usize)?,
        SweepParameter::Alpha => cfg.with_alpha(value)?,
    })
}

/// Solves the problem at every ladder value and collects the residual columns.
pub fn sweep_table(cfg: &ProblemConfig, parameter: SweepParameter, ladder: &[f64], seed: u64) -> Result<SweepTable> {
    validate_ladder(parameter, ladder)?;
    let mut rows = Vec::new();
    for &value in ladder {
        let mut c = configure(cfg, parameter, value)?;
        c.verify.draws = c.verify.draws.min(20);
        let ctx = VerifyContext::from_config(&c, seed, 0.0)?;
        let q = ctx.q_ire()?;
        let sandwich = ctx
            .anchors()
            .iter()
            .map(|&s| spectral_norm(&(ctx.p.at(s) - q.at(s))))
            .fold(0.0, f64::max);
        let value_gap = ctx.run("value")?.worst("value.").unwrap_or(0.0);
        let fundamental = ctx
            .run("fundamental-identity")?
            .worst("fundamental.draw")
            .unwrap_or(0.0);
        let cert = class_q_certificate(&ctx.p, &ctx.spec)?.certificate;
        rows.push(SweepRow {
            value,
            residuals: vec![sandwich, value_gap, fundamental, cert],
        });
    }
    Ok(SweepTable { parameter, rows })
}

pub fn cmd_sweep(opts: &RunOptions) -> Result<Outcome> {
    let parameter: SweepParameter = opts
        .parameter
        .as_deref()
        .context("sweep needs --parameter (node_count, state_dim or alpha)")?
        .parse()?;
    validate_ladder(parameter, &opts.ladder)?;
    let manifest = RunManifest::new("sweep", opts)?;
    let cfg = load_config(opts)?;
    let table = sweep_table(&cfg, parameter, &opts.ladder, opts.seed)?;
    let mut out = OutputDir::create(&manifest, &opts.out)?;
    let csv = table.to_csv();
    out.write_text("sweep.csv", &format!("# manifest {}\n{csv}", out.digest))?;
    Ok(Outcome {
        passed: true,
        files: out.files,
        text: csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse() {
        assert_eq!(parse_override("sandwich=1e-4").unwrap(), ("sandwich".into(), 1e-4));
        assert!(parse_override("sandwich").is_err());
        assert!(parse_override("sandwich=abc").is_err());
    }

    #[test]
    fn ladders_are_validated() {
        assert!(validate_ladder(SweepParameter::NodeCount, &[129.0, 257.0, 513.0]).is_ok());
        assert!(validate_ladder(SweepParameter::Alpha, &[0.4, 0.25, 0.1]).is_ok());
        assert!(validate_ladder(SweepParameter::NodeCount, &[129.0, 257.0]).is_err());
        assert!(validate_ladder(SweepParameter::NodeCount, &[129.0, 513.0, 257.0]).is_err());
        assert!(validate_ladder(SweepParameter::StateDim, &[4.0, 8.5, 16.0]).is_err());
        assert!("bogus".parse::<SweepParameter>().is_err());
    }

    #[test]
    fn orders_and_zero_columns() {
        let table = SweepTable {
            parameter: SweepParameter::NodeCount,
            rows: vec![
                SweepRow {
                    value: 129.0,
                    residuals: vec![1.6e-5, 0.0, 1.0, 1.0],
                },
                SweepRow {
                    value: 257.0,
                    residuals: vec![1e-6, 0.0, 1.0, 1.0],
                },
                SweepRow {
                    value: 513.0,
                    residuals: vec![6.25e-8, 0.0, 1.0, 1.0],
                },
            ],
        };
        assert!((table.order(1, 0).unwrap() - 4.0).abs() < 1e-12);
        assert!(table.order(2, 1).is_none());
        let csv = table.to_csv();
        assert!(csv.starts_with("node_count,sandwich_gap,order_sandwich_gap"));
        assert!(csv.lines().nth(2).unwrap().contains(",0.0,n/a"));
    }

    #[test]
    fn digest_ignores_timestamp_and_location() {
        let a = RunManifest {
            command: "verify".into(),
            config_path: "a.json".into(),
            config_sha256: "00".into(),
            seed: 3,
            output_dir: "out1".into(),
            tolerance_overrides: BTreeMap::new(),
            suites: vec![],
            perturb: 0.0,
            parameter: None,
            ladder: vec![],
            timestamp: "unix:1".into(),
        };
        let mut b = a.clone();
        b.timestamp = "unix:2".into();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        b.seed = 4;
        assert_ne!(a.digest(), b.digest());
    }
}
