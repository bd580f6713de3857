//! JSON problem configurations.
//!
//! A config names the problem kind, its dimensions and grid, and a
//! kind-specific `coefficients` object:
//!
//! ```json
//! {
//!   "problem_kind": "scalar",
//!   "state_dim": 1, "control_dim": 1,
//!   "horizon": 1.0, "alpha": 0.25, "nu": 1.0,
//!   "grid": { "node_count": 513, "grading_exponent": 2.0 },
//!   "coefficients": { "a": -1.0, "g": 1.0, "m": 0.0, "n": 1.0, "p_t": 1.0 }
//! }
//! ```
//!
//! Custom matrices are read from CSV files `<name>_t<index>.csv` (row-major,
//! one matrix per file) in a directory relative to the config file. A name
//! with only `<name>_t0.csv` present is constant in time.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg::Mat;
use crate::path::OperatorPath;
use crate::problem::{
    build_heat_problem, default_grading, diagonal_problem, scalar_problem, Actuation, FinalCost, HeatConfig,
    ProblemSpec, ScalarFn,
};
use crate::verify::Tolerances;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Scalar,
    Diagonal,
    Heat1d,
    CustomMatrices,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub node_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grading_exponent: Option<f64>,
}

/// Anchors, ladders and draw counts used by the verification suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    /// Anchor time `s`.
    pub anchor: f64,
    /// Second anchor `t ≥ s` for the B–C link.
    pub link_time: f64,
    /// First rung of the geometric ladder for limit operators.
    pub eps0: f64,
    pub tail_ladder: Vec<f64>,
    pub draws: usize,
    pub symmetrization_draws: usize,
    pub optimality_draws: usize,
    /// Size of the `Q + δI` perturbation used to probe detection power.
    pub detection_perturbation: f64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            anchor: 0.0,
            link_time: 0.3,
            eps0: 0.2,
            tail_ladder: vec![0.2, 0.1, 0.05, 0.025],
            draws: 100,
            symmetrization_draws: 20,
            optimality_draws: 50,
            detection_perturbation: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub problem_kind: ProblemKind,
    pub state_dim: usize,
    pub control_dim: usize,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_nu")]
    pub nu: f64,
    pub grid: GridConfig,
    pub coefficients: serde_json::Value,
    #[serde(default)]
    pub verify: VerifySettings,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Directory that relative paths resolve against; set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_horizon() -> f64 {
    1.0
}

fn default_alpha() -> f64 {
    0.25
}

fn default_nu() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScalarCoefficients {
    a: ScalarFn,
    g: ScalarFn,
    m: ScalarFn,
    n: ScalarFn,
    p_t: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiagonalCoefficients {
    a: Vec<ScalarFn>,
    /// Rows of the constant control matrix.
    g: Vec<Vec<f64>>,
    m: Vec<ScalarFn>,
    n: Vec<ScalarFn>,
    p_t: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeatCoefficients {
    diffusion: ScalarFn,
    #[serde(default = "default_actuation")]
    actuation: Actuation,
    #[serde(default = "one")]
    state_weight: f64,
    #[serde(default = "one")]
    control_weight: f64,
    final_cost: FinalCost,
}

fn default_actuation() -> Actuation {
    Actuation::Left
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CustomCoefficients {
    directory: PathBuf,
}

fn config_error(key: &str, detail: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        detail: detail.into(),
    }
}

fn parse_coefficients<T: serde::de::DeserializeOwned>(value: &serde_json::Value, kind: &str) -> Result<T> {
    serde_json::from_value(value.clone()).map_err(|e| config_error("coefficients", format!("{kind}: {e}")))
}

impl ProblemConfig {
    /// Parses config text; `origin` names the source in diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| config_error(origin, format!("line {} column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(config_error("state_dim", "must be positive"));
        }
        if self.control_dim == 0 {
            return Err(config_error("control_dim", "must be positive"));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(config_error(
                "horizon",
                format!("must be positive, got {}", self.horizon),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(config_error(
                "alpha",
                format!("must lie in (0, 1/2), got {}", self.alpha),
            ));
        }
        if !(self.nu > 0.0) {
            return Err(config_error("nu", format!("must be positive, got {}", self.nu)));
        }
        if self.grid.node_count < 3 {
            return Err(config_error("grid.node_count", "need at least 3 nodes"));
        }
        let v = &self.verify;
        if !(0.0..self.horizon).contains(&v.anchor) {
            return Err(config_error(
                "verify.anchor",
                format!("must lie in [0, T), got {}", v.anchor),
            ));
        }
        if !(v.link_time >= v.anchor && v.link_time < self.horizon) {
            return Err(config_error("verify.link_time", "must lie in [anchor, T)"));
        }
        if v.tail_ladder.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(config_error("verify.tail_ladder", "must be strictly decreasing"));
        }
        Ok(())
    }

    pub fn grading(&self) -> f64 {
        self.grid
            .grading_exponent
            .unwrap_or_else(|| default_grading(self.alpha, self.grid.node_count))
    }

    pub fn time_grid(&self) -> Result<Arc<TimeGrid>> {
        Ok(Arc::new(TimeGrid::new(
            0.0,
            self.horizon,
            self.grid.node_count,
            self.grading(),
        )?))
    }

    /// Builds the problem and checks the declared dimensions against it.
    pub fn build(&self) -> Result<ProblemSpec> {
        let spec = match self.problem_kind {
            ProblemKind::Scalar => {
                let c: ScalarCoefficients = parse_coefficients(&self.coefficients, "scalar")?;
                scalar_problem(self.time_grid()?, self.alpha, c.a, c.g, c.m, c.n, c.p_t, self.nu)?
            }
            ProblemKind::Diagonal => {
                let c: DiagonalCoefficients = parse_coefficients(&self.coefficients, "diagonal")?;
                let rows = c.g.len();
                let cols = c.g.first().map_or(0, Vec::len);
                if c.g.iter().any(|r| r.len() != cols) {
                    return Err(config_error("coefficients.g", "rows have different lengths"));
                }
                let g = Mat::from_row_iterator(rows, cols, c.g.into_iter().flatten());
                diagonal_problem(self.time_grid()?, self.alpha, c.a, g, c.m, c.n, c.p_t, self.nu)?
            }
            ProblemKind::Heat1d => {
                let c: HeatCoefficients = parse_coefficients(&self.coefficients, "heat1d")?;
                build_heat_problem(&HeatConfig {
                    n: self.state_dim,
                    diffusion: c.diffusion,
                    actuation: c.actuation,
                    state_weight: c.state_weight,
                    control_weight: c.control_weight,
                    final_cost: c.final_cost,
                    horizon: self.horizon,
                    alpha: self.alpha,
                    node_count: self.grid.node_count,
                    grading_exponent: Some(self.grading()),
                })?
            }
            ProblemKind::CustomMatrices => {
                let c: CustomCoefficients = parse_coefficients(&self.coefficients, "custom-matrices")?;
                self.build_custom(&self.base_dir.join(c.directory))?
            }
        };
        if spec.state_dim != self.state_dim {
            return Err(config_error(
                "state_dim",
                format!("config says {}, coefficients give {}", self.state_dim, spec.state_dim),
            ));
        }
        if spec.control_dim != self.control_dim {
            return Err(config_error(
                "control_dim",
                format!(
                    "config says {}, coefficients give {}",
                    self.control_dim, spec.control_dim
                ),
            ));
        }
        Ok(spec)
    }

    fn build_custom(&self, dir: &Path) -> Result<ProblemSpec> {
        let grid = self.time_grid()?;
        let path = |name: &str| -> Result<OperatorPath> {
            let first = read_matrix_csv(&dir.join(format!("{name}_t0.csv")))?;
            let second = dir.join(format!("{name}_t1.csv"));
            if !second.exists() {
                return Ok(OperatorPath::constant(grid.clone(), first));
            }
            let mut values = vec![first];
            for j in 1..grid.len() {
                values.push(read_matrix_csv(&dir.join(format!("{name}_t{j}.csv")))?);
            }
            OperatorPath::from_values(grid.clone(), values, 3)
        };
        let p_t = read_matrix_csv(&dir.join("p_t_t0.csv"))?;
        ProblemSpec::new(
            self.horizon,
            self.alpha,
            self.nu,
            path("a")?,
            path("g")?,
            path("m")?,
            path("n")?,
            p_t,
        )
    }

    pub fn with_node_count(&self, node_count: usize) -> Result<Self> {
        let mut c = self.clone();
        c.grid.node_count = node_count;
        c.validate()?;
        Ok(c)
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        let mut c = self.clone();
        c.alpha = alpha;
        c.validate()?;
        Ok(c)
    }

    /// Changes the state dimension; only heat problems can be resized.
    pub fn with_state_dim(&self, state_dim: usize) -> Result<Self> {
        if self.problem_kind != ProblemKind::Heat1d {
            return Err(config_error("state_dim", "only heat1d problems can be resized"));
        }
        let mut c = self.clone();
        c.state_dim = state_dim;
        c.validate()?;
        Ok(c)
    }
}

/// Reads one matrix from a headerless CSV file, one row per line.
pub fn read_matrix_csv(path: &Path) -> Result<Mat> {
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv {
            path: shown.clone(),
            detail: e.to_string(),
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv {
            path: shown.clone(),
            detail: e.to_string(),
        })?;
        let row = record
            .iter()
            .enumerate()
            .map(|(col, field)| {
                field.parse::<f64>().map_err(|e| Error::Csv {
                    path: shown.clone(),
                    detail: format!("line {} column {}: {e} ({field:?})", line + 1, col + 1),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Csv {
                    path: shown,
                    detail: format!("line {} has {} entries, expected {}", line + 1, row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Csv {
            path: shown,
            detail: "no rows".into(),
        });
    }
    let cols = rows[0].len();
    Ok(Mat::from_row_iterator(rows.len(), cols, rows.into_iter().flatten()))
}
