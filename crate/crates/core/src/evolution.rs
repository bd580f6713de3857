//! Evolution operator `U(t, s)` of `y' = A(t) y`, tabulated on grid pairs.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrixView;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg::{self, Mat};
use crate::path::OperatorPath;

const SQRT3: f64 = 1.732_050_807_568_877_2;
const C1: f64 = 0.5 - SQRT3 / 6.0;
const C2: f64 = 0.5 + SQRT3 / 6.0;
const ALPHA_LO: f64 = 0.25 - SQRT3 / 6.0;
const ALPHA_HI: f64 = 0.25 + SQRT3 / 6.0;

/// Order of the commutator-free exponential scheme.
pub const SCHEME_ORDER: u32 = 4;

/// Substep policy: each propagator is refined by doubling the substep count
/// until two successive refinements agree to `tol` (relative).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepController {
    pub tol: f64,
    pub max_doublings: u32,
}

impl Default for StepController {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_doublings: 16,
        }
    }
}

/// One step of the fourth-order commutator-free scheme on `[t0, t0 + h]`.
fn cf4_step(a: &OperatorPath, t0: f64, h: f64) -> Mat {
    let a1 = a.eval(t0 + C1 * h);
    let a2 = a.eval(t0 + C2 * h);
    let first = linalg::expm(&((&a1 * ALPHA_HI + &a2 * ALPHA_LO) * h));
    let second = linalg::expm(&((&a1 * ALPHA_LO + &a2 * ALPHA_HI) * h));
    second * first
}

fn cf4_fixed(a: &OperatorPath, s: f64, t: f64, substeps: usize) -> Mat {
    let d = a.shape().0;
    let h = (t - s) / substeps as f64;
    let mut y = Mat::identity(d, d);
    for k in 0..substeps {
        y = cf4_step(a, s + k as f64 * h, h) * y;
    }
    y
}

/// Integrates `Y' = A(r) Y`, `Y(s) = I` from `s` to `t` under `controller`.
pub fn integrate(a: &OperatorPath, s: f64, t: f64, controller: StepController) -> Result<Mat> {
    if s > t {
        return Err(Error::domain(format!(
            "evolution requested backward: s = {s} > t = {t}"
        )));
    }
    let d = a.shape().0;
    if s == t {
        return Ok(Mat::identity(d, d));
    }
    let mut m = 1usize;
    let mut coarse = cf4_fixed(a, s, t, m);
    let mut residual = f64::INFINITY;
    for _ in 0..controller.max_doublings {
        m *= 2;
        let fine = cf4_fixed(a, s, t, m);
        residual = (&fine - &coarse).norm() / fine.norm().max(1.0);
        if residual <= controller.tol {
            return Ok(fine);
        }
        coarse = fine;
    }
    Err(Error::NonConvergence {
        method: "evolution step controller".into(),
        detail: format!("substep underflow on [{s}, {t}] with {m} substeps, last residual {residual:.3e}"),
    })
}

/// `U(t, s)` for the family `a`, integrated directly.
pub fn evolution_operator(a: &OperatorPath, s: f64, t: f64) -> Result<Mat> {
    integrate(a, s, t, StepController::default())
}

/// Spectral power `(−A)^p` of a symmetric negative definite matrix, any real `p`.
pub(crate) fn neg_power(a: &Mat, p: f64) -> Result<Mat> {
    if !linalg::is_symmetric(a, 1e-12) {
        return Err(Error::domain("fractional power requires a symmetric matrix"));
    }
    let eig = linalg::sym_eigen(a);
    let lmax = eig.eigenvalues.max();
    if lmax >= 0.0 {
        return Err(Error::domain(format!(
            "fractional power requires negative definite input; largest eigenvalue {lmax}"
        )));
    }
    Ok(linalg::sym_apply(a, |l| (-l).powf(p)))
}

/// `(−A)^η` for symmetric negative definite `A` and `η ∈ [0, 1]`.
pub fn frac_power(a: &Mat, eta: f64) -> Result<Mat> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::domain(format!("fractional exponent {eta} outside [0, 1]")));
    }
    if eta == 0.0 {
        neg_power(a, 0.0)?;
        return Ok(Mat::identity(a.nrows(), a.ncols()));
    }
    neg_power(a, eta)
}

/// `U(t_j, t_i)` for all grid pairs `i ≤ j`.
///
/// Rows are stored per start index `i` as contiguous column-major blocks for
/// `j = i..N`.
#[derive(Debug, Clone)]
pub struct EvolutionTable {
    grid: Arc<TimeGrid>,
    a: OperatorPath,
    dim: usize,
    rows: Vec<Vec<f64>>,
    controller: StepController,
}

impl EvolutionTable {
    pub fn build(a: &OperatorPath) -> Result<Self> {
        Self::build_with(a, StepController::default())
    }

    pub fn build_with(a: &OperatorPath, controller: StepController) -> Result<Self> {
        let grid = a.grid().clone();
        let n = grid.len();
        let d = a.shape().0;
        let steps: Vec<Mat> = (0..n - 1)
            .into_par_iter()
            .map(|k| integrate(a, grid.node(k), grid.node(k + 1), controller))
            .collect::<Result<_>>()?;
        let rows = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut row = Vec::with_capacity((n - i) * d * d);
                let mut u = Mat::identity(d, d);
                row.extend_from_slice(u.as_slice());
                for step in &steps[i..] {
                    u = step * &u;
                    row.extend_from_slice(u.as_slice());
                }
                row
            })
            .collect();
        Ok(Self {
            grid,
            a: a.clone(),
            dim: d,
            rows,
            controller,
        })
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scheme_order(&self) -> u32 {
        SCHEME_ORDER
    }

    pub fn controller(&self) -> StepController {
        self.controller
    }

    /// `U(t_t, t_s)` for node indices `s ≤ t`.
    pub fn u(&self, t: usize, s: usize) -> DMatrixView<'_, f64> {
        assert!(s <= t, "U(t_{t}, t_{s}) needs s <= t");
        let d2 = self.dim * self.dim;
        let off = (t - s) * d2;
        DMatrixView::from_slice(&self.rows[s][off..off + d2], self.dim, self.dim)
    }

    /// `U(t_t, t_s)` as an owned matrix.
    pub fn u_owned(&self, t: usize, s: usize) -> Mat {
        self.u(t, s).into_owned()
    }

    /// `U(t_t, t_s)*`.
    pub fn u_adjoint(&self, t: usize, s: usize) -> Mat {
        self.u(t, s).transpose()
    }

    /// `U(t, s)` at arbitrary times: tabulated between the interior nodes,
    /// fresh integration on the partial cells at both ends.
    pub fn eval(&self, t: f64, s: f64) -> Result<Mat> {
        if s > t {
            return Err(Error::domain(format!(
                "evolution requested backward: s = {s} > t = {t}"
            )));
        }
        if let (Some(j), Some(i)) = (self.grid.exact_index(t), self.grid.exact_index(s)) {
            return Ok(self.u_owned(j, i));
        }
        let nodes = self.grid.nodes();
        let i = nodes.partition_point(|&x| x < s);
        let j = nodes.partition_point(|&x| x <= t);
        if i >= nodes.len() || j == 0 || i > j - 1 {
            return integrate(&self.a, s, t, self.controller);
        }
        let j = j - 1;
        let head = integrate(&self.a, s, nodes[i], self.controller)?;
        let tail = integrate(&self.a, nodes[j], t, self.controller)?;
        Ok(tail * self.u(j, i) * head)
    }

    /// `‖U(t_k,t_i) − U(t_k,t_j) U(t_j,t_i)‖` for `i ≤ j ≤ k`.
    pub fn cocycle_residual(&self, i: usize, j: usize, k: usize) -> f64 {
        (self.u(k, i) - self.u(k, j) * self.u(j, i)).norm()
    }

    /// Writes the table as one CSV file of indexed blocks:
    /// `i, j, t_i, t_j, u_00, u_01, ...` (row-major entries).
    pub fn dump_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let d = self.dim;
        let mut header = vec!["i".to_string(), "j".into(), "t_i".into(), "t_j".into()];
        for r in 0..d {
            for c in 0..d {
                header.push(format!("u_{r}_{c}"));
            }
        }
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        let n = self.grid.len();
        for i in 0..n {
            for j in i..n {
                let u = self.u(j, i);
                let mut rec = vec![
                    i.to_string(),
                    j.to_string(),
                    fmt_f64(self.grid.node(i)),
                    fmt_f64(self.grid.node(j)),
                ];
                for r in 0..d {
                    for c in 0..d {
                        rec.push(fmt_f64(u[(r, c)]));
                    }
                }
                w.write_record(&rec).map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Restores a table written by [`EvolutionTable::dump_csv`] for the
    /// family `a`; grid times must match bitwise.
    pub fn restore_csv(a: &OperatorPath, path: &Path) -> Result<Self> {
        let grid = a.grid().clone();
        let n = grid.len();
        let d = a.shape().0;
        let mut rows: Vec<Vec<f64>> = (0..n).map(|i| vec![f64::NAN; (n - i) * d * d]).collect();
        let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut seen = 0usize;
        for (line, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let bad = |what: &str| Error::Csv {
                path: path.display().to_string(),
                detail: format!("record {}: {what}", line + 2),
            };
            if rec.len() != 4 + d * d {
                return Err(bad("wrong field count"));
            }
            let parse = |k: usize| rec[k].trim().parse::<f64>().map_err(|_| bad("unparsable number"));
            let i: usize = rec[0].trim().parse().map_err(|_| bad("bad index"))?;
            let j: usize = rec[1].trim().parse().map_err(|_| bad("bad index"))?;
            if i > j || j >= n {
                return Err(bad("index outside grid"));
            }
            if parse(2)? != grid.node(i) || parse(3)? != grid.node(j) {
                return Err(bad("grid times do not match"));
            }
            let off = (j - i) * d * d;
            for r in 0..d {
                for c in 0..d {
                    rows[i][off + c * d + r] = parse(4 + r * d + c)?;
                }
            }
            seen += 1;
        }
        if seen != n * (n + 1) / 2 {
            return Err(Error::Csv {
                path: path.display().to_string(),
                detail: format!("expected {} blocks, found {seen}", n * (n + 1) / 2),
            });
        }
        Ok(Self {
            grid,
            a: a.clone(),
            dim: d,
            rows,
            controller: StepController::default(),
        })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

/// Shortest representation that parses back to the same value.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Empirical constant of the bound `‖(−A(t))^η U(t,s) (−A(s))^{−γ}‖ ≤ M (1 + (t−s)^{η−γ})`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub eta: f64,
    pub gamma: f64,
    pub constant: f64,
    /// Node pair `(t, s)` attaining the sup.
    pub argmax: (usize, usize),
    pub pairs: usize,
}

pub fn check_smoothing_bounds(table: &EvolutionTable, a: &OperatorPath, eta: f64, gamma: f64) -> Result<BoundReport> {
    if !(0.0..=1.0).contains(&eta) || !(0.0..=1.0).contains(&gamma) {
        return Err(Error::domain("exponents must lie in [0, 1]"));
    }
    let grid = table.grid();
    let n = grid.len();
    let left: Vec<Mat> = a.values().iter().map(|m| neg_power(m, eta)).collect::<Result<_>>()?;
    let right: Vec<Mat> = a.values().iter().map(|m| neg_power(m, -gamma)).collect::<Result<_>>()?;
    let best = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut best = (0.0_f64, (s, s));
            #[allow(clippy::needless_range_loop)]
            for t in s..n {
                let m = &left[t] * table.u(t, s) * &right[s];
                let gap = grid.node(t) - grid.node(s);
                let ratio = linalg::spectral_norm(&m) / (1.0 + gap.powf(eta - gamma));
                if ratio > best.0 {
                    best = (ratio, (t, s));
                }
            }
            best
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0_f64, (0, 0)), |acc, b| if b.0 > acc.0 { b } else { acc });
    Ok(BoundReport {
        eta,
        gamma,
        constant: best.0,
        argmax: best.1,
        pairs: n * (n + 1) / 2,
    })
}
