//! Differential and integral Riccati equations.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::{fmt_f64, neg_power, EvolutionTable};
use crate::grid::TimeGrid;
use crate::linalg::{self, LyapunovOperator, Mat, Vector};
use crate::path::OperatorPath;
use crate::problem::ProblemSpec;
use crate::quadrature;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "dre-backward")]
    DreBackward,
    #[serde(rename = "ire-picard")]
    IrePicard,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::DreBackward => "dre-backward",
            Method::IrePicard => "ire-picard",
        }
    }
}

/// Riccati solution `P(·)` on the grid.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: OperatorPath,
    pub method: Method,
    /// `sup_{t<T} (T−t)^{1−α} ‖(−A(t)*)^{1−α} P(t)‖`; `None` when `A` is not symmetric.
    pub weighted_certificate: Option<f64>,
    /// DRE: integral-form defect of the result. Picard: last sweep update.
    pub residual_norm: f64,
    /// DRE: time steps taken. Picard: sweeps that moved the iterate by more than the tolerance.
    pub iterations: usize,
    /// Picard map evaluations (zero for the DRE).
    pub sweeps: usize,
}

impl RiccatiSolution {
    pub fn grid(&self) -> &std::sync::Arc<TimeGrid> {
        self.p.grid()
    }

    pub fn at(&self, j: usize) -> &Mat {
        self.p.at_node(j)
    }

    pub fn values(&self) -> &[Mat] {
        self.p.values()
    }

    /// Same solution shifted by `delta·I` at every node.
    pub fn perturbed(&self, delta: f64) -> Self {
        let mut out = self.clone();
        out.p = self.p.map(|m| m + Mat::identity(m.nrows(), m.ncols()) * delta);
        out
    }

    /// Replaces the node values, keeping method tags.
    pub fn from_values(grid: std::sync::Arc<TimeGrid>, values: Vec<Mat>, method: Method) -> Result<Self> {
        Ok(Self {
            p: OperatorPath::from_values(grid, values, 3)?,
            method,
            weighted_certificate: None,
            residual_norm: 0.0,
            iterations: 0,
            sweeps: 0,
        })
    }

    /// CSV with columns `t, p_0_0, p_0_1, ...` (row-major entries).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_matrix_series(path, "p", self.grid().nodes(), self.values())
    }

    pub fn summary(&self) -> RiccatiSummary {
        RiccatiSummary {
            method: self.method,
            weighted_certificate: self.weighted_certificate,
            residual_norm: self.residual_norm,
            iterations: self.iterations,
            sweeps: self.sweeps,
            node_count: self.grid().len(),
            p_start: self.values()[0].iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiccatiSummary {
    pub method: Method,
    pub weighted_certificate: Option<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub sweeps: usize,
    pub node_count: usize,
    /// `P(t_0)`, column-major.
    pub p_start: Vec<f64>,
}

pub(crate) fn write_matrix_series(path: &Path, name: &str, times: &[f64], values: &[Mat]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let (r, c) = values.first().map(|m| m.shape()).unwrap_or((0, 0));
    let mut header = vec!["t".to_string()];
    for i in 0..r {
        for j in 0..c {
            header.push(format!("{name}_{i}_{j}"));
        }
    }
    w.write_record(&header).map_err(csv_err)?;
    for (t, m) in times.iter().zip(values) {
        let mut rec = vec![fmt_f64(*t)];
        for i in 0..r {
            for j in 0..c {
                rec.push(fmt_f64(m[(i, j)]));
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy)]
pub struct DreOptions {
    /// Implicit steps per grid interval.
    pub substeps: usize,
    pub newton_tol: f64,
    pub max_newton: usize,
}

impl Default for DreOptions {
    fn default() -> Self {
        Self {
            substeps: 4,
            newton_tol: 1e-13,
            max_newton: 40,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_sweeps: 200,
        }
    }
}

// Alexander's three-stage, stiffly accurate, L-stable SDIRK of order 3.
const GAMMA: f64 = 0.435_866_521_508_459;
const C2: f64 = (1.0 + GAMMA) / 2.0;
const A21: f64 = (1.0 - GAMMA) / 2.0;
const B1: f64 = -(6.0 * GAMMA * GAMMA - 16.0 * GAMMA + 1.0) / 4.0;
const B2: f64 = (6.0 * GAMMA * GAMMA - 20.0 * GAMMA + 5.0) / 4.0;

struct Frozen {
    a: Mat,
    m: Mat,
    b: Mat,
}

fn frozen(spec: &ProblemSpec, t: f64) -> Result<Frozen> {
    let a = spec.a.eval(t);
    let ag = &a * spec.g.eval(t);
    let n_inv = linalg::symmetrize(&spec.n.eval(t))
        .try_inverse()
        .ok_or_else(|| Error::domain(format!("N({t}) is singular")))?;
    let b = linalg::symmetrize(&(&ag * n_inv * ag.transpose()));
    Ok(Frozen {
        a,
        m: linalg::symmetrize(&spec.m.eval(t)),
        b,
    })
}

/// Right side in backward time: `A*P + PA + M − P B P`.
fn backward_rhs(f: &Frozen, p: &Mat) -> Mat {
    let ap = f.a.tr_mul(p);
    &ap + ap.transpose() + &f.m - p * &f.b * p
}

/// `Eᵀ X + X E = R` for symmetric `E` by eigen-decomposition.
fn lyap_symmetric(e: &Mat, r: &Mat) -> Option<Mat> {
    let eig = linalg::sym_eigen(e);
    let v = &eig.eigenvectors;
    let mut z = v.tr_mul(r) * v;
    let l = &eig.eigenvalues;
    for i in 0..z.nrows() {
        for j in 0..z.ncols() {
            let den = l[i] + l[j];
            if den <= 1e-12 {
                return None;
            }
            z[(i, j)] /= den;
        }
    }
    Some(v * z * v.transpose())
}

/// Solves `Y − hγ F(Y) = R` by Newton's method. A symmetric approximate
/// Jacobian is tried first; the exact Kronecker Jacobian takes over if that
/// stalls.
fn stage_solve(f: &Frozen, r: &Mat, guess: &Mat, hg: f64, opts: &DreOptions) -> std::result::Result<Mat, f64> {
    let d = r.nrows();
    let eye = Mat::identity(d, d);
    let mut y = guess.clone();
    let mut last = f64::INFINITY;
    for it in 0..opts.max_newton {
        let res = &y - backward_rhs(f, &y) * hg - r;
        let scale = 1.0 + y.norm() + r.norm();
        last = res.norm() / scale;
        if last <= opts.newton_tol {
            return Ok(y);
        }
        let e = &eye * 0.5 - (&f.a - &f.b * &y) * hg;
        let delta = if it < opts.max_newton / 4 {
            lyap_symmetric(&linalg::symmetrize(&e), &(-&res))
        } else {
            None
        };
        let delta = match delta {
            Some(dl) => dl,
            None => LyapunovOperator::new(&e)
                .and_then(|op| op.solve(&(-&res)))
                .map_err(|_| last)?,
        };
        y = linalg::symmetrize(&(y + delta));
    }
    Err(last)
}

/// Integrates the Riccati differential equation backward from `P(T) = P_T`
/// with an L-stable SDIRK scheme, symmetrizing after every step.
pub fn solve_dre_backward(spec: &ProblemSpec, table: &EvolutionTable) -> Result<RiccatiSolution> {
    solve_dre_backward_with(spec, table, DreOptions::default())
}

pub fn solve_dre_backward_with(
    spec: &ProblemSpec,
    table: &EvolutionTable,
    opts: DreOptions,
) -> Result<RiccatiSolution> {
    spec.coefficients()?;
    let grid = spec.grid().clone();
    let n = grid.len();
    let mut values = vec![Mat::zeros(spec.state_dim, spec.state_dim); n];
    let mut p = linalg::symmetrize(&spec.p_t);
    values[n - 1] = p.clone();
    let m = opts.substeps.max(1);
    for k in (0..n - 1).rev() {
        let h = (grid.node(k + 1) - grid.node(k)) / m as f64;
        for sub in 0..m {
            let t0 = grid.node(k + 1) - sub as f64 * h;
            let fail = |res: f64| Error::NonConvergence {
                method: "backward Riccati step".into(),
                detail: format!("Newton stalled at t = {t0} (last time reached), residual {res:.3e}"),
            };
            let f1 = frozen(spec, t0 - GAMMA * h)?;
            let y1 = stage_solve(&f1, &p, &p, h * GAMMA, &opts).map_err(fail)?;
            let k1 = backward_rhs(&f1, &y1);
            let f2 = frozen(spec, t0 - C2 * h)?;
            let r2 = &p + &k1 * (h * A21);
            let y2 = stage_solve(&f2, &r2, &y1, h * GAMMA, &opts).map_err(fail)?;
            let k2 = backward_rhs(&f2, &y2);
            let f3 = frozen(spec, t0 - h)?;
            let r3 = &p + (&k1 * B1 + &k2 * B2) * h;
            let y3 = stage_solve(&f3, &r3, &y2, h * GAMMA, &opts).map_err(fail)?;
            p = linalg::symmetrize(&y3);
        }
        values[k] = p.clone();
    }
    values[n - 1] = spec.p_t.clone();
    let mut sol = RiccatiSolution::from_values(grid.clone(), values, Method::DreBackward)?;
    sol.iterations = (n - 1) * m;
    sol.residual_norm = sup_distance(sol.values(), &ire_map(spec, table, sol.values())?);
    sol.weighted_certificate = class_q_certificate(&sol, spec).ok().map(|c| c.certificate);
    Ok(sol)
}

fn sup_distance(a: &[Mat], b: &[Mat]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// One application of the integral Riccati map
/// `Q ↦ U(T,t)* P_T U(T,t) + ∫_t^T U(r,t)* [M − Q B Q] U(r,t) dr` at every node.
pub fn ire_map(spec: &ProblemSpec, table: &EvolutionTable, q: &[Mat]) -> Result<Vec<Mat>> {
    let co = spec.coefficients()?;
    let grid = table.grid();
    let n = grid.len();
    let last = n - 1;
    let inner: Vec<Mat> = (0..n)
        .map(|j| spec.m.at_node(j) - &q[j] * &co[j].gain * &q[j])
        .collect();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let ut = table.u(last, i);
            let mut acc = ut.tr_mul(&spec.p_t) * ut;
            if i < last {
                let w = quadrature::grid_weights(grid, i, last);
                for (j, wj) in (i..=last).zip(w) {
                    let u = table.u(j, i);
                    acc += u.tr_mul(&inner[j]) * u * wj;
                }
            }
            linalg::symmetrize(&acc)
        })
        .collect())
}

/// Picard iteration on the integral Riccati equation starting from
/// `Q_0(t) = U(T,t)* P_T U(T,t)`.
pub fn solve_ire_picard(spec: &ProblemSpec, table: &EvolutionTable) -> Result<RiccatiSolution> {
    solve_ire_picard_with(spec, table, PicardOptions::default())
}

pub fn solve_ire_picard_with(
    spec: &ProblemSpec,
    table: &EvolutionTable,
    opts: PicardOptions,
) -> Result<RiccatiSolution> {
    spec.coefficients()?;
    let grid = table.grid();
    let n = grid.len();
    let last = n - 1;
    let mut q: Vec<Mat> = (0..n)
        .map(|i| {
            let ut = table.u(last, i);
            linalg::symmetrize(&(ut.tr_mul(&spec.p_t) * ut))
        })
        .collect();
    let mut history = Vec::new();
    let mut iterations = 0;
    for sweep in 1..=opts.max_sweeps {
        let next = ire_map(spec, table, &q)?;
        let update = sup_distance(&q, &next);
        history.push(update);
        q = next;
        if !update.is_finite() || update > 1e12 {
            return Err(Error::NonConvergence {
                method: "Picard iteration".into(),
                detail: format!("diverged at sweep {sweep}; updates {:?}", tail(&history)),
            });
        }
        if update > opts.tol {
            iterations += 1;
            continue;
        }
        q[last] = spec.p_t.clone();
        let mut sol = RiccatiSolution::from_values(grid.clone(), q, Method::IrePicard)?;
        sol.iterations = iterations;
        sol.sweeps = sweep;
        sol.residual_norm = update;
        sol.weighted_certificate = class_q_certificate(&sol, spec).ok().map(|c| c.certificate);
        return Ok(sol);
    }
    Err(Error::NonConvergence {
        method: "Picard iteration".into(),
        detail: format!(
            "no contraction below {:.1e} after {} sweeps; last updates {:?}",
            opts.tol,
            opts.max_sweeps,
            tail(&history)
        ),
    })
}

fn tail(h: &[f64]) -> Vec<f64> {
    h[h.len().saturating_sub(5)..].to_vec()
}

/// Gap in the weak integral form on `[t_s, t_end]`:
/// `⟨Q(s)x,y⟩ = ⟨Q(T−ε)U x, U y⟩ + ∫⟨M U x, U y⟩ − ∫⟨N⁻¹G*A*Q U x, G*A*Q U y⟩`.
/// With `end` the last node this is the `ε = 0` form with `P_T` in place of `Q(T)`.
pub fn weak_residual(
    q: &RiccatiSolution,
    spec: &ProblemSpec,
    table: &EvolutionTable,
    s: usize,
    end: usize,
    x: &Vector,
    y: &Vector,
) -> Result<f64> {
    let co = spec.coefficients()?;
    let grid = table.grid();
    if s > end || end >= grid.len() {
        return Err(Error::domain(format!(
            "need s <= T - eps on the grid, got nodes {s}, {end}"
        )));
    }
    let q_end = if end == grid.last_index() { &spec.p_t } else { q.at(end) };
    let ux = table.u(end, s) * x;
    let uy = table.u(end, s) * y;
    let mut rhs = linalg::bilinear(&uy, q_end, &ux);
    rhs += quadrature::integrate_by(grid, s, end, |r| {
        let ux = table.u(r, s) * x;
        let uy = table.u(r, s) * y;
        let fx = &co[r].gta * (q.at(r) * &ux);
        let fy = &co[r].gta * (q.at(r) * &uy);
        linalg::bilinear(&uy, spec.m.at_node(r), &ux) - linalg::bilinear(&fy, &co[r].n_inv, &fx)
    });
    Ok((linalg::bilinear(y, q.at(s), x) - rhs).abs())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassQCertificate {
    pub certificate: f64,
    pub argmax_node: usize,
    /// `max_k ‖Q(t)e_k − P_T e_k‖` at the last five nodes before `T`.
    pub strong_continuity: Vec<(f64, f64)>,
}

/// Weighted-norm surrogate for membership in the solution class.
pub fn class_q_certificate(q: &RiccatiSolution, spec: &ProblemSpec) -> Result<ClassQCertificate> {
    let grid = q.grid();
    let last = grid.last_index();
    let t_end = grid.end();
    let mut best = (0.0_f64, 0usize);
    for j in 0..last {
        let fp = neg_power(&spec.a.at_node(j).transpose(), 1.0 - spec.alpha)?;
        let v = (t_end - grid.node(j)).powf(1.0 - spec.alpha) * linalg::spectral_norm(&(fp * q.at(j)));
        if v > best.0 {
            best = (v, j);
        }
    }
    let d = spec.state_dim;
    let strong_continuity = (last.saturating_sub(5)..last)
        .map(|j| {
            let diff = q.at(j) - &spec.p_t;
            let worst = (0..d).map(|k| diff.column(k).norm()).fold(0.0, f64::max);
            (grid.node(j), worst)
        })
        .collect();
    Ok(ClassQCertificate {
        certificate: best.0,
        argmax_node: best.1,
        strong_continuity,
    })
}
