//! Closed-loop flow `Φ(t, s)` and the feedback pair it generates.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::control_maps::uag;
use crate::error::{Error, Result};
use crate::evolution::EvolutionTable;
use crate::grid::TimeGrid;
use crate::linalg::{self, Mat, Vector};
use crate::path::{ControlPath, Endpoint, NodePath, StatePath};
use crate::problem::ProblemSpec;
use crate::quadrature;
use crate::riccati::{write_matrix_series, RiccatiSolution};

/// `K(t_t, t_r) = U(t,r) A(r) G(r) N(r)⁻¹ G(r)* A(r)* Q(r)` at grid nodes.
pub fn kernel_k_node(
    spec: &ProblemSpec,
    table: &EvolutionTable,
    q: &RiccatiSolution,
    t: usize,
    r: usize,
) -> Result<Mat> {
    if r > t {
        return Err(Error::domain(format!(
            "kernel needs r <= t, got nodes r = {r}, t = {t}"
        )));
    }
    let co = &spec.coefficients()?[r];
    Ok(table.u(t, r) * (&co.gain * q.at(r)))
}

/// `K(t, r)` at arbitrary times `r < t < T`, built from the factorized
/// `U(t,r)A(r)G(r)` and interpolated `Q(r)`.
pub fn kernel_k(spec: &ProblemSpec, table: &EvolutionTable, q: &RiccatiSolution, t: f64, r: f64) -> Result<Mat> {
    if !(r < t && t < spec.horizon) {
        return Err(Error::domain(format!("kernel needs r < t < T, got r = {r}, t = {t}")));
    }
    let uag = uag(table, spec, t, r)?;
    let ag = spec.a.eval(r) * spec.g.eval(r);
    let n_inv = linalg::symmetrize(&spec.n.eval(r))
        .try_inverse()
        .ok_or_else(|| Error::domain(format!("N({r}) is singular")))?;
    Ok(uag * n_inv * ag.transpose() * q.p.eval(r))
}

/// `Φ(·, s)` on the nodes `s..=N` of the grid.
#[derive(Debug, Clone)]
pub struct ClosedLoopFlow {
    grid: Arc<TimeGrid>,
    anchor: usize,
    phi: Vec<Mat>,
    /// Algebraic residual of the discrete equations.
    pub solver_residual: f64,
    /// Largest condition number of the local solves `I + w B Q`.
    pub local_conditioning: f64,
}

impl ClosedLoopFlow {
    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn anchor_time(&self) -> f64 {
        self.grid.node(self.anchor)
    }

    /// `Φ(t_j, s)` for `j ≥ s`.
    pub fn at(&self, j: usize) -> &Mat {
        &self.phi[j - self.anchor]
    }

    pub fn values(&self) -> &[Mat] {
        &self.phi
    }

    /// `Φ(·, s) x` as a state path.
    pub fn apply(&self, x: &Vector) -> StatePath {
        let values = self.phi.iter().map(|m| m * x).collect();
        StatePath::regular(NodePath::new(self.grid.clone(), self.anchor, values).expect("flow covers its nodes"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_matrix_series(path, "phi", &self.grid.nodes()[self.anchor..], &self.phi)
    }

    pub fn summary(&self) -> FlowSummary {
        FlowSummary {
            anchor: self.anchor_time(),
            anchor_node: self.anchor,
            solver_residual: self.solver_residual,
            local_conditioning: self.local_conditioning,
            phi_end: self.phi.last().map(|m| m.iter().copied().collect()).unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowSummary {
    pub anchor: f64,
    pub anchor_node: usize,
    pub solver_residual: f64,
    pub local_conditioning: f64,
    /// `Φ(T, s)`, column-major.
    pub phi_end: Vec<f64>,
}

/// Solves `Φ(t,s) = U(t,s) − ∫_s^t K(t,r) Φ(r,s) dr` by forward marching.
///
/// At each node the quadrature weight of the node itself couples `Φ(t_j)` to
/// its own equation; that coupling is resolved by a small linear solve.
pub fn solve_phi(spec: &ProblemSpec, table: &EvolutionTable, q: &RiccatiSolution, s: usize) -> Result<ClosedLoopFlow> {
    let co = spec.coefficients()?;
    let grid = table.grid().clone();
    let n = grid.len();
    if s >= n {
        return Err(Error::domain(format!("anchor node {s} outside grid")));
    }
    let d = spec.state_dim;
    let eye = Mat::identity(d, d);
    let bq: Vec<Mat> = (s..n).map(|k| &co[k].gain * q.at(k)).collect();
    let mut phi: Vec<Mat> = Vec::with_capacity(n - s);
    let mut z: Vec<Mat> = Vec::with_capacity(n - s);
    let mut cond = 1.0_f64;
    phi.push(eye.clone());
    z.push(&bq[0] * &phi[0]);
    for j in s + 1..n {
        let w = quadrature::grid_weights(&grid, s, j);
        let mut rhs = table.u_owned(j, s);
        for (k, wk) in (s..j).zip(&w) {
            rhs -= table.u(j, k) * &z[k - s] * *wk;
        }
        let lhs = &eye + &bq[j - s] * w[j - s];
        let sv = lhs.clone().singular_values();
        let (smax, smin) = (sv.max(), sv.min());
        if !(smin > 1e-14 * smax) {
            return Err(Error::NonConvergence {
                method: "closed-loop local solve".into(),
                detail: format!("singular system at node {j}"),
            });
        }
        cond = cond.max(smax / smin);
        let p = lhs.lu().solve(&rhs).ok_or_else(|| Error::NonConvergence {
            method: "closed-loop local solve".into(),
            detail: format!("LU failed at node {j}"),
        })?;
        z.push(&bq[j - s] * &p);
        phi.push(p);
    }
    let mut flow = ClosedLoopFlow {
        grid,
        anchor: s,
        phi,
        solver_residual: 0.0,
        local_conditioning: cond,
    };
    flow.solver_residual = volterra_defect(spec, table, q, &flow, quadrature::weights)?;
    Ok(flow)
}

/// Sup-node defect of the closed-loop equation re-evaluated with the given rule.
pub fn volterra_defect(
    spec: &ProblemSpec,
    table: &EvolutionTable,
    q: &RiccatiSolution,
    flow: &ClosedLoopFlow,
    rule: fn(&[f64]) -> Vec<f64>,
) -> Result<f64> {
    let co = spec.coefficients()?;
    let grid = table.grid();
    let s = flow.anchor();
    let mut worst = 0.0_f64;
    for j in s..grid.len() {
        let w = rule(&grid.nodes()[s..=j]);
        let mut r = flow.at(j) - table.u(j, s);
        for (k, wk) in (s..=j).zip(&w) {
            r += table.u(j, k) * (&co[k].gain * q.at(k) * flow.at(k)) * *wk;
        }
        worst = worst.max(r.norm());
    }
    Ok(worst)
}

/// Defect against an independent (cubic) quadrature rule.
pub fn resubstitution_defect(
    spec: &ProblemSpec,
    table: &EvolutionTable,
    q: &RiccatiSolution,
    flow: &ClosedLoopFlow,
) -> Result<f64> {
    volterra_defect(spec, table, q, flow, quadrature::cubic_weights)
}

/// `‖Φ(t,s) − Φ(t,q)Φ(q,s)‖` for two flows anchored at `s` and `q`.
pub fn transitivity_residual(outer: &ClosedLoopFlow, inner: &ClosedLoopFlow, t: usize) -> Result<f64> {
    let (s, q) = (outer.anchor(), inner.anchor());
    if !(s <= q && q <= t) {
        return Err(Error::domain(format!("need s <= q <= t, got {s}, {q}, {t}")));
    }
    Ok((outer.at(t) - inner.at(t) * outer.at(q)).norm())
}

/// Feedback pair `ū = N⁻¹G*A*Q Φ(·,s)x`, `ȳ = Φ(·,s)x`.
#[derive(Debug, Clone)]
pub struct FeedbackPair {
    pub control: ControlPath,
    pub state: StatePath,
}

pub fn feedback_pair(
    spec: &ProblemSpec,
    q: &RiccatiSolution,
    flow: &ClosedLoopFlow,
    x: &Vector,
) -> Result<FeedbackPair> {
    if x.len() != spec.state_dim {
        return Err(Error::dim("initial state", spec.state_dim, x.len()));
    }
    let co = spec.coefficients()?;
    let state = flow.apply(x);
    let s = flow.anchor();
    let controls = (s..flow.grid().len())
        .map(|j| &co[j].n_inv * (&co[j].gta * (q.at(j) * state.at(j))))
        .collect();
    Ok(FeedbackPair {
        control: ControlPath(NodePath::new(flow.grid().clone(), s, controls)?),
        state,
    })
}

/// `sup_t ‖ȳ(t) − U(t,s)x − (L_s ū)(t)‖`.
pub fn pair_consistency(spec: &ProblemSpec, table: &EvolutionTable, pair: &FeedbackPair, x: &Vector) -> Result<f64> {
    let ls = crate::control_maps::apply_ls(spec, table, &pair.control)?;
    let s = pair.control.start();
    Ok((s..table.grid().len())
        .map(|j| (pair.state.at(j) - table.u(j, s) * x - ls.at(j)).norm())
        .fold(0.0, f64::max))
}

/// Truncated pair: `u_ε = ū` up to `T−ε` and zero after; `y_ε` follows the
/// free evolution after `T−ε`.
#[derive(Debug, Clone)]
pub struct TruncatedPair {
    pub end: usize,
    pub control: ControlPath,
    pub state: StatePath,
    /// `L_sT u_ε = U(T, T−ε) (L_s ū)(T−ε)`.
    pub lst_endpoint: Vector,
}

pub fn truncate_pair(
    spec: &ProblemSpec,
    table: &EvolutionTable,
    pair: &FeedbackPair,
    x: &Vector,
    end: usize,
) -> Result<TruncatedPair> {
    if x.len() != spec.state_dim {
        return Err(Error::dim("initial state", spec.state_dim, x.len()));
    }
    let s = pair.control.start();
    let grid = table.grid();
    if end < s || end >= grid.len() {
        return Err(Error::domain(format!(
            "truncation node {end} outside [{s}, {})",
            grid.len()
        )));
    }
    let mut control = pair.control.clone();
    for j in end + 1..grid.len() {
        control.0.values_mut()[j - s].fill(0.0);
    }
    let y_end = pair.state.at(end).clone();
    let states = (s..grid.len())
        .map(|j| {
            if j <= end {
                pair.state.at(j).clone()
            } else {
                table.u(j, end) * &y_end
            }
        })
        .collect();
    let ls_end = &y_end - table.u(end, s) * x;
    let last = grid.last_index();
    Ok(TruncatedPair {
        end,
        control,
        state: StatePath {
            path: NodePath::new(grid.clone(), s, states)?,
            endpoint: Endpoint::Flagged,
        },
        lst_endpoint: table.u(last, end) * ls_end,
    })
}

/// `sup_r ‖ū(r; s, x) − ū(r; t, Φ(t,s)x)‖` over the nodes after `t`.
pub fn control_transitivity(
    spec: &ProblemSpec,
    q: &RiccatiSolution,
    outer: &ClosedLoopFlow,
    inner: &ClosedLoopFlow,
    x: &Vector,
) -> Result<f64> {
    let t = inner.anchor();
    let a = feedback_pair(spec, q, outer, x)?;
    let b = feedback_pair(spec, q, inner, &(outer.at(t) * x))?;
    Ok((t..outer.grid().len())
        .map(|r| (a.control.at(r) - b.control.at(r)).norm())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{logistic_closed_form, logistic_problem};
    use crate::riccati::solve_dre_backward;

    fn setup(n: usize) -> (ProblemSpec, EvolutionTable, RiccatiSolution) {
        let grid = Arc::new(TimeGrid::new(0.0, 1.0, n, 2.0).unwrap());
        let spec = logistic_problem(grid, 0.25).unwrap();
        let table = EvolutionTable::build(&spec.a).unwrap();
        let p = solve_dre_backward(&spec, &table).unwrap();
        (spec, table, p)
    }

    /// `φ(t) = e^{−t}(1 − q(t))/(1 − q(0))` solves `φ' = (−1 − P)φ`, `φ(0) = 1`.
    fn phi_oracle(t: f64) -> f64 {
        let q = |t: f64| (2.0 * (t - 1.0)).exp() / 3.0;
        (-t).exp() * (1.0 - q(t)) / (1.0 - q(0.0))
    }

    #[test]
    fn kernel_scalar_value() {
        let (spec, table, p) = setup(257);
        let k = kernel_k_node(&spec, &table, &p, 256, 0).unwrap();
        assert!((k[(0, 0)] - (-1.0f64).exp() * logistic_closed_form(0.0)).abs() < 1e-9);
        let off = kernel_k(&spec, &table, &p, 0.7, 0.2).unwrap();
        let oracle = (-0.5f64).exp() * logistic_closed_form(0.2);
        assert!((off[(0, 0)] - oracle).abs() < 1e-7);
        let zero = RiccatiSolution::from_values(spec.grid().clone(), vec![Mat::zeros(1, 1); 257], p.method).unwrap();
        assert_eq!(kernel_k_node(&spec, &table, &zero, 100, 3).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn phi_matches_closed_loop_ode() {
        let (spec, table, p) = setup(513);
        let flow = solve_phi(&spec, &table, &p, 0).unwrap();
        assert_eq!(flow.at(0), &Mat::identity(1, 1));
        let worst = spec
            .grid()
            .nodes()
            .iter()
            .enumerate()
            .map(|(j, &t)| (flow.at(j)[(0, 0)] - phi_oracle(t)).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-8, "{worst}");
        assert!(flow.solver_residual < 1e-13);
        assert!(resubstitution_defect(&spec, &table, &p, &flow).unwrap() < 1e-7);
    }

    #[test]
    fn zero_riccati_gives_free_evolution() {
        let (spec, table, _) = setup(65);
        let zero = RiccatiSolution::from_values(
            spec.grid().clone(),
            vec![Mat::zeros(1, 1); 65],
            crate::riccati::Method::DreBackward,
        )
        .unwrap();
        let flow = solve_phi(&spec, &table, &zero, 5).unwrap();
        for j in 5..65 {
            assert_eq!(flow.at(j), &table.u_owned(j, 5));
        }
        let pair = feedback_pair(&spec, &zero, &flow, &Vector::from_element(1, 2.0)).unwrap();
        assert!(pair.control.values().iter().all(|u| u[0] == 0.0));
    }

    #[test]
    fn transitivity_and_pair() {
        let (spec, table, p) = setup(513);
        let outer = solve_phi(&spec, &table, &p, 40).unwrap();
        let inner = solve_phi(&spec, &table, &p, 300).unwrap();
        for t in [300, 400, 511, 512] {
            assert!(transitivity_residual(&outer, &inner, t).unwrap() < 1e-7);
        }
        let x = Vector::from_element(1, 1.0);
        let s0 = solve_phi(&spec, &table, &p, 0).unwrap();
        let pair = feedback_pair(&spec, &p, &s0, &x).unwrap();
        for (j, &t) in spec.grid().nodes().iter().enumerate().step_by(37) {
            let oracle = -logistic_closed_form(t) * phi_oracle(t);
            assert!((pair.control.at(j)[0] - oracle).abs() < 1e-8);
        }
        assert!(pair_consistency(&spec, &table, &pair, &x).unwrap() < 1e-13);
        let zero = feedback_pair(&spec, &p, &s0, &Vector::zeros(1)).unwrap();
        assert!(zero.state.values().iter().all(|v| v[0] == 0.0));
        assert!(control_transitivity(&spec, &p, &outer, &inner, &x).unwrap() < 1e-7);
    }

    #[test]
    fn truncation() {
        let (spec, table, p) = setup(129);
        let x = Vector::from_element(1, 1.0);
        let flow = solve_phi(&spec, &table, &p, 0).unwrap();
        let pair = feedback_pair(&spec, &p, &flow, &x).unwrap();
        let full = truncate_pair(&spec, &table, &pair, &x, 0).unwrap();
        assert!(full.control.values().iter().skip(1).all(|u| u[0] == 0.0));
        for j in 0..129 {
            assert!((full.state.at(j) - table.u(j, 0) * &x).norm() < 1e-15);
        }
        let mut last = f64::INFINITY;
        for end in [100, 110, 118, 124, 127] {
            let tr = truncate_pair(&spec, &table, &pair, &x, end).unwrap();
            for j in 0..end {
                assert_eq!(tr.state.at(j), pair.state.at(j));
            }
            // ‖u_ε − ū‖² is the tail integral of ‖ū‖² over [T−ε, T]
            assert!(tr.control.values()[end + 1..].iter().all(|u| u[0] == 0.0));
            let norm = crate::control_maps::l2_inner(&pair.control, &pair.control, end, 128).sqrt();
            assert!(norm < last, "end {end}: {norm} vs {last}");
            last = norm;
            // y_ε(T) = U(T,s)x + L_sT u_ε
            let y_t = table.u(128, 0) * &x + &tr.lst_endpoint;
            assert!((y_t - tr.state.terminal()).norm() < 1e-14);
        }
    }
}
