use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_loop::{feedback_pair, solve_phi, ClosedLoopFlow};
use crate::control_maps::{apply_ls, apply_ls_adjoint_eps, l2_inner};
use crate::error::{Error, Result};
use crate::evolution::EvolutionTable;
use crate::linalg::{self, bilinear, Vector};
use crate::path::{ControlPath, Endpoint, NodePath, OperatorPath, StatePath};
use crate::problem::ProblemSpec;
use crate::quadrature;
use crate::riccati::{weak_residual, RiccatiSolution};

/// `y = U(·, s) x + L_s u` with `s = u.start()`.
pub fn controlled_state(spec: &ProblemSpec, table: &EvolutionTable, u: &ControlPath, x: &Vector) -> Result<StatePath> {
    if x.len() != spec.state_dim {
        return Err(Error::dim("initial state", spec.state_dim, x.len()));
    }
    let ls = apply_ls(spec, table, u)?;
    let s = u.start();
    let values = (s..table.grid().len()).map(|j| table.u(j, s) * x + ls.at(j)).collect();
    Ok(StatePath {
        path: NodePath::new(table.grid().clone(), s, values)?,
        endpoint: Endpoint::Flagged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostTerms {
    pub state: f64,
    pub control: f64,
    pub terminal: f64,
}

impl CostTerms {
    pub fn total(&self) -> f64 {
        self.state + self.control + self.terminal
    }
}

/// The three terms of `J_s(u)` for the initial state `x` at `s = u.start()`.
pub fn cost_terms(spec: &ProblemSpec, table: &EvolutionTable, u: &ControlPath, x: &Vector) -> Result<CostTerms> {
    let y = controlled_state(spec, table, u, x)?;
    let grid = table.grid();
    let (s, last) = (u.start(), grid.last_index());
    let state = quadrature::integrate_by(grid, s, last, |j| bilinear(y.at(j), spec.m.at_node(j), y.at(j)));
    let control = quadrature::integrate_by(grid, s, last, |j| bilinear(u.at(j), spec.n.at_node(j), u.at(j)));
    let terminal = bilinear(y.terminal(), &spec.p_t, y.terminal());
    Ok(CostTerms {
        state,
        control,
        terminal,
    })
}

/// `J_s(u)`; always finite on a finite-dimensional state space.
pub fn cost(spec: &ProblemSpec, table: &EvolutionTable, u: &ControlPath, x: &Vector) -> Result<f64> {
    Ok(cost_terms(spec, table, u, x)?.total())
}

/// `|⟨P(s)x, x⟩ − J_s(û)|` for the feedback control generated by `P`.
pub fn value_identity(
    spec: &ProblemSpec,
    table: &EvolutionTable,
    p: &RiccatiSolution,
    flow: &ClosedLoopFlow,
    x: &Vector,
) -> Result<f64> {
    let pair = feedback_pair(spec, p, flow, x)?;
    let j = cost(spec, table, &pair.control, x)?;
    Ok((bilinear(x, p.at(flow.anchor()), x) - j).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityGap {
    pub lhs: f64,
    pub rhs: f64,
}

impl IdentityGap {
    pub fn gap(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

/// Both sides of the completion-of-squares identity on `[s, T−ε]`, with
/// `s = u.start()` and `T−ε` the node `end`:
///
/// `⟨Q(T−ε)y(T−ε), y(T−ε)⟩ − ⟨Q(s)x, x⟩
///  = −∫‖M^{1/2}y‖² − ∫‖N^{1/2}u‖² + ∫‖N^{1/2}u − N^{−1/2}G*A*Q y‖²`.
pub fn fundamental_identity(
    spec: &ProblemSpec,
    table: &EvolutionTable,
    q: &RiccatiSolution,
    x: &Vector,
    u: &ControlPath,
    end: usize,
) -> Result<IdentityGap> {
    let s = u.start();
    if end < s || end >= table.grid().len() {
        return Err(Error::domain(format!("truncation node {end} outside [{s}, T]")));
    }
    let co = spec.coefficients()?;
    let y = controlled_state(spec, table, u, x)?;
    let ye = y.at(end);
    let lhs = bilinear(ye, q.at(end), ye) - bilinear(x, q.at(s), x);
    let rhs = quadrature::integrate_by(table.grid(), s, end, |r| {
        let (yr, ur, c) = (y.at(r), u.at(r), &co[r]);
        let split = &c.n_sqrt * ur - &c.n_inv_sqrt * (&c.gta * (q.at(r) * yr));
        -bilinear(yr, spec.m.at_node(r), yr) - bilinear(ur, spec.n.at_node(r), ur) + split.norm_squared()
    });
    Ok(IdentityGap { lhs, rhs })
}

/// Both sides of the symmetrization identity on `[s, T−ε]`:
///
/// `∫⟨(L_s^{*ε} Ψ L_s v)(r), v(r)⟩ dr
///  = −2 ∫⟨G*A* [∫_q^{T−ε} U(r,q)* Ψ(r) U(r,q) dr] (L_s v)(q), v(q)⟩ dq`.
pub fn symmetrization_check(
    spec: &ProblemSpec,
    table: &EvolutionTable,
    psi: &OperatorPath,
    v: &ControlPath,
    end: usize,
) -> Result<IdentityGap> {
    let s = v.start();
    let grid = table.grid();
    if end <= s || end >= grid.len() {
        return Err(Error::domain(format!("truncation node {end} must lie in ({s}, T]")));
    }
    for (j, m) in psi.values().iter().enumerate().skip(s).take(end - s + 1) {
        if !linalg::is_symmetric(m, 1e-12) {
            return Err(Error::Validation {
                what: "Ψ".into(),
                node: j,
                detail: format!("not symmetric (asymmetry {:.3e})", linalg::asymmetry(m)),
            });
        }
    }
    let co = spec.coefficients()?;
    let w = apply_ls(spec, table, v)?;
    let psi_w = NodePath::new(
        grid.clone(),
        s,
        (s..grid.len()).map(|j| psi.at_node(j) * w.at(j)).collect(),
    )?;
    let adj = apply_ls_adjoint_eps(spec, table, &psi_w, end)?;
    let lhs = l2_inner(&adj, v, s, end);
    let inner: Vec<f64> = (s..=end)
        .into_par_iter()
        .map(|q| {
            let wq = w.at(q);
            let weights = quadrature::grid_weights(grid, q, end);
            let mut z = Vector::zeros(spec.state_dim);
            for (r, wr) in (q..=end).zip(weights) {
                let uw = table.u(r, q) * wq;
                z += table.u(r, q).tr_mul(&(psi.at_node(r) * uw)) * wr;
            }
            (&co[q].gta * z).dot(v.at(q))
        })
        .collect();
    let rhs = -2.0 * quadrature::integrate(grid, s, end, &inner);
    Ok(IdentityGap { lhs, rhs })
}

/// Residuals of the weak form and of the two closed-loop forms of the
/// integral Riccati equation for the same `(s, T−ε, x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalentForms {
    pub weak: f64,
    pub mixed: f64,
    pub closed: f64,
}

impl EquivalentForms {
    pub fn max(&self) -> f64 {
        self.weak.max(self.mixed).max(self.closed)
    }

    pub fn min(&self) -> f64 {
        self.weak.min(self.mixed).min(self.closed)
    }
}

pub fn equivalent_forms(
    spec: &ProblemSpec,
    table: &EvolutionTable,
    q: &RiccatiSolution,
    flow: &ClosedLoopFlow,
    end: usize,
    x: &Vector,
    y: &Vector,
) -> Result<EquivalentForms> {
    let s = flow.anchor();
    let grid = table.grid();
    if end < s || end >= grid.len() {
        return Err(Error::domain(format!("truncation node {end} outside [{s}, T]")));
    }
    let co = spec.coefficients()?;
    let weak = weak_residual(q, spec, table, s, end, x, y)?;
    let lhs = bilinear(y, q.at(s), x);
    let px = |r: usize| flow.at(r) * x;
    let py = |r: usize| flow.at(r) * y;
    let uy = |r: usize| table.u(r, s) * y;

    let mixed_rhs = bilinear(&uy(end), q.at(end), &px(end))
        + quadrature::integrate_by(grid, s, end, |r| bilinear(&uy(r), spec.m.at_node(r), &px(r)));
    let closed_rhs = bilinear(&py(end), q.at(end), &px(end))
        + quadrature::integrate_by(grid, s, end, |r| {
            let (a, b) = (px(r), py(r));
            let fa = &co[r].gta * (q.at(r) * &a);
            let fb = &co[r].gta * (q.at(r) * &b);
            bilinear(&b, spec.m.at_node(r), &a) + bilinear(&fb, &co[r].n_inv, &fa)
        });
    Ok(EquivalentForms {
        weak,
        mixed: (lhs - mixed_rhs).abs(),
        closed: (lhs - closed_rhs).abs(),
    })
}

/// Cost excess of an arbitrary control over the feedback control, next to
/// the completion-of-squares integral that should account for it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalityGap {
    pub cost_optimal: f64,
    pub cost_other: f64,
    pub square_integral: f64,
}

impl OptimalityGap {
    /// `|J(u) − J(û) − ∫‖N^{1/2}u − N^{−1/2}G*A*P y‖²|`.
    pub fn mismatch(&self) -> f64 {
        (self.cost_other - self.cost_optimal - self.square_integral).abs()
    }
}

pub fn optimality_gap(
    spec: &ProblemSpec,
    table: &EvolutionTable,
    p: &RiccatiSolution,
    flow: &ClosedLoopFlow,
    u: &ControlPath,
    x: &Vector,
) -> Result<OptimalityGap> {
    let s = flow.anchor();
    if u.start() != s {
        return Err(Error::domain(format!(
            "control starts at node {}, flow at {s}",
            u.start()
        )));
    }
    let co = spec.coefficients()?;
    let pair = feedback_pair(spec, p, flow, x)?;
    let cost_optimal = cost(spec, table, &pair.control, x)?;
    let cost_other = cost(spec, table, u, x)?;
    let y = controlled_state(spec, table, u, x)?;
    let grid = table.grid();
    let square_integral = quadrature::integrate_by(grid, s, grid.last_index(), |r| {
        let c = &co[r];
        (&c.n_sqrt * u.at(r) - &c.n_inv_sqrt * (&c.gta * (p.at(r) * y.at(r)))).norm_squared()
    });
    Ok(OptimalityGap {
        cost_optimal,
        cost_other,
        square_integral,
    })
}

/// Outcome of comparing two independently computed Riccati operators at `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichOutcome {
    pub anchor: usize,
    /// `‖P(s) − Q(s)‖₂`.
    pub gap_norm: f64,
    /// `max_x (⟨Q(s)x,x⟩ − ⟨P(s)x,x⟩)⁺` over the probes.
    pub lower_violation: f64,
    /// `max_x (⟨P(s)x,x⟩ − ⟨Q(s)x,x⟩)⁺` over the probes.
    pub upper_violation: f64,
    /// `max_x (⟨Q(s)x,x⟩ − J_s(ū_Q))⁺`, the cost of the `Q`-feedback
    /// control bounding `⟨Q(s)x,x⟩` from above.
    pub replay_violation: f64,
}

pub fn sandwich_outcome(
    spec: &ProblemSpec,
    table: &EvolutionTable,
    p: &RiccatiSolution,
    q: &RiccatiSolution,
    s: usize,
    probes: &[Vector],
) -> Result<SandwichOutcome> {
    let (ps, qs) = (p.at(s), q.at(s));
    let flow = solve_phi(spec, table, q, s)?;
    let mut lower = 0.0_f64;
    let mut upper = 0.0_f64;
    let replay: Vec<f64> = probes
        .par_iter()
        .map(|x| -> Result<f64> {
            let pair = feedback_pair(spec, q, &flow, x)?;
            Ok((bilinear(x, qs, x) - cost(spec, table, &pair.control, x)?).max(0.0))
        })
        .collect::<Result<_>>()?;
    for x in probes {
        let d = bilinear(x, ps, x) - bilinear(x, qs, x);
        lower = lower.max(-d);
        upper = upper.max(d);
    }
    Ok(SandwichOutcome {
        anchor: s,
        gap_norm: linalg::spectral_norm(&(ps - qs)),
        lower_violation: lower,
        upper_violation: upper,
        replay_violation: replay.into_iter().fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::linalg::Mat;
    use crate::problem::{logistic_problem, scalar_problem};
    use crate::riccati::{solve_dre_backward, solve_ire_picard};
    use crate::verify::probes::{random_control, random_symmetric_path, stream};
    use std::sync::Arc;

    fn logistic(n: usize) -> (ProblemSpec, EvolutionTable, RiccatiSolution) {
        let grid = Arc::new(TimeGrid::new(0.0, 1.0, n, 2.0).unwrap());
        let spec = logistic_problem(grid, 0.25).unwrap();
        let table = EvolutionTable::build(&spec.a).unwrap();
        let p = solve_dre_backward(&spec, &table).unwrap();
        (spec, table, p)
    }

    fn one() -> Vector {
        Vector::from_element(1, 1.0)
    }

    #[test]
    fn free_decay_cost() {
        let grid = Arc::new(TimeGrid::uniform(0.0, 1.0, 257).unwrap());
        let spec = scalar_problem(
            grid.clone(),
            0.25,
            (-1.0).into(),
            1.0.into(),
            0.0.into(),
            1.0.into(),
            1.0,
            1.0,
        )
        .unwrap();
        let table = EvolutionTable::build(&spec.a).unwrap();
        let u = ControlPath(NodePath::zeros(grid, 0, 1));
        let j = cost(&spec, &table, &u, &one()).unwrap();
        assert!((j - (-2.0_f64).exp()).abs() < 1e-10, "{j}");
        assert_eq!(cost(&spec, &table, &u, &Vector::zeros(1)).unwrap(), 0.0);
    }

    #[test]
    fn value_matches_closed_form() {
        let (spec, table, p) = logistic(513);
        let flow = solve_phi(&spec, &table, &p, 0).unwrap();
        let r = value_identity(&spec, &table, &p, &flow, &one()).unwrap();
        assert!(r < 1e-6, "{r}");
        assert!((p.at(0)[(0, 0)] - 0.0944860).abs() < 1e-6);
        assert_eq!(
            value_identity(&spec, &table, &p, &flow, &Vector::zeros(1)).unwrap(),
            0.0
        );
    }

    #[test]
    fn fundamental_identity_detects_perturbation() {
        let (spec, table, p) = logistic(513);
        let mut rng = stream(11, "fi");
        let grid = table.grid().clone();
        for k in 0..5 {
            let s = 40 * k;
            let u = random_control(&mut rng, &grid, s, 1);
            let end = grid.index_before_end(0.05 * (k + 1) as f64);
            let g = fundamental_identity(&spec, &table, &p, &one(), &u, end).unwrap();
            assert!(g.gap() < 1e-7, "{k}: {g:?}");
            let bad = fundamental_identity(&spec, &table, &p.perturbed(0.1), &one(), &u, end).unwrap();
            assert!(bad.gap() > 1e-2, "{k}: {bad:?}");
        }
    }

    #[test]
    fn feedback_control_closes_the_square() {
        let (spec, table, p) = logistic(513);
        let flow = solve_phi(&spec, &table, &p, 0).unwrap();
        let pair = feedback_pair(&spec, &p, &flow, &one()).unwrap();
        let end = table.grid().index_before_end(0.1);
        let g = fundamental_identity(&spec, &table, &p, &one(), &pair.control, end).unwrap();
        assert!(g.gap() < 1e-6, "{g:?}");
    }

    #[test]
    fn symmetrization_identity() {
        let (spec, table, _) = logistic(257);
        let grid = table.grid().clone();
        let mut rng = stream(5, "sym");
        for k in 0..3 {
            let psi = random_symmetric_path(&mut rng, &grid, 1);
            let v = random_control(&mut rng, &grid, 10 * k, 1);
            let end = grid.index_before_end(0.1);
            let g = symmetrization_check(&spec, &table, &psi, &v, end).unwrap();
            assert!(g.gap() < 1e-7, "{g:?}");
            assert!(g.lhs.abs() > 1e-6);
        }
        let zero = OperatorPath::constant(grid.clone(), Mat::zeros(1, 1));
        let v = random_control(&mut rng, &grid, 0, 1);
        let g = symmetrization_check(&spec, &table, &zero, &v, grid.last_index()).unwrap();
        assert_eq!((g.lhs, g.rhs), (0.0, -0.0));
        let skew = OperatorPath::constant(grid.clone(), Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]));
        assert!(symmetrization_check(&spec, &table, &skew, &v, 100).is_err());
    }

    #[test]
    fn equivalent_forms_agree_and_codetect() {
        let (spec, table, p) = logistic(513);
        let flow = solve_phi(&spec, &table, &p, 30).unwrap();
        let end = table.grid().index_before_end(0.2);
        let (x, y) = (one(), Vector::from_element(1, -0.7));
        let r = equivalent_forms(&spec, &table, &p, &flow, end, &x, &y).unwrap();
        assert!(r.max() < 1e-6, "{r:?}");
        let bad = p.perturbed(0.1);
        let flow_bad = solve_phi(&spec, &table, &bad, 30).unwrap();
        let r = equivalent_forms(&spec, &table, &bad, &flow_bad, end, &x, &y).unwrap();
        assert!(r.min() > 1e-3, "{r:?}");
    }

    #[test]
    fn optimality_bookkeeping() {
        let (spec, table, p) = logistic(513);
        let flow = solve_phi(&spec, &table, &p, 0).unwrap();
        let mut rng = stream(2, "opt");
        for _ in 0..5 {
            let u = random_control(&mut rng, table.grid(), 0, 1);
            let g = optimality_gap(&spec, &table, &p, &flow, &u, &one()).unwrap();
            assert!(g.cost_other >= g.cost_optimal);
            assert!(g.mismatch() < 1e-6, "{g:?}");
        }
    }

    #[test]
    fn sandwich_on_logistic() {
        let (spec, table, p) = logistic(513);
        let q = solve_ire_picard(&spec, &table).unwrap();
        let o = sandwich_outcome(&spec, &table, &p, &q, 0, &[one()]).unwrap();
        assert!(o.gap_norm < 1e-6 && o.replay_violation < 1e-6, "{o:?}");
    }
}
