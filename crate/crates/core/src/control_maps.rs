//! Input-to-state maps `L_s`, `L_sT` and their adjoints.
//!
//! Controls and states live on grid nodes; every integral is the composite
//! quadratic rule of [`crate::quadrature`] over the nodes it spans. Anchors
//! (`s`, `T − ε`) are node indices.

use crate::error::{Error, Result};
use crate::evolution::{neg_power, EvolutionTable};
use crate::linalg::{Mat, Vector};
use crate::path::{ControlPath, Endpoint, NodePath, StatePath};
use crate::problem::ProblemSpec;
use crate::quadrature;

fn check_control(spec: &ProblemSpec, table: &EvolutionTable, u: &NodePath) -> Result<()> {
    if u.dim() != spec.control_dim {
        return Err(Error::dim("control path", spec.control_dim, u.dim()));
    }
    if **u.grid() != **table.grid() {
        return Err(Error::Structure(
            "control path and evolution table use different grids".into(),
        ));
    }
    Ok(())
}

fn check_state(spec: &ProblemSpec, table: &EvolutionTable, v: &NodePath) -> Result<()> {
    if v.dim() != spec.state_dim {
        return Err(Error::dim("state path", spec.state_dim, v.dim()));
    }
    if **v.grid() != **table.grid() {
        return Err(Error::Structure(
            "state path and evolution table use different grids".into(),
        ));
    }
    Ok(())
}

/// `U(t, s) A(s) G(s)` through the factorization
/// `−[(−A(s)*)^{1−α} U(t,s)*]* (−A(s))^α G(s)`; direct product when `A(s)`
/// is not symmetric.
pub fn uag(table: &EvolutionTable, spec: &ProblemSpec, t: f64, s: f64) -> Result<Mat> {
    if s >= t {
        return Err(Error::domain(format!(
            "U(t,s)A(s)G(s) needs s < t, got s = {s}, t = {t}"
        )));
    }
    let u = table.eval(t, s)?;
    let a = spec.a.eval(s);
    let g = spec.g.eval(s);
    if !crate::linalg::is_symmetric(&a, 1e-12) {
        return Ok(u * a * g);
    }
    let left = neg_power(&a.transpose(), 1.0 - spec.alpha)? * u.transpose();
    let right = neg_power(&a, spec.alpha)? * g;
    Ok(-(left.transpose() * right))
}

/// `U(t, s) A(s) G(s)` as a plain product.
pub fn uag_direct(table: &EvolutionTable, spec: &ProblemSpec, t: f64, s: f64) -> Result<Mat> {
    if s >= t {
        return Err(Error::domain(format!(
            "U(t,s)A(s)G(s) needs s < t, got s = {s}, t = {t}"
        )));
    }
    Ok(table.eval(t, s)? * spec.a.eval(s) * spec.g.eval(s))
}

/// `(L_s u)(t_j) = −∫_s^{t_j} U(t_j, r) A(r) G(r) u(r) dr` on all nodes `j ≥ s`.
///
/// The last sample equals `L_sT u` and is flagged as the endpoint value.
pub fn apply_ls(spec: &ProblemSpec, table: &EvolutionTable, u: &ControlPath) -> Result<StatePath> {
    check_control(spec, table, u)?;
    let co = spec.coefficients()?;
    let grid = table.grid();
    let s = u.start();
    let n = grid.len();
    let forcing: Vec<Vector> = (s..n).map(|k| &co[k].ag * u.at(k)).collect();
    let mut values = Vec::with_capacity(n - s);
    for j in s..n {
        let w = quadrature::grid_weights(grid, s, j);
        let mut y = Vector::zeros(spec.state_dim);
        for (k, wk) in (s..=j).zip(w) {
            if wk != 0.0 {
                y.gemv(-wk, &table.u(j, k), &forcing[k - s], 1.0);
            }
        }
        values.push(y);
    }
    Ok(StatePath {
        path: NodePath::new(grid.clone(), s, values)?,
        endpoint: Endpoint::Flagged,
    })
}

/// `L_sT u = −∫_s^T U(T, r) A(r) G(r) u(r) dr`.
pub fn apply_lst(spec: &ProblemSpec, table: &EvolutionTable, u: &ControlPath) -> Result<Vector> {
    check_control(spec, table, u)?;
    let co = spec.coefficients()?;
    let grid = table.grid();
    let (s, last) = (u.start(), grid.last_index());
    let w = quadrature::grid_weights(grid, s, last);
    let mut y = Vector::zeros(spec.state_dim);
    for (k, wk) in (s..=last).zip(w) {
        let f = &co[k].ag * u.at(k);
        y.gemv(-wk, &table.u(last, k), &f, 1.0);
    }
    Ok(y)
}

/// `(L_sT* y)(r) = −G(r)* A(r)* U(T, r)* y` on nodes `r ≥ s`.
pub fn apply_lst_adjoint(spec: &ProblemSpec, table: &EvolutionTable, y: &Vector, s: usize) -> Result<ControlPath> {
    if y.len() != spec.state_dim {
        return Err(Error::dim("state vector", spec.state_dim, y.len()));
    }
    let co = spec.coefficients()?;
    let grid = table.grid();
    let last = grid.last_index();
    let values = (s..=last)
        .map(|r| {
            let z = table.u(last, r).tr_mul(y);
            -(&co[r].gta * z)
        })
        .collect();
    Ok(ControlPath(NodePath::new(grid.clone(), s, values)?))
}

/// `(L_s^{*ε} v)(t) = −G(t)* A(t)* ∫_t^{T−ε} U(σ, t)* v(σ) dσ` for nodes
/// `t` in `[s, T−ε]` (`s = v.start()`, `T − ε` = node `end`, which may be
/// the last node); zero after.
pub fn apply_ls_adjoint_eps(
    spec: &ProblemSpec,
    table: &EvolutionTable,
    v: &NodePath,
    end: usize,
) -> Result<ControlPath> {
    check_state(spec, table, v)?;
    let co = spec.coefficients()?;
    let grid = table.grid();
    let s = v.start();
    if end <= s || end >= grid.len() {
        return Err(Error::domain(format!(
            "truncation node {end} must lie after anchor {s} and on the grid"
        )));
    }
    let mut values = Vec::with_capacity(grid.len() - s);
    #[allow(clippy::needless_range_loop)]
    for t in s..grid.len() {
        if t > end {
            values.push(Vector::zeros(spec.control_dim));
            continue;
        }
        let w = quadrature::grid_weights(grid, t, end);
        let mut acc = Vector::zeros(spec.state_dim);
        for (sig, ws) in (t..=end).zip(w) {
            acc += table.u(sig, t).tr_mul(v.at(sig)) * ws;
        }
        values.push(-(&co[t].gta * acc));
    }
    Ok(ControlPath(NodePath::new(grid.clone(), s, values)?))
}

/// Gap in `L_0T u = L_sT u + U(T, s) (L_0 u)(s)` for a control on the whole interval.
pub fn ls0t_consistency(spec: &ProblemSpec, table: &EvolutionTable, u: &ControlPath, s: usize) -> Result<f64> {
    if u.start() != 0 {
        return Err(Error::domain("consistency check needs a control starting at node 0"));
    }
    let full = apply_lst(spec, table, u)?;
    let tail = apply_lst(spec, table, &ControlPath(u.restrict(s)?))?;
    let head = apply_ls(spec, table, u)?;
    let last = table.grid().last_index();
    let carried = table.u(last, s) * head.at(s);
    Ok((full - tail - carried).norm())
}

/// `∫ ⟨p(r), q(r)⟩ dr` over nodes `from..=to`.
pub fn l2_inner(p: &NodePath, q: &NodePath, from: usize, to: usize) -> f64 {
    quadrature::integrate_by(p.grid(), from, to, |k| p.at(k).dot(q.at(k)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::problem::{build_heat_problem, logistic_problem, HeatConfig};
    use std::sync::Arc;

    fn scalar(n: usize) -> (ProblemSpec, EvolutionTable) {
        let grid = Arc::new(TimeGrid::new(0.0, 1.0, n, 2.0).unwrap());
        let spec = logistic_problem(grid, 0.25).unwrap();
        let table = EvolutionTable::build(&spec.a).unwrap();
        (spec, table)
    }

    fn control(spec: &ProblemSpec, s: usize, f: impl Fn(f64) -> f64) -> ControlPath {
        ControlPath(NodePath::from_fn(spec.grid().clone(), s, |t| {
            Vector::from_element(spec.control_dim, f(t))
        }))
    }

    #[test]
    fn uag_scalar_values() {
        let (spec, table) = scalar(65);
        let v = uag(&table, &spec, 1.0, 0.0).unwrap();
        assert!((v[(0, 0)] + (-1.0f64).exp()).abs() < 1e-12);
        let near = uag(&table, &spec, 0.5 + 1e-6, 0.5).unwrap();
        assert!((near[(0, 0)] + 1.0).abs() < 1e-5);
        assert!(uag(&table, &spec, 0.5, 0.5).is_err());
    }

    #[test]
    fn uag_factorization_matches_direct_on_heat() {
        let mut cfg = HeatConfig::new(8);
        cfg.node_count = 33;
        let spec = build_heat_problem(&cfg).unwrap();
        let table = EvolutionTable::build(&spec.a).unwrap();
        for (t, s) in [(1.0, 0.0), (0.6, 0.55), (0.3, 0.01)] {
            let f = uag(&table, &spec, t, s).unwrap();
            let d = uag_direct(&table, &spec, t, s).unwrap();
            assert!((f - &d).norm() <= 1e-10 * d.norm().max(1.0));
        }
    }

    #[test]
    fn ls_scalar_unit_control() {
        let (spec, table) = scalar(129);
        let y = apply_ls(&spec, &table, &control(&spec, 0, |_| 1.0)).unwrap();
        for (j, &t) in spec.grid().nodes().iter().enumerate() {
            // a single cell falls back to the trapezoid rule
            let tol = if j == 1 { 1e-6 } else { 1e-8 };
            assert!((y.at(j)[0] - (1.0 - (-t).exp())).abs() < tol);
        }
        assert_eq!(y.endpoint, Endpoint::Flagged);
        let lst = apply_lst(&spec, &table, &control(&spec, 0, |_| 1.0)).unwrap();
        assert!((lst[0] - 0.6321206).abs() < 1e-7);
        assert_eq!(lst[0], y.terminal()[0]);
        let zero = apply_ls(&spec, &table, &control(&spec, 0, |_| 0.0)).unwrap();
        assert!(zero.values().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn ls_third_order_convergence() {
        let err = |n: usize| {
            let (spec, table) = scalar(n);
            let y = apply_lst(&spec, &table, &control(&spec, 0, |t| (3.0 * t).cos())).unwrap();
            // −∫ e^{−(1−r)}(−1) cos 3r dr
            let exact = ((3.0f64).cos() + 3.0 * (3.0f64).sin() - (-1.0f64).exp()) / 10.0;
            (y[0] - exact).abs()
        };
        let (e1, e2, e3) = (err(33), err(65), err(129));
        assert!((e1 / e2).log2() >= 2.5 && (e2 / e3).log2() >= 2.5, "{e1} {e2} {e3}");
    }

    #[test]
    fn linearity() {
        let (spec, table) = scalar(65);
        let u = control(&spec, 3, |t| t.sin());
        let v = control(&spec, 3, |t| 1.0 - t * t);
        let lhs = apply_ls(&spec, &table, &ControlPath(u.add(&v))).unwrap();
        let a = apply_ls(&spec, &table, &u).unwrap();
        let b = apply_ls(&spec, &table, &v).unwrap();
        assert!(lhs.sup_distance(&a.add(&b)) < 1e-12);
    }

    #[test]
    fn lst_adjoint_values_and_restriction() {
        let (spec, table) = scalar(65);
        let one = Vector::from_element(1, 1.0);
        let z = apply_lst_adjoint(&spec, &table, &one, 0).unwrap();
        assert!((z.at(0)[0] - (-1.0f64).exp()).abs() < 1e-12);
        let tail = apply_lst_adjoint(&spec, &table, &one, 20).unwrap();
        for j in 20..65 {
            assert_eq!(tail.at(j), z.at(j));
        }
        let zero = apply_lst_adjoint(&spec, &table, &Vector::zeros(1), 0).unwrap();
        assert!(zero.values().iter().all(|v| v[0] == 0.0));
    }

    #[test]
    fn ls_adjoint_eps_scalar_oracle() {
        let (spec, table) = scalar(129);
        let v = NodePath::from_fn(spec.grid().clone(), 0, |_| Vector::from_element(1, 1.0));
        let w = apply_ls_adjoint_eps(&spec, &table, &v, 127).unwrap();
        let end = spec.grid().node(127);
        let oracle = 1.0 - (-end).exp();
        assert!((w.at(0)[0] - oracle).abs() < 1e-8);
        assert_eq!(w.at(128)[0], 0.0);
        let full = apply_ls_adjoint_eps(&spec, &table, &v, 128).unwrap();
        assert!((full.at(0)[0] - 0.6321206).abs() < 1e-7);
        assert!(apply_ls_adjoint_eps(&spec, &table, &v, 129).is_err());
        assert!(apply_ls_adjoint_eps(&spec, &table, &v, 0).is_err());
    }

    #[test]
    fn ls0t_consistency_scalar() {
        let (spec, table) = scalar(513);
        let u = control(&spec, 0, |t| (2.0 * t).sin() + 0.3);
        let s = spec.grid().nearest(0.5);
        assert!(ls0t_consistency(&spec, &table, &u, s).unwrap() < 1e-8);
    }
}
