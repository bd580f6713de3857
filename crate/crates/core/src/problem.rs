//! Problem data, hypothesis checks and reference problems.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::{frac_power, EvolutionTable};
use crate::grid::TimeGrid;
use crate::linalg::{self, Mat, Vector};
use crate::path::OperatorPath;
use crate::quadrature;

/// Relative symmetry tolerance for weight matrices.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalue floor for positive semidefiniteness.
pub const PSD_FLOOR: f64 = -1e-10;

/// Per-node quantities derived once from the problem data.
#[derive(Debug, Clone)]
pub struct NodeCoefficients {
    /// `A(t)G(t)`, state × control.
    pub ag: Mat,
    /// `G(t)*A(t)*`, control × state.
    pub gta: Mat,
    pub n_inv: Mat,
    pub n_inv_sqrt: Mat,
    pub n_sqrt: Mat,
    pub m_sqrt: Mat,
    /// `A G N⁻¹ G* A*`.
    pub gain: Mat,
}

/// The tuple `(A(·), G(·), M(·), N(·), P_T, T, α, ν)` on a finite-dimensional state space.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub state_dim: usize,
    pub control_dim: usize,
    pub horizon: f64,
    pub alpha: f64,
    pub nu: f64,
    pub a: OperatorPath,
    pub g: OperatorPath,
    pub m: OperatorPath,
    pub n: OperatorPath,
    pub p_t: Mat,
    coeffs: Option<Arc<Vec<NodeCoefficients>>>,
}

impl ProblemSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        horizon: f64,
        alpha: f64,
        nu: f64,
        a: OperatorPath,
        g: OperatorPath,
        m: OperatorPath,
        n: OperatorPath,
        p_t: Mat,
    ) -> Result<Self> {
        let (d, d2) = a.shape();
        if d != d2 || d == 0 {
            return Err(Error::dim("A(t)", "square nonempty", format!("{d}x{d2}")));
        }
        let (gd, c) = g.shape();
        if gd != d || c == 0 {
            return Err(Error::dim("G(t)", format!("{d}x(c>0)"), format!("{gd}x{c}")));
        }
        if m.shape() != (d, d) {
            return Err(Error::dim("M(t)", format!("{d}x{d}"), format!("{:?}", m.shape())));
        }
        if n.shape() != (c, c) {
            return Err(Error::dim("N(t)", format!("{c}x{c}"), format!("{:?}", n.shape())));
        }
        if p_t.shape() != (d, d) {
            return Err(Error::dim("P_T", format!("{d}x{d}"), format!("{:?}", p_t.shape())));
        }
        let grid = a.grid().clone();
        for (name, p) in [("G", &g), ("M", &m), ("N", &n)] {
            if p.grid() != &grid && **p.grid() != *grid {
                return Err(Error::Structure(format!(
                    "{name}(t) lives on a different grid than A(t)"
                )));
            }
        }
        if !(horizon > 0.0) || (grid.end() - horizon).abs() > 1e-12 * horizon.max(1.0) {
            return Err(Error::Structure(format!(
                "horizon {horizon} does not match grid end {}",
                grid.end()
            )));
        }
        let mut spec = Self {
            state_dim: d,
            control_dim: c,
            horizon,
            alpha,
            nu,
            a,
            g,
            m,
            n,
            p_t,
            coeffs: None,
        };
        spec.coeffs = spec.build_coefficients().map(Arc::new);
        Ok(spec)
    }

    fn build_coefficients(&self) -> Option<Vec<NodeCoefficients>> {
        (0..self.grid().len())
            .map(|j| {
                let a = self.a.at_node(j);
                let ag = a * self.g.at_node(j);
                let n = linalg::symmetrize(self.n.at_node(j));
                let n_inv = linalg::symmetrize(&n.clone().try_inverse()?);
                let gta = ag.transpose();
                let gain = linalg::symmetrize(&(&ag * &n_inv * &gta));
                Some(NodeCoefficients {
                    n_inv_sqrt: linalg::sqrt_psd(&n_inv),
                    n_sqrt: linalg::sqrt_psd(&n),
                    m_sqrt: linalg::sqrt_psd(self.m.at_node(j)),
                    n_inv,
                    gain,
                    gta,
                    ag,
                })
            })
            .collect()
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        self.a.grid()
    }

    /// Derived node data; fails when some `N(t)` is singular.
    pub fn coefficients(&self) -> Result<&[NodeCoefficients]> {
        self.coeffs
            .as_deref()
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Domain("N(t) is singular at some node".into()))
    }

    pub fn coeff(&self, j: usize) -> &NodeCoefficients {
        &self.coefficients().expect("coefficients checked by caller")[j]
    }

    pub fn p_t_sqrt(&self) -> Mat {
        linalg::sqrt_psd(&self.p_t)
    }

    /// Same data on a different grid (paths re-sampled from their generators
    /// or interpolants).
    pub fn regrid(&self, grid: Arc<TimeGrid>) -> Result<Self> {
        let resample = |p: &OperatorPath| -> Result<OperatorPath> {
            let src = p.clone();
            if p.has_generator() {
                Ok(OperatorPath::from_fn(grid.clone(), move |t| src.eval(t)))
            } else {
                let vals = grid.nodes().iter().map(|&t| src.eval(t)).collect();
                OperatorPath::from_values(grid.clone(), vals, p.interpolation_order())
            }
        };
        Self::new(
            self.horizon,
            self.alpha,
            self.nu,
            resample(&self.a)?,
            resample(&self.g)?,
            resample(&self.m)?,
            resample(&self.n)?,
            self.p_t.clone(),
        )
    }

    /// Replaces the final cost.
    pub fn with_final_cost(&self, p_t: Mat) -> Result<Self> {
        let mut s = self.clone();
        if p_t.shape() != (self.state_dim, self.state_dim) {
            return Err(Error::dim("P_T", self.state_dim, p_t.nrows()));
        }
        s.p_t = p_t;
        Ok(s)
    }

    pub fn a_is_symmetric(&self) -> bool {
        self.a.values().iter().all(|m| linalg::is_symmetric(m, 1e-12))
    }
}

/// Scalar coefficient `c(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarFn {
    Const(f64),
    Affine { affine: [f64; 2] },
    Poly { poly: Vec<f64> },
    Exp { exp: [f64; 2] },
}

impl ScalarFn {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            ScalarFn::Const(c) => *c,
            ScalarFn::Affine { affine } => affine[0] + affine[1] * t,
            ScalarFn::Poly { poly } => poly.iter().rev().fold(0.0, |acc, c| acc * t + c),
            ScalarFn::Exp { exp } => exp[0] * (exp[1] * t).exp(),
        }
    }
}

impl From<f64> for ScalarFn {
    fn from(c: f64) -> Self {
        ScalarFn::Const(c)
    }
}

fn scalar_path(grid: &Arc<TimeGrid>, f: ScalarFn) -> OperatorPath {
    OperatorPath::from_fn(grid.clone(), move |t| Mat::from_element(1, 1, f.eval(t)))
}

/// One-dimensional problem `(a(t), g(t), m(t), n(t), p_T)`.
#[allow(clippy::too_many_arguments)]
pub fn scalar_problem(
    grid: Arc<TimeGrid>,
    alpha: f64,
    a: ScalarFn,
    g: ScalarFn,
    m: ScalarFn,
    n: ScalarFn,
    p_t: f64,
    nu: f64,
) -> Result<ProblemSpec> {
    let horizon = grid.end();
    ProblemSpec::new(
        horizon,
        alpha,
        nu,
        scalar_path(&grid, a),
        scalar_path(&grid, g),
        scalar_path(&grid, m),
        scalar_path(&grid, n),
        Mat::from_element(1, 1, p_t),
    )
}

/// `A = −1, G = 1, M = 0, N = 1, P_T = 1`: the Riccati equation reduces to
/// `P' = 2P + P²` with a closed-form solution.
pub fn logistic_problem(grid: Arc<TimeGrid>, alpha: f64) -> Result<ProblemSpec> {
    scalar_problem(grid, alpha, (-1.0).into(), 1.0.into(), 0.0.into(), 1.0.into(), 1.0, 1.0)
}

/// Closed form of the logistic problem on `[0, 1]`: `P(t) = 2q/(1−q)`, `q = e^{2(t−1)}/3`.
pub fn logistic_closed_form(t: f64) -> f64 {
    let q = (2.0 * (t - 1.0)).exp() / 3.0;
    2.0 * q / (1.0 - q)
}

/// Diagonal problem with constant control matrix `G`.
#[allow(clippy::too_many_arguments)]
pub fn diagonal_problem(
    grid: Arc<TimeGrid>,
    alpha: f64,
    a: Vec<ScalarFn>,
    g: Mat,
    m: Vec<ScalarFn>,
    n: Vec<ScalarFn>,
    p_t: Vec<f64>,
    nu: f64,
) -> Result<ProblemSpec> {
    let d = a.len();
    if m.len() != d || p_t.len() != d || g.nrows() != d {
        return Err(Error::dim(
            "diagonal problem entries",
            d,
            format!("{}/{}/{}", m.len(), p_t.len(), g.nrows()),
        ));
    }
    if n.len() != g.ncols() {
        return Err(Error::dim("diagonal N entries", g.ncols(), n.len()));
    }
    let diag_path = |fs: Vec<ScalarFn>| {
        OperatorPath::from_fn(grid.clone(), move |t| {
            Mat::from_diagonal(&Vector::from_iterator(fs.len(), fs.iter().map(|f| f.eval(t))))
        })
    };
    let horizon = grid.end();
    ProblemSpec::new(
        horizon,
        alpha,
        nu,
        diag_path(a),
        OperatorPath::constant(grid.clone(), g),
        diag_path(m),
        diag_path(n),
        Mat::from_diagonal(&Vector::from_vec(p_t)),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actuation {
    Left,
    Right,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FinalCost {
    Zero,
    /// `scale·h·I`, a discrete L² norm of the final state.
    Identity {
        scale: f64,
    },
    /// `scale·v vᵀ` with `v` the unit eigenvector of the highest Laplacian mode.
    TopMode {
        scale: f64,
    },
    /// `scale·v vᵀ` for Laplacian mode `mode` (1-based, lowest first).
    Mode {
        mode: usize,
        scale: f64,
    },
}

/// 1-D heat equation on `(0, 1)` with Dirichlet boundary control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatConfig {
    /// Interior grid points; mesh width is `1/(n+1)`.
    pub n: usize,
    pub diffusion: ScalarFn,
    pub actuation: Actuation,
    /// `M = state_weight·h·I`.
    pub state_weight: f64,
    /// `N = control_weight·I`.
    pub control_weight: f64,
    pub final_cost: FinalCost,
    pub horizon: f64,
    pub alpha: f64,
    pub node_count: usize,
    pub grading_exponent: Option<f64>,
}

impl HeatConfig {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            diffusion: ScalarFn::Const(1.0),
            actuation: Actuation::Left,
            state_weight: 1.0,
            control_weight: 1.0,
            final_cost: FinalCost::Identity { scale: 1.0 },
            horizon: 1.0,
            alpha: 0.25,
            node_count: 257,
            grading_exponent: None,
        }
    }

    pub fn mesh_width(&self) -> f64 {
        1.0 / (self.n as f64 + 1.0)
    }
}

/// Second-difference Dirichlet Laplacian scaled by `1/h²`.
pub fn dirichlet_laplacian(n: usize) -> Mat {
    let h = 1.0 / (n as f64 + 1.0);
    let s = 1.0 / (h * h);
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        l[(i, i)] = -2.0 * s;
        if i + 1 < n {
            l[(i, i + 1)] = s;
            l[(i + 1, i)] = s;
        }
    }
    l
}

/// Unit eigenvector of the Dirichlet Laplacian for mode `k` (1-based).
pub fn laplacian_mode(n: usize, k: usize) -> Vector {
    let v = Vector::from_iterator(
        n,
        (1..=n).map(|i| (std::f64::consts::PI * (k * i) as f64 / (n as f64 + 1.0)).sin()),
    );
    v.normalize()
}

/// Grading used when a config leaves it open: `2/α`, capped so that the
/// smallest step stays above `1e-10` of the interval.
pub fn default_grading(alpha: f64, node_count: usize) -> f64 {
    let cap = if node_count > 2 {
        10.0 * std::f64::consts::LN_10 / ((node_count - 1) as f64).ln()
    } else {
        1.0
    };
    (2.0 / alpha).min(cap).max(1.0)
}

pub fn build_heat_problem(config: &HeatConfig) -> Result<ProblemSpec> {
    let n = config.n;
    if n == 0 {
        return Err(Error::domain("heat problem needs at least one interior node"));
    }
    let grading = config
        .grading_exponent
        .unwrap_or_else(|| default_grading(config.alpha, config.node_count));
    let grid = Arc::new(TimeGrid::new(0.0, config.horizon, config.node_count, grading)?);
    // parabolicity: sample the coefficient on the grid and a fine uniform net
    let fine = (0..=4096).map(|k| config.horizon * k as f64 / 4096.0);
    let a_min = grid
        .nodes()
        .iter()
        .copied()
        .chain(fine)
        .map(|t| config.diffusion.eval(t))
        .fold(f64::INFINITY, f64::min);
    if !(a_min > 0.0) {
        return Err(Error::domain(format!(
            "diffusion coefficient reaches {a_min} <= 0: the problem is not parabolic"
        )));
    }
    let h = config.mesh_width();
    let lap = dirichlet_laplacian(n);
    let lap_inv = lap
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::domain("singular Laplacian"))?;
    let ends: Vec<usize> = match config.actuation {
        Actuation::Left => vec![0],
        Actuation::Right => vec![n - 1],
        Actuation::Both => vec![0, n - 1],
    };
    let c = ends.len();
    // G solves A g = −a/h²·e_end, i.e. g = −L⁻¹ e_end / h², independent of a(t)
    let mut stencil = Mat::zeros(n, c);
    for (col, &i) in ends.iter().enumerate() {
        stencil[(i, col)] += -1.0 / (h * h);
    }
    let g = &lap_inv * stencil;
    let diffusion = config.diffusion.clone();
    let lap_a = lap.clone();
    let a = OperatorPath::from_fn(grid.clone(), move |t| &lap_a * diffusion.eval(t));
    let m = OperatorPath::constant(grid.clone(), Mat::identity(n, n) * (config.state_weight * h));
    let nmat = OperatorPath::constant(grid.clone(), Mat::identity(c, c) * config.control_weight);
    let p_t = match &config.final_cost {
        FinalCost::Zero => Mat::zeros(n, n),
        FinalCost::Identity { scale } => Mat::identity(n, n) * (scale * h),
        FinalCost::TopMode { scale } => {
            let v = laplacian_mode(n, n);
            &v * v.transpose() * *scale
        }
        FinalCost::Mode { mode, scale } => {
            if *mode == 0 || *mode > n {
                return Err(Error::domain(format!("mode {mode} outside 1..={n}")));
            }
            let v = laplacian_mode(n, *mode);
            &v * v.transpose() * *scale
        }
    };
    ProblemSpec::new(
        config.horizon,
        config.alpha,
        config.control_weight,
        a,
        OperatorPath::constant(grid, g),
        m,
        nmat,
        p_t,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub hypothesis: String,
    pub passed: bool,
    pub witness: f64,
    pub note: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub checks: Vec<HypothesisCheck>,
}

impl HypothesisReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, hypothesis: &str) -> Option<&HypothesisCheck> {
        self.checks.iter().find(|c| c.hypothesis == hypothesis)
    }
}

fn max_real_spectrum(a: &Mat) -> f64 {
    if linalg::is_symmetric(a, 1e-12) {
        linalg::max_eigenvalue(a)
    } else {
        a.complex_eigenvalues()
            .iter()
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Checks the finite-dimensional analogues of the standing assumptions.
///
/// Non-symmetric weights are a hard error naming the node; everything else
/// becomes a verdict with its witness value. When an evolution table is
/// supplied, the norm of `P_T^{1/2} L_{0T}` is added as a diagnostic.
pub fn validate_hypotheses(spec: &ProblemSpec, table: Option<&EvolutionTable>) -> Result<HypothesisReport> {
    let grid = spec.grid();
    for j in 0..grid.len() {
        for (name, m) in [("M(t)", spec.m.at_node(j)), ("N(t)", spec.n.at_node(j))] {
            if !linalg::is_symmetric(m, SYMMETRY_TOL) {
                return Err(Error::Validation {
                    what: name.into(),
                    node: j,
                    detail: format!("asymmetry {:.3e}", linalg::asymmetry(m)),
                });
            }
        }
    }
    if !linalg::is_symmetric(&spec.p_t, SYMMETRY_TOL) {
        return Err(Error::Validation {
            what: "P_T".into(),
            node: grid.last_index(),
            detail: format!("asymmetry {:.3e}", linalg::asymmetry(&spec.p_t)),
        });
    }

    let mut checks = Vec::new();

    let max_re = spec
        .a
        .values()
        .iter()
        .map(max_real_spectrum)
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(HypothesisCheck {
        hypothesis: "stability".into(),
        passed: max_re < 0.0,
        witness: max_re,
        note: "max real part of the spectrum of A(t) over grid nodes".into(),
    });

    let sym = spec.a_is_symmetric();
    let (g_witness, g_note) = if sym {
        let mut w = 0.0_f64;
        for j in 0..grid.len() {
            let fp = frac_power(spec.a.at_node(j), spec.alpha)?;
            w = w.max(linalg::spectral_norm(&(fp * spec.g.at_node(j))));
        }
        (w, "sup over nodes of ||(-A(t))^alpha G(t)||")
    } else {
        let w = spec.g.values().iter().map(linalg::spectral_norm).fold(0.0, f64::max);
        (w, "sup over nodes of ||G(t)|| (A not symmetric, no fractional power)")
    };
    checks.push(HypothesisCheck {
        hypothesis: "actuation".into(),
        passed: g_witness.is_finite() && spec.alpha > 0.0 && spec.alpha < 0.5,
        witness: g_witness,
        note: format!("{g_note}; alpha = {}", spec.alpha),
    });

    let m_min = spec
        .m
        .values()
        .iter()
        .map(linalg::min_eigenvalue)
        .fold(f64::INFINITY, f64::min);
    let n_min = spec
        .n
        .values()
        .iter()
        .map(linalg::min_eigenvalue)
        .fold(f64::INFINITY, f64::min);
    checks.push(HypothesisCheck {
        hypothesis: "coercivity".into(),
        passed: m_min >= PSD_FLOOR && n_min >= spec.nu && spec.nu > 0.0,
        witness: n_min,
        note: format!(
            "min eigenvalue of N(t) (nu = {}); min eigenvalue of M(t) = {m_min:.6e}",
            spec.nu
        ),
    });

    let pt_min = linalg::min_eigenvalue(&spec.p_t);
    let mut note =
        String::from("closedness of P_T^{1/2} L_0T is automatic in finite dimensions (all operators bounded)");
    let mut witness = pt_min;
    if let Some(table) = table {
        let norm = endpoint_map_norm(spec, table)?;
        note.push_str(&format!("; ||P_T^(1/2) L_0T|| = {norm:.6e}"));
        witness = norm;
    }
    checks.push(HypothesisCheck {
        hypothesis: "final_cost".into(),
        passed: pt_min >= PSD_FLOOR,
        witness,
        note,
    });

    checks.push(HypothesisCheck {
        hypothesis: "alpha".into(),
        passed: spec.alpha > 0.0 && spec.alpha < 0.5,
        witness: spec.alpha,
        note: "singularity exponent must lie in (0, 1/2)".into(),
    });

    Ok(HypothesisReport { checks })
}

/// `‖P_T^{1/2} L_{0T}‖` from the controllability Gramian `∫ U(T,r)AG (AG)* U(T,r)* dr`.
pub fn endpoint_map_norm(spec: &ProblemSpec, table: &EvolutionTable) -> Result<f64> {
    let grid = spec.grid();
    let last = grid.last_index();
    let w = quadrature::grid_weights(grid, 0, last);
    let mut gram = Mat::zeros(spec.state_dim, spec.state_dim);
    for (j, wj) in w.iter().enumerate() {
        let ag = spec.a.at_node(j) * spec.g.at_node(j);
        let x = table.u(last, j) * ag;
        gram += &x * x.transpose() * *wj;
    }
    let root = spec.p_t_sqrt();
    let s = linalg::symmetrize(&(&root * gram * &root));
    Ok(linalg::max_eigenvalue(&s).max(0.0).sqrt())
}
