//! Time-indexed carriers: matrix families and control/state trajectories.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::evolution::fmt_f64;
use crate::grid::TimeGrid;
use crate::linalg::{Mat, Vector};

pub type MatrixFn = dyn Fn(f64) -> Mat + Send + Sync;

/// A matrix family sampled on a grid.
///
/// Node evaluations return the stored matrix. Between nodes the path uses
/// its generator when it has one (reference problems with closed-form
/// coefficients), otherwise Lagrange interpolation of `interpolation_order`.
#[derive(Clone)]
pub struct OperatorPath {
    grid: Arc<TimeGrid>,
    values: Vec<Mat>,
    interpolation_order: usize,
    generator: Option<Arc<MatrixFn>>,
}

impl fmt::Debug for OperatorPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OperatorPath")
            .field("nodes", &self.values.len())
            .field("shape", &self.shape())
            .field("interpolation_order", &self.interpolation_order)
            .field("generator", &self.generator.is_some())
            .finish()
    }
}

impl OperatorPath {
    pub fn from_values(grid: Arc<TimeGrid>, values: Vec<Mat>, interpolation_order: usize) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::dim("operator path nodes", grid.len(), values.len()));
        }
        let shape = values[0].shape();
        if let Some((j, m)) = values.iter().enumerate().find(|(_, m)| m.shape() != shape) {
            return Err(Error::dim(
                format!("operator path value at node {j}"),
                format!("{shape:?}"),
                format!("{:?}", m.shape()),
            ));
        }
        if interpolation_order == 0 {
            return Err(Error::domain("interpolation order must be at least 1"));
        }
        Ok(Self {
            grid,
            values,
            interpolation_order,
            generator: None,
        })
    }

    /// Samples `f` at every node and keeps `f` for off-node evaluation.
    pub fn from_fn(grid: Arc<TimeGrid>, f: impl Fn(f64) -> Mat + Send + Sync + 'static) -> Self {
        let values: Vec<Mat> = grid.nodes().iter().map(|&t| f(t)).collect();
        Self {
            grid,
            values,
            interpolation_order: 3,
            generator: Some(Arc::new(f)),
        }
    }

    pub fn constant(grid: Arc<TimeGrid>, m: Mat) -> Self {
        let c = m.clone();
        Self::from_fn(grid, move |_| c.clone())
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn at_node(&self, j: usize) -> &Mat {
        &self.values[j]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values[0].shape()
    }

    pub fn interpolation_order(&self) -> usize {
        self.interpolation_order
    }

    pub fn has_generator(&self) -> bool {
        self.generator.is_some()
    }

    pub fn map(&self, f: impl Fn(&Mat) -> Mat) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(f).collect(),
            interpolation_order: self.interpolation_order,
            generator: None,
        }
    }

    pub fn eval(&self, t: f64) -> Mat {
        if let Some(j) = self.grid.exact_index(t) {
            return self.values[j].clone();
        }
        if let Some(g) = &self.generator {
            return g(t);
        }
        self.interpolate(t)
    }

    fn interpolate(&self, t: f64) -> Mat {
        let n = self.grid.len();
        let k = self.interpolation_order.min(n - 1);
        let cell = self.grid.cell(t);
        // k+1 consecutive nodes around the cell
        let half = k / 2;
        let first = cell.saturating_sub(half).min(n - 1 - k);
        let nodes = self.grid.nodes();
        let mut out = Mat::zeros(self.values[0].nrows(), self.values[0].ncols());
        for a in first..=first + k {
            let mut w = 1.0;
            for b in first..=first + k {
                if a != b {
                    w *= (t - nodes[b]) / (nodes[a] - nodes[b]);
                }
            }
            out += &self.values[a] * w;
        }
        out
    }
}

/// Which node values a trajectory carries at the final time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Endpoint {
    /// The last value is an ordinary sample of the path.
    Regular,
    /// The last value is the endpoint map applied separately (e.g. `L_sT u`).
    Flagged,
}

/// Vector-valued samples on the nodes `start..grid.len()` of a grid.
#[derive(Debug, Clone)]
pub struct NodePath {
    grid: Arc<TimeGrid>,
    start: usize,
    values: Vec<Vector>,
}

impl NodePath {
    pub fn new(grid: Arc<TimeGrid>, start: usize, values: Vec<Vector>) -> Result<Self> {
        if start >= grid.len() {
            return Err(Error::domain(format!("start node {start} outside grid")));
        }
        let expected = grid.len() - start;
        if values.len() != expected {
            return Err(Error::dim("path samples", expected, values.len()));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::Structure("path samples differ in dimension".into()));
        }
        Ok(Self { grid, start, values })
    }

    pub fn zeros(grid: Arc<TimeGrid>, start: usize, dim: usize) -> Self {
        let count = grid.len() - start;
        Self {
            grid,
            start,
            values: vec![Vector::zeros(dim); count],
        }
    }

    pub fn from_fn(grid: Arc<TimeGrid>, start: usize, f: impl Fn(f64) -> Vector) -> Self {
        let values = grid.nodes()[start..].iter().map(|&t| f(t)).collect();
        Self { grid, start, values }
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    /// First node index covered.
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn start_time(&self) -> f64 {
        self.grid.node(self.start)
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn values(&self) -> &[Vector] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Vector] {
        &mut self.values
    }

    /// Sample at global node index `j`.
    pub fn at(&self, j: usize) -> &Vector {
        &self.values[j - self.start]
    }

    pub fn times(&self) -> &[f64] {
        &self.grid.nodes()[self.start..]
    }

    /// Restriction to nodes `from..`.
    pub fn restrict(&self, from: usize) -> Result<Self> {
        if from < self.start || from >= self.grid.len() {
            return Err(Error::domain(format!(
                "restriction node {from} outside [{}, {})",
                self.start,
                self.grid.len()
            )));
        }
        Ok(Self {
            grid: self.grid.clone(),
            start: from,
            values: self.values[from - self.start..].to_vec(),
        })
    }

    /// CSV with columns `t, {name}_0, {name}_1, ...`.
    pub fn write_csv(&self, path: &std::path::Path, name: &str) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Csv {
            path: path.display().to_string(),
            detail: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((0..self.dim()).map(|i| format!("{name}_{i}")))
            .collect();
        w.write_record(&header).map_err(csv_err)?;
        for (t, v) in self.times().iter().zip(&self.values) {
            let rec: Vec<String> = std::iter::once(*t).chain(v.iter().copied()).map(fmt_f64).collect();
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn sup_distance(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            grid: self.grid.clone(),
            start: self.start,
            values: self
                .values
                .iter()
                .zip(other.values.iter())
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            start: self.start,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }
}

/// Control trajectory `u ∈ L²(s, T; U)` sampled on nodes.
#[derive(Debug, Clone)]
pub struct ControlPath(pub NodePath);

/// State trajectory on `[s, T]`; the final sample may be the separately
/// computed endpoint value rather than a limit of the interior samples.
#[derive(Debug, Clone)]
pub struct StatePath {
    pub path: NodePath,
    pub endpoint: Endpoint,
}

impl std::ops::Deref for ControlPath {
    type Target = NodePath;
    fn deref(&self) -> &NodePath {
        &self.0
    }
}

impl std::ops::Deref for StatePath {
    type Target = NodePath;
    fn deref(&self) -> &NodePath {
        &self.path
    }
}

impl StatePath {
    pub fn regular(path: NodePath) -> Self {
        Self {
            path,
            endpoint: Endpoint::Regular,
        }
    }

    pub fn terminal(&self) -> &Vector {
        self.path.values.last().expect("paths are never empty")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Arc<TimeGrid> {
        Arc::new(TimeGrid::new(0.0, 1.0, 9, 2.0).unwrap())
    }

    #[test]
    fn node_evaluation_is_bitwise() {
        let g = grid();
        let vals: Vec<Mat> = g
            .nodes()
            .iter()
            .map(|&t| Mat::from_element(2, 2, t.sin() / 3.0))
            .collect();
        let p = OperatorPath::from_values(g.clone(), vals.clone(), 3).unwrap();
        for (j, &t) in g.nodes().iter().enumerate() {
            assert_eq!(p.eval(t), vals[j]);
        }
    }

    #[test]
    fn cubic_interpolation_reproduces_cubics() {
        let g = grid();
        let f = |t: f64| Mat::from_element(1, 1, 1.0 - 2.0 * t + 0.5 * t * t * t);
        let vals: Vec<Mat> = g.nodes().iter().map(|&t| f(t)).collect();
        let p = OperatorPath::from_values(g, vals, 3).unwrap();
        for t in [0.03, 0.41, 0.77, 0.999] {
            assert!((p.eval(t)[(0, 0)] - f(t)[(0, 0)]).abs() < 1e-13);
        }
    }

    #[test]
    fn rejects_wrong_lengths_and_shapes() {
        let g = grid();
        assert!(OperatorPath::from_values(g.clone(), vec![Mat::zeros(1, 1); 3], 1).is_err());
        let mut vals = vec![Mat::zeros(2, 2); 9];
        vals[4] = Mat::zeros(2, 3);
        assert!(OperatorPath::from_values(g.clone(), vals, 1).is_err());
        assert!(NodePath::new(g, 3, vec![Vector::zeros(1); 2]).is_err());
    }

    #[test]
    fn restriction_keeps_samples() {
        let g = grid();
        let p = NodePath::from_fn(g, 2, |t| Vector::from_element(1, t));
        let r = p.restrict(5).unwrap();
        assert_eq!(r.at(6), p.at(6));
        assert!(p.restrict(1).is_err());
    }
}
