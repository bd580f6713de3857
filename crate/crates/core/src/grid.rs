use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time grid on `[start, end]` whose spacing shrinks toward `end`.
///
/// Node `j` sits at `end − (end − start)·(1 − j/(N−1))^g`; with `g = 1`
/// the grid is uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridParams")]
pub struct TimeGrid {
    start: f64,
    end: f64,
    node_count: usize,
    grading_exponent: f64,
    #[serde(skip)]
    nodes: Vec<f64>,
}

#[derive(Deserialize)]
struct GridParams {
    start: f64,
    end: f64,
    node_count: usize,
    grading_exponent: f64,
}

impl TryFrom<GridParams> for TimeGrid {
    type Error = Error;

    fn try_from(p: GridParams) -> Result<Self> {
        Self::new(p.start, p.end, p.node_count, p.grading_exponent)
    }
}

impl TimeGrid {
    pub fn new(start: f64, end: f64, node_count: usize, grading_exponent: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || end <= start {
            return Err(Error::domain(format!("grid interval [{start}, {end}] is empty")));
        }
        if node_count < 2 {
            return Err(Error::domain(format!("grid needs at least 2 nodes, got {node_count}")));
        }
        if !(grading_exponent >= 1.0) || !grading_exponent.is_finite() {
            return Err(Error::domain(format!(
                "grading exponent must be >= 1, got {grading_exponent}"
            )));
        }
        let len = end - start;
        let last = (node_count - 1) as f64;
        let mut nodes: Vec<f64> = (0..node_count)
            .map(|j| end - len * (1.0 - j as f64 / last).powf(grading_exponent))
            .collect();
        nodes[0] = start;
        nodes[node_count - 1] = end;
        if nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain(
                "grading too strong for double precision: nodes collapse near the end",
            ));
        }
        Ok(Self {
            start,
            end,
            node_count,
            grading_exponent,
            nodes,
        })
    }

    pub fn uniform(start: f64, end: f64, node_count: usize) -> Result<Self> {
        Self::new(start, end, node_count, 1.0)
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn len(&self) -> usize {
        self.node_count
    }

    pub fn is_empty(&self) -> bool {
        self.node_count == 0
    }

    pub fn grading_exponent(&self) -> f64 {
        self.grading_exponent
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, j: usize) -> f64 {
        self.nodes[j]
    }

    pub fn last_index(&self) -> usize {
        self.node_count - 1
    }

    pub fn max_step(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    pub fn min_step(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }

    /// Index of the node nearest to `t` (ties go to the later node).
    pub fn nearest(&self, t: f64) -> usize {
        let idx = self.nodes.partition_point(|&x| x < t);
        if idx == 0 {
            return 0;
        }
        if idx >= self.node_count {
            return self.node_count - 1;
        }
        if (self.nodes[idx] - t) <= (t - self.nodes[idx - 1]) {
            idx
        } else {
            idx - 1
        }
    }

    /// Exact node index of `t`, if `t` is bitwise a node.
    pub fn exact_index(&self, t: f64) -> Option<usize> {
        let idx = self.nodes.partition_point(|&x| x < t);
        (idx < self.node_count && self.nodes[idx] == t).then_some(idx)
    }

    /// Cell `[t_k, t_{k+1}]` containing `t`, clamped to the grid.
    pub fn cell(&self, t: f64) -> usize {
        let idx = self.nodes.partition_point(|&x| x <= t);
        idx.saturating_sub(1).min(self.node_count - 2)
    }

    /// Node index of `end − eps`, snapped to the nearest node.
    pub fn index_before_end(&self, eps: f64) -> usize {
        self.nearest(self.end - eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_are_exact() {
        let g = TimeGrid::new(0.25, 1.5, 17, 4.0).unwrap();
        assert_eq!(g.node(0), 0.25);
        assert_eq!(g.node(16), 1.5);
    }

    #[test]
    fn grading_clusters_toward_end() {
        let g = TimeGrid::new(0.0, 1.0, 33, 3.0).unwrap();
        let first = g.node(1) - g.node(0);
        let last = g.node(32) - g.node(31);
        assert!(last < first / 100.0);
        assert!((last - (1.0 / 32.0f64).powi(3)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(TimeGrid::new(1.0, 1.0, 5, 1.0).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 1, 1.0).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 5, 0.5).is_err());
    }

    #[test]
    fn serde_round_trip_rebuilds_nodes() {
        let g = TimeGrid::new(0.0, 2.0, 9, 2.0).unwrap();
        let back: TimeGrid = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
        assert!(
            serde_json::from_str::<TimeGrid>(r#"{"start":0,"end":1,"node_count":1,"grading_exponent":1}"#).is_err()
        );
    }

    #[test]
    fn nearest_and_cell() {
        let g = TimeGrid::uniform(0.0, 1.0, 5).unwrap();
        assert_eq!(g.nearest(0.26), 1);
        assert_eq!(g.nearest(0.99), 4);
        assert_eq!(g.cell(0.3), 1);
        assert_eq!(g.cell(1.0), 3);
        assert_eq!(g.exact_index(0.5), Some(2));
        assert_eq!(g.exact_index(0.51), None);
    }

    proptest! {
        #[test]
        fn nodes_strictly_increasing(n in 2usize..400, g in 1.0f64..3.5, a in -2.0f64..2.0, len in 0.1f64..5.0) {
            let grid = TimeGrid::new(a, a + len, n, g).unwrap();
            prop_assert!(grid.nodes().windows(2).all(|w| w[1] > w[0]));
            prop_assert_eq!(grid.node(0), a);
            prop_assert_eq!(grid.node(n - 1), a + len);
        }
    }
}
