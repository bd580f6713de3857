//! Composite piecewise-quadratic quadrature on (possibly graded) node sets.
//!
//! Cells are grouped in pairs and integrated with the quadratic through the
//! three nodes of the pair. With an odd number of cells the last cell uses
//! the quadratic through the last three nodes, so the rule stays third
//! order on every sub-range of the grid.

use crate::grid::TimeGrid;

/// Weights of the quadratic interpolant through `x` integrated over `[a, b]`.
fn quadratic_weights(x: [f64; 3], a: f64, b: f64) -> [f64; 3] {
    let basis = |i: usize, t: f64| -> f64 {
        let mut v = 1.0;
        for j in 0..3 {
            if j != i {
                v *= (t - x[j]) / (x[i] - x[j]);
            }
        }
        v
    };
    let mid = 0.5 * (a + b);
    let h = b - a;
    let mut w = [0.0; 3];
    for (i, wi) in w.iter_mut().enumerate() {
        *wi = h / 6.0 * (basis(i, a) + 4.0 * basis(i, mid) + basis(i, b));
    }
    w
}

/// Quadrature weights for `∫_{x_0}^{x_last} f` sampled at `x`.
pub fn weights(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut w = vec![0.0; n];
    match n {
        0 | 1 => return w,
        2 => {
            let h = x[1] - x[0];
            w[0] = 0.5 * h;
            w[1] = 0.5 * h;
            return w;
        }
        _ => {}
    }
    let cells = n - 1;
    let paired = if cells.is_multiple_of(2) { cells } else { cells - 1 };
    let mut k = 0;
    while k < paired {
        let q = quadratic_weights([x[k], x[k + 1], x[k + 2]], x[k], x[k + 2]);
        w[k] += q[0];
        w[k + 1] += q[1];
        w[k + 2] += q[2];
        k += 2;
    }
    if paired < cells {
        let q = quadratic_weights([x[n - 3], x[n - 2], x[n - 1]], x[n - 2], x[n - 1]);
        w[n - 3] += q[0];
        w[n - 2] += q[1];
        w[n - 1] += q[2];
    }
    w
}

/// Alternative rule: every cell integrates the cubic through the four nearest
/// nodes. Used to cross-check results obtained with [`weights`].
pub fn cubic_weights(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 4 {
        return weights(x);
    }
    let mut w = vec![0.0; n];
    // two-point Gauss-Legendre per cell is exact for cubics
    let g = 0.5 / 3f64.sqrt();
    for k in 0..n - 1 {
        let first = k.saturating_sub(1).min(n - 4);
        let nodes = &x[first..first + 4];
        let (a, b) = (x[k], x[k + 1]);
        let h = b - a;
        for tq in [0.5 * (a + b) - g * h, 0.5 * (a + b) + g * h] {
            for i in 0..4 {
                let mut l = 1.0;
                for j in 0..4 {
                    if j != i {
                        l *= (tq - nodes[j]) / (nodes[i] - nodes[j]);
                    }
                }
                w[first + i] += 0.5 * h * l;
            }
        }
    }
    w
}

/// Weights for `∫_{t_a}^{t_b}` over grid nodes `a..=b`.
pub fn grid_weights(grid: &TimeGrid, a: usize, b: usize) -> Vec<f64> {
    weights(&grid.nodes()[a..=b])
}

/// `Σ w_k f_k` for scalar samples on nodes `a..=b`.
pub fn integrate(grid: &TimeGrid, a: usize, b: usize, samples: &[f64]) -> f64 {
    debug_assert_eq!(samples.len(), b - a + 1);
    grid_weights(grid, a, b).iter().zip(samples).map(|(w, f)| w * f).sum()
}

/// `Σ w_k f(k)` over nodes `a..=b`.
pub fn integrate_by(grid: &TimeGrid, a: usize, b: usize, f: impl Fn(usize) -> f64) -> f64 {
    grid_weights(grid, a, b)
        .iter()
        .enumerate()
        .map(|(k, w)| w * f(a + k))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_for_quadratics_on_any_count() {
        for n in 2..12 {
            let g = TimeGrid::new(0.0, 2.0, n, 1.7).unwrap();
            let f: Vec<f64> = g.nodes().iter().map(|t| 1.0 + 3.0 * t - t * t).collect();
            let exact = 2.0 + 6.0 - 8.0 / 3.0;
            let got = integrate(&g, 0, n - 1, &f);
            if n == 2 {
                continue; // trapezoid on one cell
            }
            assert!((got - exact).abs() < 1e-13, "n={n}: {got} vs {exact}");
        }
    }

    #[test]
    fn third_order_on_graded_grids() {
        let exact = 1.0 - (-3.0f64).exp();
        let err = |n: usize| {
            let g = TimeGrid::new(0.0, 1.0, n, 2.0).unwrap();
            let f: Vec<f64> = g.nodes().iter().map(|t| 3.0 * (-3.0 * t).exp()).collect();
            (integrate(&g, 0, n - 1, &f) - exact).abs()
        };
        // odd cell count exercises the end correction
        let (e1, e2) = (err(34), err(67));
        assert!((e1 / e2).log2() > 2.5, "order {}", (e1 / e2).log2());
    }

    #[test]
    fn cubic_rule_is_exact_for_cubics() {
        let g = TimeGrid::new(0.0, 1.0, 11, 2.5).unwrap();
        let w = cubic_weights(g.nodes());
        let got: f64 = w.iter().zip(g.nodes()).map(|(w, t)| w * (t * t * t - 2.0 * t)).sum();
        assert!((got - (0.25 - 1.0)).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn weights_sum_to_length(n in 2usize..60, g in 1.0f64..4.0, a in 0usize..10) {
            let grid = TimeGrid::new(0.0, 1.0, n + a, g).unwrap();
            let w = grid_weights(&grid, a, n + a - 1);
            let s: f64 = w.iter().sum();
            prop_assert!((s - (grid.node(n + a - 1) - grid.node(a))).abs() < 1e-13);
        }
    }
}
