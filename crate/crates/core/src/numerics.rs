//! Small numerical kernels shared by the solvers.

use serde::{Deserialize, Serialize};

/// Solve a tridiagonal system with the Thomas algorithm.
///
/// `lower[0]` and `upper[n-1]` are ignored. The system must be diagonally
/// dominant (or otherwise safe for elimination without pivoting).
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    assert!(lower.len() == n && upper.len() == n && rhs.len() == n);
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c[i - 1];
        c[i] = if i + 1 < n { upper[i] / m } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / m;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    x
}

/// Finite-difference weights for derivatives `0..=max_order` at `z` on the
/// stencil `nodes` (Fornberg's recursion). Returns `w[order][node]`.
pub fn fd_weights(z: f64, nodes: &[f64], max_order: usize) -> Vec<Vec<f64>> {
    let n = nodes.len();
    let mut c = vec![vec![0.0; n]; max_order + 1];
    let mut c1 = 1.0;
    let mut c4 = nodes[0] - z;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(max_order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i] - z;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// Precomputed fourth-order stencils on a uniform axis with unit spacing.
///
/// Central five-point stencils in the interior; off-centred stencils (five
/// points for the first derivative, six for the second) at the two outermost
/// nodes on each side.
#[derive(Debug, Clone)]
pub struct UniformStencils {
    /// `(offset of first node, weights)` for the first derivative, per position class.
    d1: [(isize, Vec<f64>); 5],
    d2: [(isize, Vec<f64>); 5],
}

impl UniformStencils {
    pub fn new() -> Self {
        let make = |start: isize, len: usize, at: f64, order: usize| -> (isize, Vec<f64>) {
            let nodes: Vec<f64> = (0..len).map(|k| (start + k as isize) as f64).collect();
            (start, fd_weights(at, &nodes, order)[order].clone())
        };
        // Position classes: 0 = first node, 1 = second node, 2 = interior,
        // 3 = second-to-last node, 4 = last node. Offsets are relative to the node.
        UniformStencils {
            d1: [
                make(0, 5, 0.0, 1),
                make(-1, 5, 0.0, 1),
                make(-2, 5, 0.0, 1),
                make(-3, 5, 0.0, 1),
                make(-4, 5, 0.0, 1),
            ],
            d2: [
                make(0, 6, 0.0, 2),
                make(-1, 6, 0.0, 2),
                make(-2, 5, 0.0, 2),
                make(-4, 6, 0.0, 2),
                make(-5, 6, 0.0, 2),
            ],
        }
    }

    fn class(i: usize, n: usize) -> usize {
        if i == 0 {
            0
        } else if i == 1 {
            1
        } else if i + 2 == n {
            3
        } else if i + 1 == n {
            4
        } else {
            2
        }
    }

    fn apply(stencil: &(isize, Vec<f64>), values: &[f64], i: usize) -> f64 {
        let (start, w) = stencil;
        w.iter()
            .enumerate()
            .map(|(k, wk)| wk * values[(i as isize + start + k as isize) as usize])
            .sum()
    }

    /// `(offset, weights)` of the unit-spacing first-derivative stencil at
    /// index `i` of an axis with `n` nodes.
    pub fn d1_stencil(&self, i: usize, n: usize) -> (isize, &[f64]) {
        let (start, w) = &self.d1[Self::class(i, n)];
        (*start, w)
    }

    /// As [`Self::d1_stencil`] for the second derivative.
    pub fn d2_stencil(&self, i: usize, n: usize) -> (isize, &[f64]) {
        let (start, w) = &self.d2[Self::class(i, n)];
        (*start, w)
    }

    /// First derivative of `values` at index `i` for spacing `h`.
    pub fn d1(&self, values: &[f64], i: usize, h: f64) -> f64 {
        Self::apply(&self.d1[Self::class(i, values.len())], values, i) / h
    }

    /// Second derivative of `values` at index `i` for spacing `h`.
    pub fn d2(&self, values: &[f64], i: usize, h: f64) -> f64 {
        Self::apply(&self.d2[Self::class(i, values.len())], values, i) / (h * h)
    }

    /// Interior-only central first derivative (requires `2 <= i < n-2`).
    pub fn central_d1(values: &[f64], i: usize, h: f64) -> f64 {
        (values[i - 2] - 8.0 * values[i - 1] + 8.0 * values[i + 1] - values[i + 2]) / (12.0 * h)
    }

    /// Interior-only central second derivative (requires `2 <= i < n-2`).
    pub fn central_d2(values: &[f64], i: usize, h: f64) -> f64 {
        (-values[i - 2] + 16.0 * values[i - 1] - 30.0 * values[i] + 16.0 * values[i + 1]
            - values[i + 2])
            / (12.0 * h * h)
    }
}

impl Default for UniformStencils {
    fn default() -> Self {
        Self::new()
    }
}

/// Cubic Hermite interpolation on `[0, h]` at local offset `s = x - x0`.
#[inline]
pub fn hermite(y0: f64, d0: f64, y1: f64, d1: f64, h: f64, s: f64) -> f64 {
    let u = s / h;
    let u2 = u * u;
    let u3 = u2 * u;
    let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
    let h10 = u3 - 2.0 * u2 + u;
    let h01 = -2.0 * u3 + 3.0 * u2;
    let h11 = u3 - u2;
    h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1
}

/// Derivative in `s` of [`hermite`].
#[inline]
pub fn hermite_deriv(y0: f64, d0: f64, y1: f64, d1: f64, h: f64, s: f64) -> f64 {
    let u = s / h;
    let u2 = u * u;
    let g00 = 6.0 * u2 - 6.0 * u;
    let g10 = 3.0 * u2 - 4.0 * u + 1.0;
    let g11 = 3.0 * u2 - 2.0 * u;
    (g00 * (y0 - y1)) / h + g10 * d0 + g11 * d1
}

/// Locate `x` on a uniform axis starting at `x0` with spacing `h` and `n`
/// nodes. Returns the cell index `k` (so `x ∈ [x_k, x_{k+1}]`) and the local
/// offset `x - x_k`.
#[inline]
pub fn locate_uniform(x: f64, x0: f64, h: f64, n: usize) -> (usize, f64) {
    let pos = (x - x0) / h;
    let k = (pos.floor().max(0.0) as usize).min(n - 2);
    (k, x - (x0 + k as f64 * h))
}

/// Four-point Lagrange weights for a uniform stencil `start..start+4`
/// evaluated at fractional position `p` (in units of the spacing, relative to `start`).
#[inline]
pub fn lagrange4(p: f64) -> [f64; 4] {
    let (a, b, c, d) = (p, p - 1.0, p - 2.0, p - 3.0);
    [
        -b * c * d / 6.0,
        a * c * d / 2.0,
        -a * b * d / 2.0,
        a * b * c / 6.0,
    ]
}

/// Least-squares slope of `y` on `x` with a standard error propagated from
/// per-point standard errors of `y` (points treated as independent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    /// Standard error from the regression residuals (ignores the per-point SEs).
    pub residual_se: f64,
}

impl SlopeFit {
    /// Normal-approximation confidence interval at `z` standard errors.
    pub fn interval(&self, z: f64) -> (f64, f64) {
        (self.slope - z * self.slope_se, self.slope + z * self.slope_se)
    }
}

pub fn fit_slope(x: &[f64], y: &[f64], y_se: &[f64]) -> SlopeFit {
    let n = x.len();
    assert!(n >= 2 && y.len() == n && y_se.len() == n);
    let xm = x.iter().sum::<f64>() / n as f64;
    let ym = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - xm) * (v - xm)).sum();
    let weights: Vec<f64> = x.iter().map(|v| (v - xm) / sxx).collect();
    let slope: f64 = weights.iter().zip(y).map(|(w, v)| w * v).sum();
    let intercept = ym - slope * xm;
    let slope_se = weights
        .iter()
        .zip(y_se)
        .map(|(w, s)| w * w * s * s)
        .sum::<f64>()
        .sqrt();
    let residual_se = if n > 2 {
        let rss: f64 = x
            .iter()
            .zip(y)
            .map(|(xv, yv)| {
                let e = yv - intercept - slope * xv;
                e * e
            })
            .sum();
        (rss / (n - 2) as f64 / sxx).sqrt()
    } else {
        f64::NAN
    };
    SlopeFit {
        slope,
        intercept,
        slope_se,
        residual_se,
    }
}

/// Empirical convergence order `log2(e_coarse / e_fine)` for each refinement pair.
pub fn dyadic_orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn hermite_deriv_matches_difference_quotient() {
        let (y0, d0, y1, d1, h) = (0.3, -1.2, 1.1, 0.4, 0.7);
        for s in [0.0, 0.1, 0.35, 0.69] {
            let e = 1e-6;
            let fd = (hermite(y0, d0, y1, d1, h, s + e) - hermite(y0, d0, y1, d1, h, s - e)) / (2.0 * e);
            assert_relative_eq!(hermite_deriv(y0, d0, y1, d1, h, s), fd, epsilon = 1e-8);
        }
        assert_eq!(hermite_deriv(y0, d0, y1, d1, h, 0.0), d0);
    }

    #[test]
    fn thomas_matches_dense_solution() {
        let lower = [0.0, -1.0, -1.0, -1.0];
        let diag = [4.0, 4.0, 4.0, 4.0];
        let upper = [-1.0, -1.0, -1.0, 0.0];
        let x_true = [1.0, -2.0, 0.5, 3.0];
        let rhs: Vec<f64> = (0..4)
            .map(|i| {
                let mut s = diag[i] * x_true[i];
                if i > 0 {
                    s += lower[i] * x_true[i - 1];
                }
                if i < 3 {
                    s += upper[i] * x_true[i + 1];
                }
                s
            })
            .collect();
        let x = solve_tridiagonal(&lower, &diag, &upper, &rhs);
        for (a, b) in x.iter().zip(x_true) {
            assert_relative_eq!(*a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn fornberg_reproduces_classic_central_weights() {
        let w = fd_weights(0.0, &[-2.0, -1.0, 0.0, 1.0, 2.0], 2);
        let d1 = [1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0];
        let d2 = [-1.0 / 12.0, 4.0 / 3.0, -5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0];
        for k in 0..5 {
            assert_relative_eq!(w[1][k], d1[k], epsilon = 1e-14);
            assert_relative_eq!(w[2][k], d2[k], epsilon = 1e-14);
        }
    }

    #[test]
    fn uniform_stencils_are_fourth_order_everywhere() {
        let st = UniformStencils::new();
        let errs: Vec<(f64, f64)> = [20usize, 40]
            .iter()
            .map(|&n| {
                let h = 1.0 / (n - 1) as f64;
                let v: Vec<f64> = (0..n).map(|i| (1.3 * i as f64 * h).sin()).collect();
                let mut e1 = 0f64;
                let mut e2 = 0f64;
                for i in 0..n {
                    let x = i as f64 * h;
                    e1 = e1.max((st.d1(&v, i, h) - 1.3 * (1.3 * x).cos()).abs());
                    e2 = e2.max((st.d2(&v, i, h) + 1.69 * (1.3 * x).sin()).abs());
                }
                (e1, e2)
            })
            .collect();
        assert!((errs[0].0 / errs[1].0).log2() > 3.5);
        assert!((errs[0].1 / errs[1].1).log2() > 3.5);
    }

    #[test]
    fn hermite_is_exact_for_cubics() {
        let f = |x: f64| 2.0 * x * x * x - x * x + 0.5 * x - 3.0;
        let df = |x: f64| 6.0 * x * x - 2.0 * x + 0.5;
        let (x0, h) = (0.3, 0.7);
        for k in 0..=10 {
            let s = h * k as f64 / 10.0;
            let v = hermite(f(x0), df(x0), f(x0 + h), df(x0 + h), h, s);
            assert_relative_eq!(v, f(x0 + s), epsilon = 1e-13);
        }
    }

    #[test]
    fn lagrange4_reproduces_cubics() {
        let f = |x: f64| x * x * x - 4.0 * x + 1.0;
        for p in [0.0, 0.25, 1.5, 2.9, 3.0] {
            let w = lagrange4(p);
            let v: f64 = (0..4).map(|k| w[k] * f(k as f64)).sum();
            assert_relative_eq!(v, f(p), epsilon = 1e-12);
        }
    }

    #[test]
    fn slope_fit_recovers_line_and_scales_se() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| -1.0 * v + 2.0).collect();
        let fit = fit_slope(&x, &y, &[0.1; 4]);
        assert_relative_eq!(fit.slope, -1.0, epsilon = 1e-14);
        assert_relative_eq!(fit.intercept, 2.0, epsilon = 1e-14);
        let half = fit_slope(&x, &y, &[0.05; 4]);
        assert_relative_eq!(fit.slope_se / half.slope_se, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn locate_clamps_to_last_cell() {
        assert_eq!(locate_uniform(1.0, 0.0, 0.25, 5).0, 3);
        assert_eq!(locate_uniform(0.0, 0.0, 0.25, 5).0, 0);
        let (k, s) = locate_uniform(0.6, 0.0, 0.25, 5);
        assert_eq!(k, 2);
        assert_relative_eq!(s, 0.1, epsilon = 1e-14);
    }
}
