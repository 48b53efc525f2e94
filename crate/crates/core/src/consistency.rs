//! Control-consistency inversions.
//!
//! The scalar map `ρ` inverts `μ ↦ μ + h(μ)`. The vector map `ρ^N` inverts the
//! leave-one-out system `μⁱ + (1/(N−1)) Σ_{j≠i} h(μʲ) = Δⁱ`.

use crate::error::{Error, Result};
use crate::model::{ModelSpec, ScalarFn};
use crate::riccati::RiccatiSolution;

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 200;

/// Safeguarded Newton solver for `μ + h(μ) = Δ`.
#[derive(Debug, Clone, Copy)]
pub struct RhoSolver {
    h: ScalarFn,
    h_sup: f64,
    eps0: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl RhoSolver {
    pub fn new(h: ScalarFn) -> Self {
        RhoSolver {
            h,
            h_sup: h.bounds().sup(),
            eps0: 1.0 + h.deriv1_range().0,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }

    pub fn h(&self) -> ScalarFn {
        self.h
    }

    /// `inf (1 + h′)`; `1/eps0` bounds the Lipschitz constant of `ρ`.
    pub fn eps0(&self) -> f64 {
        self.eps0
    }

    /// Solve `μ + h(μ) = Δ`.
    pub fn rho(&self, delta: f64) -> Result<f64> {
        let h = &self.h;
        if h.is_zero() {
            return Ok(delta);
        }
        let (mut lo, mut hi) = (delta - self.h_sup, delta + self.h_sup);
        let g = |mu: f64| mu + h.eval(mu) - delta;
        let (g_lo, g_hi) = (g(lo), g(hi));
        if g_lo > self.tol || g_hi < -self.tol {
            return Err(Error::NoBracket { delta, lo, hi });
        }

        let mut mu = (delta - h.eval(delta)).clamp(lo, hi);
        let mut last = f64::INFINITY;
        for _ in 0..self.max_iter {
            let (hv, dh) = h.eval_d1(mu);
            let r = mu + hv - delta;
            if r.abs() <= self.tol {
                // One polishing step brings the root to round-off.
                let polished = mu - r / (1.0 + dh);
                if polished > lo && polished < hi && g(polished).abs() <= r.abs() {
                    return Ok(polished);
                }
                return Ok(mu);
            }
            if r < 0.0 {
                lo = mu;
            } else {
                hi = mu;
            }
            let slope = 1.0 + dh;
            let newton = mu - r / slope;
            let stalled = r.abs() > 0.5 * last;
            mu = if slope > 0.0 && newton > lo && newton < hi && !stalled {
                newton
            } else {
                0.5 * (lo + hi)
            };
            last = r.abs();
            if hi - lo <= f64::EPSILON * mu.abs().max(1.0) {
                let r = g(mu);
                if r.abs() <= self.tol {
                    return Ok(mu);
                }
                return Err(Error::MaxIterExceeded {
                    solver: "rho",
                    iterations: self.max_iter,
                    residual: r.abs(),
                });
            }
        }
        Err(Error::MaxIterExceeded {
            solver: "rho",
            iterations: self.max_iter,
            residual: g(mu).abs(),
        })
    }

    /// `ρ′(Δ) = 1 / (1 + h′(ρ(Δ)))`.
    pub fn rho_prime(&self, delta: f64) -> Result<f64> {
        let mu = self.rho(delta)?;
        Ok(1.0 / (1.0 + self.h.deriv1(mu)))
    }
}

/// Gauss–Jacobi solver for the leave-one-out consistency system.
#[derive(Debug, Clone, Copy)]
pub struct VectorConsistency {
    pub n: usize,
    h: ScalarFn,
    eps0: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl VectorConsistency {
    pub fn new(n: usize, h: ScalarFn) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!("N must be >= 2, got {n}")));
        }
        Ok(VectorConsistency {
            n,
            h,
            eps0: 1.0 - h.bounds().sup_d1(),
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        })
    }

    /// `1 − ‖h′‖∞`, the per-sweep contraction margin.
    pub fn eps0(&self) -> f64 {
        self.eps0
    }

    /// `F_i(μ) = μⁱ + h_i^N(μ) − Δⁱ`.
    pub fn residual(&self, delta: &[f64], mu: &[f64]) -> Vec<f64> {
        let total: f64 = mu.iter().map(|&m| self.h.eval(m)).sum();
        let inv = 1.0 / (self.n as f64 - 1.0);
        mu.iter()
            .zip(delta)
            .map(|(&m, &d)| m + (total - self.h.eval(m)) * inv - d)
            .collect()
    }

    /// Cold-start solve from `μ = Δ`.
    pub fn rho_n(&self, delta: &[f64]) -> Result<Vec<f64>> {
        let mut mu = delta.to_vec();
        self.solve_in_place(delta, &mut mu)?;
        Ok(mu)
    }

    /// Solve with `mu` as the starting point; returns the number of sweeps.
    pub fn solve_in_place(&self, delta: &[f64], mu: &mut [f64]) -> Result<usize> {
        if delta.len() != self.n || mu.len() != self.n {
            return Err(Error::InvalidParameter(format!(
                "expected {} components, got delta={} mu={}",
                self.n,
                delta.len(),
                mu.len()
            )));
        }
        let inv = 1.0 / (self.n as f64 - 1.0);
        let mut hv: Vec<f64> = mu.iter().map(|&m| self.h.eval(m)).collect();
        let mut change = f64::INFINITY;
        for sweep in 1..=self.max_iter {
            let total: f64 = hv.iter().sum();
            change = 0.0;
            for i in 0..self.n {
                let next = delta[i] - (total - hv[i]) * inv;
                change = change.max((next - mu[i]).abs());
                mu[i] = next;
            }
            for (v, &m) in hv.iter_mut().zip(mu.iter()) {
                *v = self.h.eval(m);
            }
            // The sweep change equals max|F| at the previous iterate; the new
            // iterate's residual is smaller by the contraction factor.
            if change <= self.tol {
                return Ok(sweep);
            }
        }
        Err(Error::MaxIterExceeded {
            solver: "rho_N",
            iterations: self.max_iter,
            residual: change,
        })
    }
}

/// Gershgorin lower bound `min_i [1 − (1/(N−1)) Σ_{j≠i} |h′(μʲ)|]` on the
/// spectrum of the consistency Jacobian.
pub fn gershgorin_certificate(h: &ScalarFn, mu: &[f64]) -> f64 {
    let n = mu.len();
    if n < 2 {
        return 1.0;
    }
    let d: Vec<f64> = mu.iter().map(|&m| h.deriv1(m).abs()).collect();
    let total: f64 = d.iter().sum();
    let inv = 1.0 / (n as f64 - 1.0);
    d.iter()
        .map(|&di| 1.0 - (total - di) * inv)
        .fold(f64::INFINITY, f64::min)
}

/// The feedback maps `k`, `k̃` and `k_i^N` built on a solved Riccati gain.
#[derive(Debug, Clone, Copy)]
pub struct ControlMap<'a> {
    riccati: &'a RiccatiSolution,
    /// `R⁻¹B`
    rb: f64,
    solver: RhoSolver,
}

impl<'a> ControlMap<'a> {
    pub fn new(model: &ModelSpec, riccati: &'a RiccatiSolution) -> Result<Self> {
        if model.hash() != riccati.model_hash() {
            return Err(Error::ModelMismatch {
                left: model.hash().to_string(),
                right: riccati.model_hash().to_string(),
            });
        }
        Ok(ControlMap {
            riccati,
            rb: model.b / model.r,
            solver: RhoSolver::new(model.h),
        })
    }

    pub fn solver(&self) -> &RhoSolver {
        &self.solver
    }

    pub fn riccati(&self) -> &'a RiccatiSolution {
        self.riccati
    }

    /// `R⁻¹B`.
    pub fn rb(&self) -> f64 {
        self.rb
    }

    /// `k(t, x, y) = ρ(−R⁻¹B(P_t x + y))`.
    pub fn k(&self, t: f64, x: f64, y: f64) -> Result<f64> {
        let p = self.riccati.eval_p(t)?;
        self.k_with_p(p, x, y)
    }

    /// `k` with the gain value `P_t` already evaluated.
    #[inline]
    pub fn k_with_p(&self, p: f64, x: f64, y: f64) -> Result<f64> {
        self.solver.rho(-self.rb * (p * x + y))
    }

    /// `k̃(t, x, y) = ρ(−R⁻¹B P_t η_t⁻¹ x − R⁻¹B η_t y)`.
    pub fn k_tilde(&self, t: f64, x: f64, y: f64) -> Result<f64> {
        let p = self.riccati.eval_p(t)?;
        let eta = self.riccati.eta_of(t)?;
        self.k_tilde_with(p, eta, x, y)
    }

    #[inline]
    pub fn k_tilde_with(&self, p: f64, eta: f64, x: f64, y: f64) -> Result<f64> {
        self.solver.rho(-self.rb * p * x / eta - self.rb * eta * y)
    }

    /// `k_i^N`: `ρ^N` applied to `Δⁱ = −R⁻¹B(P_t νⁱ + λⁱ)`.
    pub fn k_i_n(
        &self,
        vc: &VectorConsistency,
        t: f64,
        nu: &[f64],
        lambda: &[f64],
    ) -> Result<Vec<f64>> {
        let p = self.riccati.eval_p(t)?;
        let delta: Vec<f64> = nu
            .iter()
            .zip(lambda)
            .map(|(&n, &l)| -self.rb * (p * n + l))
            .collect();
        vc.rho_n(&delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoeffConfig, ModelConfig};
    use crate::riccati::solve_riccati;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b_compliant() -> Vec<ScalarFn> {
        vec![
            ScalarFn::Zero,
            ScalarFn::Constant(0.25),
            ScalarFn::sine(0.5, 1.0),
            ScalarFn::sine(0.9, 1.0),
            ScalarFn::sine(2.0, 0.3),
            ScalarFn::tanh(0.8, 1.0),
            ScalarFn::tanh(3.0, 2.0),
            ScalarFn::clamp(1.5, 2.0),
            ScalarFn::clamp(0.5, 0.6),
        ]
    }

    fn bisect(h: &ScalarFn, delta: f64) -> f64 {
        let s = h.bounds().sup();
        let (mut lo, mut hi) = (delta - s - 1.0, delta + s + 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid + h.eval(mid) - delta < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn rho_spec_examples() {
        assert_eq!(RhoSolver::new(ScalarFn::Zero).rho(3.7).unwrap(), 3.7);
        let c = RhoSolver::new(ScalarFn::Constant(0.25)).rho(1.0).unwrap();
        assert_relative_eq!(c, 0.75, epsilon = 1e-15);
        let h = ScalarFn::sine(0.5, 1.0);
        let oracle = bisect(&h, 1.0);
        assert!((oracle + 0.5 * oracle.sin() - 1.0).abs() < 1e-14);
        let mu = RhoSolver::new(h).rho(1.0).unwrap();
        assert!((mu - oracle).abs() < 1e-12);
    }

    #[test]
    fn rho_residual_and_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for h in b_compliant() {
            let solver = RhoSolver::new(h);
            assert!(solver.eps0() > 0.0);
            let lip = 1.0 / solver.eps0();
            for _ in 0..500 {
                let d1: f64 = rng.random_range(-10.0..10.0);
                let d2: f64 = rng.random_range(-10.0..10.0);
                let (m1, m2) = (solver.rho(d1).unwrap(), solver.rho(d2).unwrap());
                assert!((m1 + h.eval(m1) - d1).abs() <= 1e-12);
                assert!((m1 - m2).abs() <= lip * (d1 - d2).abs() + 2.0 * solver.tol);
            }
        }
    }

    #[test]
    fn rho_prime_matches_difference_quotient() {
        let solver = RhoSolver::new(ScalarFn::tanh(0.8, 1.0));
        let d = 0.3;
        let step = 1e-5;
        let fd = (solver.rho(d + step).unwrap() - solver.rho(d - step).unwrap()) / (2.0 * step);
        assert_relative_eq!(solver.rho_prime(d).unwrap(), fd, max_relative = 1e-8);
    }

    #[test]
    fn rho_finds_a_root_off_the_monotone_branch() {
        // 1 + h′ changes sign; bisection still lands on some root.
        let h = ScalarFn::sine(3.0, 1.0);
        let solver = RhoSolver::new(h);
        assert!(solver.eps0() < 0.0);
        for k in -50..50 {
            let d = k as f64 * 0.2;
            let mu = solver.rho(d).unwrap();
            assert!((mu + h.eval(mu) - d).abs() <= 1e-12);
        }
    }

    #[test]
    fn rho_n_constant_and_symmetric() {
        let vc = VectorConsistency::new(4, ScalarFn::Constant(0.3)).unwrap();
        let mu = vc.rho_n(&[1.0, -2.0, 0.5, 4.0]).unwrap();
        for (m, d) in mu.iter().zip([1.0, -2.0, 0.5, 4.0]) {
            assert_relative_eq!(*m, d - 0.3, epsilon = 1e-13);
        }
        let vc = VectorConsistency::new(5, ScalarFn::sine(0.5, 1.0)).unwrap();
        assert!(vc.rho_n(&[0.0; 5]).unwrap().iter().all(|&m| m == 0.0));

        // All-equal inputs reduce to the scalar map.
        let scalar = RhoSolver::new(ScalarFn::sine(0.5, 1.0)).rho(0.8).unwrap();
        let mu = vc.rho_n(&[0.8; 5]).unwrap();
        for m in mu {
            assert!((m - scalar).abs() < 1e-11);
        }
    }

    fn newton_oracle(h: &ScalarFn, delta: &[f64]) -> Vec<f64> {
        let n = delta.len();
        let inv = 1.0 / (n as f64 - 1.0);
        let mut mu = DVector::from_column_slice(delta);
        for _ in 0..50 {
            let total: f64 = mu.iter().map(|&m| h.eval(m)).sum();
            let f = DVector::from_fn(n, |i, _| mu[i] + (total - h.eval(mu[i])) * inv - delta[i]);
            let jac = DMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    1.0
                } else {
                    h.deriv1(mu[j]) * inv
                }
            });
            let step = jac.lu().solve(&f).unwrap();
            mu -= step;
            if f.amax() < 1e-15 {
                break;
            }
        }
        mu.iter().copied().collect()
    }

    #[test]
    fn rho_n_two_player_example() {
        let h = ScalarFn::sine(0.5, 1.0);
        let vc = VectorConsistency::new(2, h).unwrap();
        let mu = vc.rho_n(&[1.0, 0.0]).unwrap();
        assert!((mu[0] + 0.5 * mu[1].sin() - 1.0).abs() < 1e-12);
        assert!((mu[1] + 0.5 * mu[0].sin()).abs() < 1e-12);
        let oracle = newton_oracle(&h, &[1.0, 0.0]);
        assert!((mu[0] - oracle[0]).abs() < 1e-11 && (mu[1] - oracle[1]).abs() < 1e-11);
    }

    #[test]
    fn rho_n_matches_dense_newton() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for h in [ScalarFn::sine(0.5, 1.0), ScalarFn::tanh(0.7, 1.0), ScalarFn::clamp(0.9, 1.2)] {
            for n in 2..=6 {
                let vc = VectorConsistency::new(n, h).unwrap();
                for _ in 0..20 {
                    let delta: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
                    let mu = vc.rho_n(&delta).unwrap();
                    let oracle = newton_oracle(&h, &delta);
                    for (a, b) in mu.iter().zip(&oracle) {
                        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
                    }
                    let res = vc.residual(&delta, &mu);
                    assert!(res.iter().all(|r| r.abs() <= vc.tol));
                }
            }
        }
    }

    #[test]
    fn rho_n_sweep_count_is_geometric() {
        let h = ScalarFn::sine(0.5, 1.0);
        let vc = VectorConsistency::new(8, h).unwrap();
        let delta: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) * 1.3).collect();
        let mut mu = delta.clone();
        let sweeps = vc.solve_in_place(&delta, &mut mu).unwrap();
        // Start error is at most ‖h‖∞ = 0.5.
        let bound = (vc.tol / 0.5).ln() / (1.0 - vc.eps0()).ln() + 2.0;
        assert!((sweeps as f64) <= bound, "{sweeps} > {bound}");
    }

    #[test]
    fn rho_n_exchangeable() {
        let vc = VectorConsistency::new(4, ScalarFn::tanh(0.6, 1.5)).unwrap();
        let delta = [0.3, -1.2, 2.5, 0.0];
        let mu = vc.rho_n(&delta).unwrap();
        let perm = [2, 0, 3, 1];
        let pd: Vec<f64> = perm.iter().map(|&i| delta[i]).collect();
        let pm = vc.rho_n(&pd).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((pm[k] - mu[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn gershgorin_examples() {
        assert_eq!(gershgorin_certificate(&ScalarFn::Zero, &[1.0, 2.0, 3.0]), 1.0);
        let h = ScalarFn::sine(0.5, 1.0);
        assert_relative_eq!(gershgorin_certificate(&h, &[0.0; 3]), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn gershgorin_bounds_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for h in [ScalarFn::sine(0.5, 1.0), ScalarFn::tanh(0.9, 1.0), ScalarFn::clamp(0.4, 0.5)] {
            let eps0 = 1.0 - h.bounds().sup_d1();
            for _ in 0..200 {
                let n = rng.random_range(2..=6usize);
                let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
                let cert = gershgorin_certificate(&h, &mu);
                assert!(cert >= eps0 - 1e-15);
                let inv = 1.0 / (n as f64 - 1.0);
                let jac = DMatrix::from_fn(n, n, |i, j| {
                    if i == j {
                        1.0
                    } else {
                        h.deriv1(mu[j]) * inv
                    }
                });
                let min_eig = jac
                    .complex_eigenvalues()
                    .iter()
                    .map(|z| z.norm())
                    .fold(f64::INFINITY, f64::min);
                assert!(cert <= min_eig + 1e-12, "{cert} > {min_eig}");
            }
        }
    }

    fn generic_model() -> ModelSpec {
        let c = CoeffConfig {
            a: 0.1,
            ..CoeffConfig::unit()
        };
        ModelConfig::new(c)
            .with_h(ScalarFn::sine(0.5, 1.0))
            .build()
            .unwrap()
    }

    #[test]
    fn k_reduces_in_degenerate_cases() {
        let m = ModelConfig::new(CoeffConfig {
            b: 0.0,
            ..CoeffConfig::unit()
        })
        .with_h(ScalarFn::Constant(0.2))
        .build()
        .unwrap();
        let ric = solve_riccati(&m, 100).unwrap();
        let cm = ControlMap::new(&m, &ric).unwrap();
        for (x, y) in [(0.0, 0.0), (3.0, -1.0), (-7.0, 2.0)] {
            assert_relative_eq!(cm.k(0.4, x, y).unwrap(), -0.2, epsilon = 1e-15);
        }

        let m = ModelConfig::new(CoeffConfig::unit()).build().unwrap();
        let ric = solve_riccati(&m, 100).unwrap();
        let cm = ControlMap::new(&m, &ric).unwrap();
        let p = ric.eval_p(0.3).unwrap();
        assert_relative_eq!(cm.k(0.3, 1.5, -0.5).unwrap(), -(p * 1.5 - 0.5), epsilon = 1e-14);
    }

    #[test]
    fn k_and_k_tilde_defining_equations() {
        let m = generic_model();
        let ric = solve_riccati(&m, 200).unwrap();
        let cm = ControlMap::new(&m, &ric).unwrap();
        for &(t, x, y) in &[(0.0, 1.0, 0.5), (0.5, -2.0, 1.0), (0.9, 0.3, -3.0)] {
            let p = ric.eval_p(t).unwrap();
            let eta = ric.eta_of(t).unwrap();
            let k = cm.k(t, x, y).unwrap();
            assert!((k + m.h.eval(k) + (p * x + y)).abs() <= 1e-12);
            let kt = cm.k_tilde(t, x, y).unwrap();
            assert!((kt + m.h.eval(kt) + (p * x / eta + eta * y)).abs() <= 1e-12);
            // The transformed arguments give back k.
            assert!((cm.k_tilde(t, eta * x, y / eta).unwrap() - k).abs() < 1e-12);
        }
    }

    #[test]
    fn k_tilde_equals_k_when_eta_is_one() {
        let m = ModelConfig::new(CoeffConfig {
            b: 0.0,
            ..CoeffConfig::unit()
        })
        .with_h(ScalarFn::sine(0.5, 1.0))
        .build()
        .unwrap();
        let ric = solve_riccati(&m, 50).unwrap();
        let cm = ControlMap::new(&m, &ric).unwrap();
        assert_eq!(cm.k_tilde(0.2, 1.0, 2.0).unwrap(), cm.k(0.2, 1.0, 2.0).unwrap());
    }

    #[test]
    fn k_i_n_cases() {
        let m = ModelConfig::new(CoeffConfig::unit()).build().unwrap();
        let ric = solve_riccati(&m, 100).unwrap();
        let cm = ControlMap::new(&m, &ric).unwrap();
        let vc = VectorConsistency::new(3, m.h).unwrap();
        let p = ric.eval_p(0.5).unwrap();
        let out = cm.k_i_n(&vc, 0.5, &[1.0, 2.0, 3.0], &[0.1, 0.2, 0.3]).unwrap();
        for (i, o) in out.iter().enumerate() {
            let expect = -(p * (i + 1) as f64 + 0.1 * (i + 1) as f64);
            assert_relative_eq!(*o, expect, epsilon = 1e-13);
        }

        let m = generic_model();
        let ric = solve_riccati(&m, 100).unwrap();
        let cm = ControlMap::new(&m, &ric).unwrap();
        let vc = VectorConsistency::new(3, m.h).unwrap();
        let (nu, lam) = ([0.4, -0.1, 1.2], [0.3, 0.0, -0.6]);
        let out = cm.k_i_n(&vc, 0.2, &nu, &lam).unwrap();
        let p = ric.eval_p(0.2).unwrap();
        let delta: Vec<f64> = (0..3).map(|i| -(p * nu[i] + lam[i])).collect();
        assert!(vc.residual(&delta, &out).iter().all(|r| r.abs() <= 1e-12));
    }

    #[test]
    fn control_map_rejects_foreign_riccati() {
        let m1 = generic_model();
        let m2 = ModelConfig::new(CoeffConfig::unit()).build().unwrap();
        let ric = solve_riccati(&m2, 20).unwrap();
        assert!(matches!(
            ControlMap::new(&m1, &ric),
            Err(Error::ModelMismatch { .. })
        ));
    }
}
