//! Backward scalar Riccati equation `Ṗ + 2AP − B²R⁻¹P² + Q = 0`, `P_T = G`,
//! and the exponential factor `η_t = exp ∫_t^T (A − B²R⁻¹P_s) ds`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::numerics::hermite;

pub const DEFAULT_STEPS: usize = 2000;

/// Classic fourth-order Runge–Kutta integration of `y' = rhs(t, y)` backward
/// from `y(t_grid.last()) = terminal` over an ascending grid.
pub fn integrate_backward(
    t_grid: &[f64],
    terminal: f64,
    rhs: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let n = t_grid.len();
    let mut y = vec![0.0; n];
    y[n - 1] = terminal;
    for k in (0..n - 1).rev() {
        let t1 = t_grid[k + 1];
        let h = t_grid[k] - t1;
        let y1 = y[k + 1];
        let k1 = rhs(t1, y1);
        let k2 = rhs(t1 + 0.5 * h, y1 + 0.5 * h * k1);
        let k3 = rhs(t1 + 0.5 * h, y1 + 0.5 * h * k2);
        let k4 = rhs(t1 + h, y1 + h * k3);
        y[k] = y1 + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    y
}

/// Solved Riccati gain on a uniform grid, with `η` and the certified bound `ε₁`.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub tgrid: Vec<f64>,
    pub p: Vec<f64>,
    pub eta: Vec<f64>,
    /// `ln η` at the grid nodes.
    pub log_eta: Vec<f64>,
    pub eps1: f64,
    a: f64,
    gain: f64,
    q: f64,
    horizon: f64,
    step: f64,
    model_hash: String,
}

impl RiccatiSolution {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn n_steps(&self) -> usize {
        self.tgrid.len() - 1
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    /// Right-hand side `Ṗ = −2AP + B²R⁻¹P² − Q`.
    #[inline]
    pub fn rhs(&self, p: f64) -> f64 {
        -2.0 * self.a * p + self.gain * p * p - self.q
    }

    /// `A − B²R⁻¹P`.
    #[inline]
    pub fn drift_rate(&self, p: f64) -> f64 {
        self.a - self.gain * p
    }

    fn check_time(&self, t: f64) -> Result<f64> {
        let slack = 1e-12 * self.horizon.max(1.0);
        if !(t >= -slack && t <= self.horizon + slack) {
            return Err(Error::OutOfDomain {
                what: "t",
                value: t,
                lo: 0.0,
                hi: self.horizon,
            });
        }
        Ok(t.clamp(0.0, self.horizon))
    }

    #[inline]
    fn cell(&self, t: f64) -> (usize, f64) {
        let n = self.tgrid.len();
        let k = ((t / self.step).floor() as usize).min(n - 2);
        (k, t - self.tgrid[k])
    }

    /// Cubic Hermite interpolant of `P`, using the ODE right-hand side as slope data.
    pub fn eval_p(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        Ok(self.eval_p_unchecked(t))
    }

    #[inline]
    pub(crate) fn eval_p_unchecked(&self, t: f64) -> f64 {
        let (k, s) = self.cell(t);
        let (p0, p1) = (self.p[k], self.p[k + 1]);
        if s <= 0.0 {
            return p0;
        }
        if t >= self.tgrid[k + 1] {
            return p1;
        }
        hermite(p0, self.rhs(p0), p1, self.rhs(p1), self.step, s)
    }

    /// `η_t`, accumulated from the node table plus a partial-cell quadrature.
    pub fn eta_of(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        Ok(self.eta_unchecked(t))
    }

    pub(crate) fn eta_unchecked(&self, t: f64) -> f64 {
        let (k, s) = self.cell(t);
        let t1 = self.tgrid[k + 1];
        let width = self.step - s;
        if width <= 0.0 {
            return self.eta[k + 1];
        }
        // Three-point Gauss–Legendre is exact on the cubic interpolant.
        let nodes = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
        let weights = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let mid = 0.5 * (t + t1);
        let half = 0.5 * width;
        let integral_p: f64 = nodes
            .iter()
            .zip(weights)
            .map(|(z, w)| w * self.eval_p_unchecked(mid + half * z))
            .sum::<f64>()
            * half;
        let integral = self.a * width - self.gain * integral_p;
        (self.log_eta[k + 1] + integral).exp()
    }

    pub fn sup_p(&self) -> f64 {
        self.p.iter().fold(0f64, |m, v| m.max(v.abs()))
    }

    /// `sup_t |A − B²R⁻¹P_t|`.
    pub fn sup_drift_rate(&self) -> f64 {
        self.p
            .iter()
            .fold(0f64, |m, &v| m.max(self.drift_rate(v).abs()))
    }

    pub fn eta_range(&self) -> (f64, f64) {
        self.eta
            .iter()
            .fold((f64::INFINITY, 0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)))
    }

    /// Riccati defect `|Ṗ + 2AP − B²R⁻¹P² + Q|` of the interpolant at cell midpoints.
    pub fn midpoint_defect(&self) -> f64 {
        let mut worst = 0f64;
        for k in 0..self.tgrid.len() - 1 {
            let h = self.step;
            let (p0, p1) = (self.p[k], self.p[k + 1]);
            let (d0, d1) = (self.rhs(p0), self.rhs(p1));
            // Hermite interpolant and its derivative at the midpoint.
            let pm = hermite(p0, d0, p1, d1, h, 0.5 * h);
            let dpm = 1.5 * (p1 - p0) / h - 0.25 * (d0 + d1);
            worst = worst.max((dpm - self.rhs(pm)).abs());
        }
        worst
    }

    /// CSV with columns `t,P,eta`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "# model={} steps={}", self.model_hash, self.n_steps())?;
        writeln!(out, "t,P,eta")?;
        for ((t, p), e) in self.tgrid.iter().zip(&self.p).zip(&self.eta) {
            writeln!(out, "{t},{p},{e}")?;
        }
        Ok(())
    }
}

/// Solve the Riccati equation backward from `T` with `n_steps` RK4 steps.
pub fn solve_riccati(model: &ModelSpec, n_steps: usize) -> Result<RiccatiSolution> {
    if n_steps < 2 {
        return Err(Error::InvalidParameter(format!(
            "riccati n_steps must be >= 2, got {n_steps}"
        )));
    }
    let horizon = model.horizon;
    let step = horizon / n_steps as f64;
    let tgrid: Vec<f64> = (0..=n_steps).map(|k| k as f64 * step).collect();
    let (a, gain, q) = (model.a, model.gain(), model.q);
    let rhs = |p: f64| -2.0 * a * p + gain * p * p - q;

    // Comparison solution with B = 0 dominates P from above; P ≥ 0 from below.
    let bound = (model.g_weight + q * horizon) * (2.0 * a.abs() * horizon).exp();
    let tol = bound * 1e-9 + 1e-12;

    let mut p = vec![0.0; n_steps + 1];
    p[n_steps] = model.g_weight;
    for k in (0..n_steps).rev() {
        let y1 = p[k + 1];
        let h = -step;
        let k1 = rhs(y1);
        let k2 = rhs(y1 + 0.5 * h * k1);
        let k3 = rhs(y1 + 0.5 * h * k2);
        let k4 = rhs(y1 + h * k3);
        let y = y1 + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !y.is_finite() || y.abs() > bound + tol {
            return Err(Error::NumericalBlowup {
                t: tgrid[k],
                value: y.abs(),
                bound,
            });
        }
        p[k] = y;
    }

    // Per-cell ∫(A − γP) using the end-corrected trapezoid (exact on the Hermite cubic).
    let mut log_eta = vec![0.0; n_steps + 1];
    let mut abs_integral = 0.0;
    for k in (0..n_steps).rev() {
        let (p0, p1) = (p[k], p[k + 1]);
        let int_p = 0.5 * step * (p0 + p1) + step * step / 12.0 * (rhs(p0) - rhs(p1));
        let cell = a * step - gain * int_p;
        log_eta[k] = log_eta[k + 1] + cell;
        let (r0, r1) = (a - gain * p0, a - gain * p1);
        abs_integral += if r0 * r1 >= 0.0 {
            cell.abs()
        } else {
            0.5 * step * (r0.abs() + r1.abs())
        };
    }
    let eta = log_eta.iter().map(|v| v.exp()).collect();
    Ok(RiccatiSolution {
        tgrid,
        p,
        eta,
        log_eta,
        eps1: (-abs_integral).exp(),
        a,
        gain,
        q,
        horizon,
        step,
        model_hash: model.hash().to_string(),
    })
}
