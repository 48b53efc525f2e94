//! Decoupling field `Φ(t, ν)`: a backward semilinear parabolic equation on a
//! truncated `ν` domain, its `η`-transformed twin, residual evaluation,
//! interpolation and the finite-player projections.

use std::io::{BufRead, Write};

use crate::consistency::ControlMap;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::numerics::{hermite, hermite_deriv, lagrange4, locate_uniform, solve_tridiagonal, UniformStencils};
use crate::riccati::RiccatiSolution;

pub const DEFAULT_NT: usize = 400;
pub const DEFAULT_NNU: usize = 801;
pub const PICARD_MAX_ITER: usize = 5;
pub const PICARD_TOL: f64 = 1e-10;

/// Uniform `(t, ν)` grid on `[0, T] × [−L, L]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldGrid {
    pub nt: usize,
    pub nnu: usize,
    pub half_width: f64,
    pub horizon: f64,
}

impl FieldGrid {
    /// `nt` time steps and `nnu` spatial nodes.
    pub fn new(horizon: f64, nt: usize, nnu: usize, half_width: f64) -> Result<Self> {
        if nt < 4 {
            return Err(Error::InvalidParameter(format!("grid nt must be >= 4, got {nt}")));
        }
        if nnu < 9 {
            return Err(Error::InvalidParameter(format!(
                "grid nnu must be >= 9, got {nnu}"
            )));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "domain half-width must be positive, got {half_width}"
            )));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon must be > 0, got {horizon}")));
        }
        Ok(FieldGrid {
            nt,
            nnu,
            half_width,
            horizon,
        })
    }

    /// Grid with the default half-width for `model` and initial means up to `nu0_max`.
    pub fn for_model(
        model: &ModelSpec,
        riccati: &RiccatiSolution,
        nt: usize,
        nnu: usize,
        nu0_max: f64,
    ) -> Result<Self> {
        Self::new(
            model.horizon,
            nt,
            nnu,
            default_half_width(model, riccati, nu0_max),
        )
    }

    /// Halve both steps.
    pub fn refined(&self) -> Self {
        FieldGrid {
            nt: 2 * self.nt,
            nnu: 2 * self.nnu - 1,
            ..*self
        }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.nt as f64
    }

    pub fn dnu(&self) -> f64 {
        2.0 * self.half_width / (self.nnu - 1) as f64
    }

    pub fn t(&self, n: usize) -> f64 {
        if n == self.nt {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }

    pub fn nu(&self, j: usize) -> f64 {
        if j + 1 == self.nnu {
            self.half_width
        } else {
            -self.half_width + j as f64 * self.dnu()
        }
    }

    pub fn nu_nodes(&self) -> Vec<f64> {
        (0..self.nnu).map(|j| self.nu(j)).collect()
    }

    pub fn t_nodes(&self) -> Vec<f64> {
        (0..=self.nt).map(|n| self.t(n)).collect()
    }

    #[inline]
    fn index(&self, n: usize, j: usize) -> usize {
        n * self.nnu + j
    }
}

/// A-priori bound on `‖Φ‖∞`.
pub fn phi_bound(model: &ModelSpec, riccati: &RiccatiSolution) -> f64 {
    let sup_p = riccati.sup_p();
    let sup_a = riccati.sup_drift_rate();
    let f = model.f.bounds().sup();
    let b = model.b_fn.bounds().sup();
    let h = model.h.bounds().sup();
    let l = model.l.bounds().sup();
    model.g_weight * model.g.bounds().sup()
        + model.horizon
            * (sup_p * (f + b + model.b.abs() * h) + model.q * l)
            * (sup_a * model.horizon).exp()
}

/// Half-width `L` such that `ν`-paths started within `nu0_max` stay inside
/// `[−L/2, L/2]` outside a six-sigma event.
pub fn default_half_width(model: &ModelSpec, riccati: &RiccatiSolution, nu0_max: f64) -> f64 {
    let drift = model.f.bounds().sup()
        + model.b_fn.bounds().sup()
        + model.b.abs() * model.h.bounds().sup()
        + model.gain() * phi_bound(model, riccati);
    let t = model.horizon;
    let growth = (riccati.sup_drift_rate() * t).exp();
    2.0 * (nu0_max.abs() + drift * t + 6.0 * model.sigma0 * t.sqrt()) * growth
}

/// Coefficients of a backward equation
/// `∂_t u + D(t) ∂_νν u + β(t,ν,u) ∂_ν u + a(t) u + S(t,ν,u) = 0`, `u(T) = terminal`.
pub trait BackwardPde {
    /// `D` at time node `n`.
    fn diffusion(&self, n: usize) -> f64;
    /// `a` at time node `n`.
    fn linear_rate(&self, n: usize) -> f64;
    fn terminal(&self, nu: f64) -> f64;
    /// `(β, S)` at node `(n, j)` for the value `u`.
    fn velocity_source(&self, n: usize, j: usize, nu: f64, u: f64) -> Result<(f64, f64)>;
    /// True when `β` and `S` do not depend on `u`.
    fn is_linear(&self) -> bool {
        false
    }
}

/// Crank–Nicolson march backward from `T` with a per-step Picard loop on the
/// `u`-dependent velocity and source. Returns values laid out `[n][j]`.
pub fn solve_backward<P: BackwardPde>(grid: &FieldGrid, pde: &P) -> Result<Vec<f64>> {
    let (nt, nnu) = (grid.nt, grid.nnu);
    let (dt, dnu) = (grid.dt(), grid.dnu());
    let nu = grid.nu_nodes();
    let m = nnu - 2;
    let mut out = vec![0.0; (nt + 1) * nnu];
    for j in 0..nnu {
        out[grid.index(nt, j)] = pde.terminal(nu[j]);
    }

    let mut explicit = vec![0.0; m];
    let mut lower = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    let mut guess = vec![0.0; nnu];
    let mut coef = vec![(0.0, 0.0); nnu];

    for n in (0..nt).rev() {
        let next = &out[grid.index(n + 1, 0)..grid.index(n + 1, 0) + nnu];
        let d_next = pde.diffusion(n + 1) / (dnu * dnu);
        let a_next = pde.linear_rate(n + 1);
        for j in 1..nnu - 1 {
            let (beta, src) = pde.velocity_source(n + 1, j, nu[j], next[j])?;
            let lap = next[j - 1] - 2.0 * next[j] + next[j + 1];
            let grad = (next[j + 1] - next[j - 1]) / (2.0 * dnu);
            let l = d_next * lap + beta * grad + a_next * next[j] + src;
            explicit[j - 1] = next[j] + 0.5 * dt * l;
        }

        if n + 2 <= nt {
            let after = &out[grid.index(n + 2, 0)..grid.index(n + 2, 0) + nnu];
            for j in 0..nnu {
                guess[j] = 2.0 * next[j] - after[j];
            }
        } else {
            guess.copy_from_slice(next);
        }

        let d_now = pde.diffusion(n) / (dnu * dnu);
        let a_now = pde.linear_rate(n);
        let max_iter = if pde.is_linear() { 1 } else { PICARD_MAX_ITER };
        let mut change = f64::INFINITY;
        for iter in 1..=max_iter {
            for j in 1..nnu - 1 {
                coef[j] = pde.velocity_source(n, j, nu[j], guess[j])?;
            }
            for r in 0..m {
                let j = r + 1;
                let (beta, src) = coef[j];
                let c_lo = d_now - beta / (2.0 * dnu);
                let c_mid = -2.0 * d_now + a_now;
                let c_hi = d_now + beta / (2.0 * dnu);
                lower[r] = -0.5 * dt * c_lo;
                diag[r] = 1.0 - 0.5 * dt * c_mid;
                upper[r] = -0.5 * dt * c_hi;
                rhs[r] = explicit[r] + 0.5 * dt * src;
            }
            // Linear extrapolation u_0 = 2u_1 − u_2 folded into the first and last rows.
            diag[0] += 2.0 * lower[0];
            upper[0] -= lower[0];
            lower[0] = 0.0;
            diag[m - 1] += 2.0 * upper[m - 1];
            lower[m - 1] -= upper[m - 1];
            upper[m - 1] = 0.0;

            let sol = solve_tridiagonal(&lower, &diag, &upper, &rhs);
            change = 0.0;
            for r in 0..m {
                change = change.max((sol[r] - guess[r + 1]).abs());
                guess[r + 1] = sol[r];
            }
            guess[0] = 2.0 * guess[1] - guess[2];
            guess[nnu - 1] = 2.0 * guess[nnu - 2] - guess[nnu - 3];
            if !change.is_finite() {
                break;
            }
            if change <= PICARD_TOL || (pde.is_linear() && iter == 1) {
                change = 0.0;
                break;
            }
        }
        if change > PICARD_TOL || !change.is_finite() {
            return Err(Error::PicardDiverged {
                t: grid.t(n),
                iterations: max_iter,
                change,
            });
        }
        out[grid.index(n, 0)..grid.index(n, 0) + nnu].copy_from_slice(&guess);
    }
    Ok(out)
}

/// Coefficients of the `Φ` equation in original variables.
pub struct PhiPde<'a> {
    model: &'a ModelSpec,
    control: ControlMap<'a>,
    p: Vec<f64>,
    gain: f64,
}

impl<'a> PhiPde<'a> {
    pub fn new(model: &'a ModelSpec, riccati: &'a RiccatiSolution, grid: &FieldGrid) -> Result<Self> {
        let control = ControlMap::new(model, riccati)?;
        let p = grid
            .t_nodes()
            .iter()
            .map(|&t| riccati.eval_p(t))
            .collect::<Result<_>>()?;
        Ok(PhiPde {
            model,
            control,
            p,
            gain: model.gain(),
        })
    }
}

impl BackwardPde for PhiPde<'_> {
    fn diffusion(&self, _n: usize) -> f64 {
        0.5 * self.model.sigma0 * self.model.sigma0
    }

    fn linear_rate(&self, n: usize) -> f64 {
        self.model.a - self.gain * self.p[n]
    }

    fn terminal(&self, nu: f64) -> f64 {
        self.model.g_weight * self.model.g.eval(nu)
    }

    fn velocity_source(&self, n: usize, _j: usize, nu: f64, phi: f64) -> Result<(f64, f64)> {
        let m = self.model;
        let p = self.p[n];
        let k = self.control.k_with_p(p, nu, phi)?;
        let (hk, bk, fv) = (m.h.eval(k), m.b_fn.eval(k), m.f.eval(nu));
        let a = m.a - self.gain * p;
        let beta = a * nu - self.gain * phi - m.b * hk + fv + bk;
        let src = p * (fv + bk - m.b * hk) + m.q * m.l.eval(nu);
        Ok((beta, src))
    }
}

/// Coefficients of the transformed equation for `Φ̃`, written in `ν̃ = η ν`.
pub struct PhiTildePde<'a> {
    model: &'a ModelSpec,
    control: ControlMap<'a>,
    p: Vec<f64>,
    eta: Vec<f64>,
    gain: f64,
}

impl<'a> PhiTildePde<'a> {
    pub fn new(model: &'a ModelSpec, riccati: &'a RiccatiSolution, grid: &FieldGrid) -> Result<Self> {
        let control = ControlMap::new(model, riccati)?;
        let times = grid.t_nodes();
        let p = times.iter().map(|&t| riccati.eval_p(t)).collect::<Result<_>>()?;
        let eta = times.iter().map(|&t| riccati.eta_of(t)).collect::<Result<_>>()?;
        Ok(PhiTildePde {
            model,
            control,
            p,
            eta,
            gain: model.gain(),
        })
    }
}

impl BackwardPde for PhiTildePde<'_> {
    fn diffusion(&self, n: usize) -> f64 {
        let e = self.eta[n] * self.model.sigma0;
        0.5 * e * e
    }

    fn linear_rate(&self, _n: usize) -> f64 {
        0.0
    }

    fn terminal(&self, nu: f64) -> f64 {
        self.model.g_weight * self.model.g.eval(nu)
    }

    fn velocity_source(&self, n: usize, _j: usize, nu: f64, phi: f64) -> Result<(f64, f64)> {
        let m = self.model;
        let (p, eta) = (self.p[n], self.eta[n]);
        let k = self.control.k_tilde_with(p, eta, nu, phi)?;
        let (hk, bk) = (m.h.eval(k), m.b_fn.eval(k));
        let x = nu / eta;
        let fv = m.f.eval(x);
        let beta = -eta * eta * self.gain * phi - eta * m.b * hk + eta * fv + eta * bk;
        let src = (p * fv + p * bk + m.q * m.l.eval(x) - p * m.b * hk) / eta;
        Ok((beta, src))
    }
}

/// Which grid function a [`DecouplingField`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Phi,
    PhiTilde,
    /// `Φ` rebuilt from `Φ̃`.
    Reconstructed,
    /// The value offset `c`.
    Offset,
}

/// A function on a [`FieldGrid`] with its first two `ν`-derivatives.
#[derive(Debug, Clone)]
pub struct DecouplingField {
    pub grid: FieldGrid,
    pub kind: FieldKind,
    pub phi: Vec<f64>,
    pub dphi: Vec<f64>,
    pub ddphi: Vec<f64>,
    model_hash: String,
}

impl DecouplingField {
    /// Wrap grid values and differentiate them in `ν`.
    pub fn from_values(
        grid: FieldGrid,
        kind: FieldKind,
        phi: Vec<f64>,
        model_hash: &str,
    ) -> Self {
        assert_eq!(phi.len(), (grid.nt + 1) * grid.nnu);
        let st = UniformStencils::new();
        let h = grid.dnu();
        let mut dphi = vec![0.0; phi.len()];
        let mut ddphi = vec![0.0; phi.len()];
        for n in 0..=grid.nt {
            let row = &phi[grid.index(n, 0)..grid.index(n, 0) + grid.nnu];
            for j in 0..grid.nnu {
                dphi[grid.index(n, j)] = st.d1(row, j, h);
                ddphi[grid.index(n, j)] = st.d2(row, j, h);
            }
        }
        DecouplingField {
            grid,
            kind,
            phi,
            dphi,
            ddphi,
            model_hash: model_hash.to_string(),
        }
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    /// Values at time node `n`.
    pub fn slice(&self, n: usize) -> &[f64] {
        let s = self.grid.index(n, 0);
        &self.phi[s..s + self.grid.nnu]
    }

    pub fn at(&self, n: usize, j: usize) -> f64 {
        self.phi[self.grid.index(n, j)]
    }

    pub fn sup_norm(&self) -> f64 {
        self.phi.iter().fold(0f64, |m, v| m.max(v.abs()))
    }

    pub fn sup_derivatives(&self) -> (f64, f64) {
        let d1 = self.dphi.iter().fold(0f64, |m, v| m.max(v.abs()));
        let d2 = self.ddphi.iter().fold(0f64, |m, v| m.max(v.abs()));
        (d1, d2)
    }

    /// `(Φ, ∂_νΦ, ∂_ννΦ)` at `(t, ν)`: cubic in `t`, Hermite in `ν`. The first
    /// derivative is that of the value interpolant; the second is interpolated.
    pub fn eval(&self, t: f64, nu: f64) -> Result<(f64, f64, f64)> {
        let g = &self.grid;
        let slack = 1e-12 * g.half_width.max(1.0);
        if !(nu.abs() <= g.half_width + slack) {
            return Err(Error::OutOfDomain {
                what: "nu",
                value: nu,
                lo: -g.half_width,
                hi: g.half_width,
            });
        }
        let tslack = 1e-12 * g.horizon.max(1.0);
        if !(t >= -tslack && t <= g.horizon + tslack) {
            return Err(Error::OutOfDomain {
                what: "t",
                value: t,
                lo: 0.0,
                hi: g.horizon,
            });
        }
        let nu = nu.clamp(-g.half_width, g.half_width);
        let t = t.clamp(0.0, g.horizon);
        Ok(self.eval_unchecked(t, nu))
    }

    pub(crate) fn eval_unchecked(&self, t: f64, nu: f64) -> (f64, f64, f64) {
        let g = &self.grid;
        let dt = g.dt();
        let pos = t / dt;
        let near = pos.round();
        if (pos - near).abs() < 1e-9 {
            return self.eval_slice(near as usize, nu);
        }
        let start = (pos.floor() as isize - 1).clamp(0, g.nt as isize - 3) as usize;
        let w = lagrange4(pos - start as f64);
        let mut acc = (0.0, 0.0, 0.0);
        for (k, wk) in w.iter().enumerate() {
            let (a, b, c) = self.eval_slice(start + k, nu);
            acc.0 += wk * a;
            acc.1 += wk * b;
            acc.2 += wk * c;
        }
        acc
    }

    fn eval_slice(&self, n: usize, nu: f64) -> (f64, f64, f64) {
        let g = &self.grid;
        let h = g.dnu();
        let (k, s) = locate_uniform(nu, -g.half_width, h, g.nnu);
        let i0 = g.index(n, k);
        if s.abs() <= 1e-12 * h {
            return (self.phi[i0], self.dphi[i0], self.ddphi[i0]);
        }
        if (h - s).abs() <= 1e-12 * h {
            return (self.phi[i0 + 1], self.dphi[i0 + 1], self.ddphi[i0 + 1]);
        }
        let v = hermite(
            self.phi[i0],
            self.dphi[i0],
            self.phi[i0 + 1],
            self.dphi[i0 + 1],
            h,
            s,
        );
        let d = hermite_deriv(
            self.phi[i0],
            self.dphi[i0],
            self.phi[i0 + 1],
            self.dphi[i0 + 1],
            h,
            s,
        );
        let start = (k as isize - 1).clamp(0, g.nnu as isize - 4) as usize;
        let w = lagrange4((nu - g.nu(start)) / h);
        let base = g.index(n, start);
        let dd = (0..4).map(|q| w[q] * self.ddphi[base + q]).sum();
        (v, d, dd)
    }

    /// CSV with columns `t,nu,phi,dphi,ddphi` and a metadata comment line.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let g = &self.grid;
        writeln!(
            out,
            "# model={} kind={:?} nt={} nnu={} L={} T={}",
            self.model_hash, self.kind, g.nt, g.nnu, g.half_width, g.horizon
        )?;
        writeln!(out, "t,nu,phi,dphi,ddphi")?;
        for n in 0..=g.nt {
            let t = g.t(n);
            for j in 0..g.nnu {
                let i = g.index(n, j);
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    t,
                    g.nu(j),
                    self.phi[i],
                    self.dphi[i],
                    self.ddphi[i]
                )?;
            }
        }
        Ok(())
    }
}

impl DecouplingField {
    /// Read a field written by [`DecouplingField::write_csv`]. Values round-trip
    /// exactly; derivatives are recomputed.
    pub fn read_csv(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let bad = |line: usize, message: String| Error::Parse {
            line,
            column: 1,
            message,
        };
        let meta = lines.next().ok_or_else(|| bad(1, "empty field file".into()))??;
        let mut hash = None;
        let (mut kind, mut nt, mut nnu, mut half, mut horizon) = (None, None, None, None, None);
        for item in meta.trim_start_matches('#').split_whitespace() {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| bad(1, format!("malformed metadata item `{item}`")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|e| bad(1, format!("{key}: {e}")));
            match key {
                "model" => hash = Some(value.to_string()),
                "kind" => {
                    kind = Some(match value {
                        "Phi" => FieldKind::Phi,
                        "PhiTilde" => FieldKind::PhiTilde,
                        "Reconstructed" => FieldKind::Reconstructed,
                        "Offset" => FieldKind::Offset,
                        other => return Err(bad(1, format!("unknown field kind `{other}`"))),
                    })
                }
                "nt" => nt = Some(num(value)? as usize),
                "nnu" => nnu = Some(num(value)? as usize),
                "L" => half = Some(num(value)?),
                "T" => horizon = Some(num(value)?),
                _ => {}
            }
        }
        let missing = |what: &str| bad(1, format!("metadata lacks `{what}`"));
        let grid = FieldGrid::new(
            horizon.ok_or_else(|| missing("T"))?,
            nt.ok_or_else(|| missing("nt"))?,
            nnu.ok_or_else(|| missing("nnu"))?,
            half.ok_or_else(|| missing("L"))?,
        )?;
        lines.next().ok_or_else(|| bad(2, "missing header".into()))??;
        let mut values = Vec::with_capacity((grid.nt + 1) * grid.nnu);
        for (k, line) in lines.enumerate() {
            let line = line?;
            let field = line
                .split(',')
                .nth(2)
                .ok_or_else(|| bad(k + 3, "expected at least three columns".into()))?;
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|e| bad(k + 3, format!("phi: {e}")))?,
            );
        }
        if values.len() != (grid.nt + 1) * grid.nnu {
            return Err(bad(
                values.len() + 2,
                format!("expected {} rows, found {}", (grid.nt + 1) * grid.nnu, values.len()),
            ));
        }
        Ok(DecouplingField::from_values(
            grid,
            kind.ok_or_else(|| missing("kind"))?,
            values,
            &hash.ok_or_else(|| missing("model"))?,
        ))
    }
}

/// Maxima of the pointwise residual over nested `ν` windows.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ResidualProfile {
    /// Max over `|ν| ≤ L/2`.
    pub interior_max: f64,
    /// Mean absolute residual over `|ν| ≤ L/2`.
    pub interior_mean: f64,
    /// Max over `|ν| ≤ L/4`.
    pub quarter_max: f64,
    /// Max over the outer band `|ν| ≥ 0.9 L`.
    pub band_max: f64,
    pub nt: usize,
    pub nnu: usize,
}

impl ResidualProfile {
    /// True when the boundary band dominates and the error has spread into
    /// the evaluation window.
    pub fn contaminated(&self) -> bool {
        self.band_max > 10.0 * self.interior_max
            && self.interior_max > 2.0 * self.quarter_max + 1e-12
    }
}

/// Pointwise residual of `pde` on grid values, with fourth-order differences
/// in `t` and `ν`. Returns the residual laid out `[n][j]`.
pub fn pointwise_residual<P: BackwardPde>(
    grid: &FieldGrid,
    values: &[f64],
    pde: &P,
) -> Result<Vec<f64>> {
    let st = UniformStencils::new();
    let (dt, dnu) = (grid.dt(), grid.dnu());
    let nu = grid.nu_nodes();
    let mut out = vec![0.0; values.len()];
    let mut column = vec![0.0; grid.nt + 1];
    for j in 0..grid.nnu {
        for n in 0..=grid.nt {
            column[n] = values[grid.index(n, j)];
        }
        for n in 0..=grid.nt {
            out[grid.index(n, j)] = st.d1(&column, n, dt);
        }
    }
    for n in 0..=grid.nt {
        let row = &values[grid.index(n, 0)..grid.index(n, 0) + grid.nnu];
        let d = pde.diffusion(n);
        let a = pde.linear_rate(n);
        for j in 0..grid.nnu {
            let (beta, src) = pde.velocity_source(n, j, nu[j], row[j])?;
            let r = st.d2(row, j, dnu) * d + beta * st.d1(row, j, dnu) + a * row[j] + src;
            out[grid.index(n, j)] += r;
        }
    }
    Ok(out)
}

/// Summarize a pointwise residual over the nested windows.
pub fn residual_profile(grid: &FieldGrid, residual: &[f64]) -> ResidualProfile {
    let l = grid.half_width;
    let mut p = ResidualProfile {
        interior_max: 0.0,
        interior_mean: 0.0,
        quarter_max: 0.0,
        band_max: 0.0,
        nt: grid.nt,
        nnu: grid.nnu,
    };
    let mut count = 0usize;
    for n in 0..=grid.nt {
        for j in 0..grid.nnu {
            let x = grid.nu(j).abs();
            let r = residual[grid.index(n, j)].abs();
            if x <= 0.5 * l + 1e-12 {
                p.interior_max = p.interior_max.max(r);
                p.interior_mean += r;
                count += 1;
            }
            if x <= 0.25 * l + 1e-12 {
                p.quarter_max = p.quarter_max.max(r);
            }
            if x >= 0.9 * l - 1e-12 {
                p.band_max = p.band_max.max(r);
            }
        }
    }
    p.interior_mean /= count.max(1) as f64;
    p
}

/// Residual profile of a field against the `Φ` equation.
pub fn phi_residual(
    model: &ModelSpec,
    riccati: &RiccatiSolution,
    field: &DecouplingField,
) -> Result<ResidualProfile> {
    check_hash(model, field)?;
    let pde = PhiPde::new(model, riccati, &field.grid)?;
    let r = pointwise_residual(&field.grid, &field.phi, &pde)?;
    Ok(residual_profile(&field.grid, &r))
}

fn check_hash(model: &ModelSpec, field: &DecouplingField) -> Result<()> {
    if model.hash() != field.model_hash() {
        return Err(Error::ModelMismatch {
            left: model.hash().to_string(),
            right: field.model_hash().to_string(),
        });
    }
    Ok(())
}

/// Solve the `Φ` equation backward from `Φ(T) = G g`.
pub fn solve_phi(
    model: &ModelSpec,
    riccati: &RiccatiSolution,
    grid: &FieldGrid,
) -> Result<DecouplingField> {
    if grid.horizon != model.horizon {
        return Err(Error::InvalidParameter(format!(
            "grid horizon {} differs from model horizon {}",
            grid.horizon, model.horizon
        )));
    }
    let pde = PhiPde::new(model, riccati, grid)?;
    let values = solve_backward(grid, &pde)?;
    let field = DecouplingField::from_values(*grid, FieldKind::Phi, values, model.hash());

    let bound = phi_bound(model, riccati);
    let sup = field.sup_norm();
    if !(sup <= bound * (1.0 + 1e-9) + 1e-12) {
        return Err(Error::BoundViolated {
            what: "sup |Phi|",
            value: sup,
            bound,
        });
    }
    let residual = pointwise_residual(grid, &field.phi, &pde)?;
    let profile = residual_profile(grid, &residual);
    if profile.contaminated() {
        return Err(Error::BoundaryContamination {
            band: profile.band_max,
            interior: profile.interior_max,
        });
    }
    Ok(field)
}

/// Grid used for `Φ̃`: same times, half-width scaled by `max η`.
pub fn tilde_grid(riccati: &RiccatiSolution, grid: &FieldGrid) -> FieldGrid {
    let (_, eta_max) = riccati.eta_range();
    FieldGrid {
        half_width: grid.half_width * eta_max.max(1.0),
        ..*grid
    }
}

/// Solve the transformed equation for `Φ̃` on [`tilde_grid`].
pub fn solve_phi_tilde(
    model: &ModelSpec,
    riccati: &RiccatiSolution,
    grid: &FieldGrid,
) -> Result<DecouplingField> {
    let tg = tilde_grid(riccati, grid);
    let pde = PhiTildePde::new(model, riccati, &tg)?;
    let values = solve_backward(&tg, &pde)?;
    Ok(DecouplingField::from_values(
        tg,
        FieldKind::PhiTilde,
        values,
        model.hash(),
    ))
}

/// Candidate formulas for recovering `Φ` from `Φ̃`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reconstruction {
    /// `Φ(t, ν) = η_t Φ̃(t, η_t ν)`.
    Scaled,
    /// `Φ(t, ν) = η_t⁻¹ Φ̃(t, η_t⁻¹ ν)`.
    InverseScaled,
}

/// Rebuild `Φ` on `grid` from `Φ̃`; time nodes must coincide.
pub fn reconstruct_phi(
    tilde: &DecouplingField,
    riccati: &RiccatiSolution,
    grid: &FieldGrid,
    variant: Reconstruction,
) -> Result<DecouplingField> {
    if tilde.grid.nt != grid.nt || tilde.grid.horizon != grid.horizon {
        return Err(Error::InvalidParameter(
            "reconstruction needs matching time nodes".into(),
        ));
    }
    let mut values = vec![0.0; (grid.nt + 1) * grid.nnu];
    for n in 0..=grid.nt {
        let eta = riccati.eta_of(grid.t(n))?;
        let scale = match variant {
            Reconstruction::Scaled => eta,
            Reconstruction::InverseScaled => 1.0 / eta,
        };
        for j in 0..grid.nnu {
            let x = (scale * grid.nu(j)).clamp(-tilde.grid.half_width, tilde.grid.half_width);
            values[grid.index(n, j)] = scale * tilde.eval_slice(n, x).0;
        }
    }
    Ok(DecouplingField::from_values(
        *grid,
        FieldKind::Reconstructed,
        values,
        tilde.model_hash(),
    ))
}

/// `φ^{N,i}(t, x) = Φ(t, ν^{N,i})` with its derivatives in `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub value: f64,
    /// `∂_{x^j} φ^{N,i}`; zero at `j = i`.
    pub grad: Vec<f64>,
    /// `∂_ννΦ / (N−1)²`, the common value of `∂_{x^j x^τ} φ^{N,i}` for `j, τ ≠ i`.
    pub second: f64,
    pub index: usize,
}

impl Projection {
    /// `∂_{x^j x^τ} φ^{N,i}`.
    pub fn hess(&self, j: usize, tau: usize) -> f64 {
        if j == self.index || tau == self.index {
            0.0
        } else {
            self.second
        }
    }
}

/// Leave-one-out mean `(1/(N−1)) Σ_{j≠i} x^j`.
pub fn leave_one_out_mean(x: &[f64], i: usize) -> f64 {
    let total: f64 = x.iter().sum();
    (total - x[i]) / (x.len() as f64 - 1.0)
}

pub fn projection_phi_ni(field: &DecouplingField, t: f64, x: &[f64], i: usize) -> Result<Projection> {
    let n = x.len();
    if n < 2 || i >= n {
        return Err(Error::InvalidParameter(format!(
            "projection needs N >= 2 and i < N (N={n}, i={i})"
        )));
    }
    let nu = leave_one_out_mean(x, i);
    let (v, d, dd) = field.eval(t, nu)?;
    let inv = 1.0 / (n as f64 - 1.0);
    let grad = (0..n).map(|j| if j == i { 0.0 } else { d * inv }).collect();
    Ok(Projection {
        value: v,
        grad,
        second: dd * inv * inv,
        index: i,
    })
}

/// Both sides of
/// `(1/(N−1)²) Σ_{j≠i} Σ_{τ≠j} |x^j − x^τ| ≤ ((2N−3)/(N−1)²) Σ_{j≠i} |x^i − x^j|`.
pub fn leave_one_out_inequality(x: &[f64], i: usize) -> (f64, f64) {
    let n = x.len();
    let m = (n as f64 - 1.0).powi(2);
    let mut lhs = 0.0;
    for j in (0..n).filter(|&j| j != i) {
        for tau in (0..n).filter(|&tau| tau != j) {
            lhs += (x[j] - x[tau]).abs();
        }
    }
    let rhs: f64 = (0..n)
        .filter(|&j| j != i)
        .map(|j| (x[i] - x[j]).abs())
        .sum();
    (lhs / m, (2.0 * n as f64 - 3.0) / m * rhs)
}
