//! Master-equation layer: `U(t, x, ν) = P_t x + Φ(t, ν)`, the value
//! `V = ½P_t x² + Φ x + c`, grid residuals of both master equations, a Monte
//! Carlo value estimator and the adjoint reconstruction check.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::ControlMap;
use crate::error::{Error, Result};
use crate::field::{
    phi_residual, solve_backward, BackwardPde, DecouplingField, FieldGrid, FieldKind,
    ResidualProfile,
};
use crate::model::ModelSpec;
use crate::numerics::{dyadic_orders, mean_and_se, UniformStencils};
use crate::riccati::RiccatiSolution;
use crate::simulate::Equilibrium;
use crate::streams::{Role, StreamKey};

pub const DEFAULT_NX: usize = 21;
pub const DEFAULT_X_HALF_WIDTH: f64 = 2.0;

/// Uniform `x` axis on `[−half_width, half_width]` used for residual checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XAxis {
    pub nx: usize,
    pub half_width: f64,
}

impl Default for XAxis {
    fn default() -> Self {
        XAxis {
            nx: DEFAULT_NX,
            half_width: DEFAULT_X_HALF_WIDTH,
        }
    }
}

impl XAxis {
    pub fn new(nx: usize, half_width: f64) -> Result<Self> {
        if nx < 6 || !(half_width > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "x axis needs nx >= 6 and a positive half-width (nx={nx}, half_width={half_width})"
            )));
        }
        Ok(XAxis { nx, half_width })
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / (self.nx - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.dx()
    }
}

/// `U` and its derivatives at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UDerivatives {
    pub u: f64,
    pub u_x: f64,
    pub u_nu: f64,
    pub u_nunu: f64,
    pub u_xx: f64,
    pub u_xnu: f64,
}

/// `U = P x + Φ` with an optional offset `c` for the value `V`.
#[derive(Debug, Clone)]
pub struct MasterField<'a> {
    riccati: &'a RiccatiSolution,
    field: &'a DecouplingField,
    offset: Option<DecouplingField>,
    /// `P` at the field's time nodes.
    p: Vec<f64>,
}

/// Assemble `U` from a solved gain and decoupling field of the same model.
pub fn assemble_u<'a>(
    model: &ModelSpec,
    riccati: &'a RiccatiSolution,
    field: &'a DecouplingField,
) -> Result<MasterField<'a>> {
    for other in [riccati.model_hash(), field.model_hash()] {
        if other != model.hash() {
            return Err(Error::ModelMismatch {
                left: model.hash().to_string(),
                right: other.to_string(),
            });
        }
    }
    if !matches!(field.kind, FieldKind::Phi | FieldKind::Reconstructed) {
        return Err(Error::InvalidParameter(format!(
            "U needs a Phi field, got {:?}",
            field.kind
        )));
    }
    let p = field
        .grid
        .t_nodes()
        .iter()
        .map(|&t| riccati.eval_p(t))
        .collect::<Result<_>>()?;
    Ok(MasterField {
        riccati,
        field,
        offset: None,
        p,
    })
}

impl<'a> MasterField<'a> {
    pub fn riccati(&self) -> &'a RiccatiSolution {
        self.riccati
    }

    pub fn field(&self) -> &'a DecouplingField {
        self.field
    }

    pub fn grid(&self) -> &FieldGrid {
        &self.field.grid
    }

    pub fn offset(&self) -> Option<&DecouplingField> {
        self.offset.as_ref()
    }

    pub fn u(&self, t: f64, x: f64, nu: f64) -> Result<f64> {
        let p = self.riccati.eval_p(t)?;
        Ok(p * x + self.field.eval(t, nu)?.0)
    }

    pub fn derivatives(&self, t: f64, x: f64, nu: f64) -> Result<UDerivatives> {
        let p = self.riccati.eval_p(t)?;
        let (phi, d, dd) = self.field.eval(t, nu)?;
        Ok(UDerivatives {
            u: p * x + phi,
            u_x: p,
            u_nu: d,
            u_nunu: dd,
            u_xx: 0.0,
            u_xnu: 0.0,
        })
    }

    /// `𝔼[U(t, ξ, ν)]` for any `ξ` with mean `ν`, which is `U(t, ν, ν)`.
    pub fn mean_u(&self, t: f64, nu: f64) -> Result<f64> {
        self.u(t, nu, nu)
    }

    /// `V(t, x, ν)`; needs [`solve_value_offset`] first.
    pub fn value(&self, t: f64, x: f64, nu: f64) -> Result<f64> {
        let c = self.offset.as_ref().ok_or_else(|| {
            Error::InvalidParameter("value offset has not been solved".into())
        })?;
        let p = self.riccati.eval_p(t)?;
        let phi = self.field.eval(t, nu)?.0;
        Ok(0.5 * p * x * x + phi * x + c.eval(t, nu)?.0)
    }

    fn u_node(&self, n: usize, x: f64, j: usize) -> f64 {
        self.p[n] * x + self.field.at(n, j)
    }

    fn v_node(&self, c: &DecouplingField, n: usize, x: f64, j: usize) -> f64 {
        0.5 * self.p[n] * x * x + self.field.at(n, j) * x + c.at(n, j)
    }
}

/// `(𝔼[U], H)` at a field node, where `H = −B h(κ) + f(ν) + b(κ)` and
/// `κ = ρ(−R⁻¹B 𝔼[U])`.
fn closure_terms(model: &ModelSpec, control: &ControlMap, p: f64, phi: f64, nu: f64) -> Result<(f64, f64)> {
    let eu = p * nu + phi;
    let kappa = control.solver().rho(-control.rb() * eu)?;
    let h = -model.b * model.h.eval(kappa) + model.f.eval(nu) + model.b_fn.eval(kappa);
    Ok((eu, h))
}

/// Fourth-order finite-difference derivatives of a function on the
/// `(t, x, ν)` product grid.
struct GridDerivs {
    v: f64,
    t: f64,
    x: f64,
    xx: f64,
    nu: f64,
    nunu: f64,
    xnu: f64,
}

fn apply(stencil: (isize, &[f64]), i: usize, f: impl Fn(usize) -> f64) -> f64 {
    let (start, w) = stencil;
    w.iter()
        .enumerate()
        .map(|(k, wk)| wk * f((i as isize + start + k as isize) as usize))
        .sum()
}

fn grid_derivs(
    st: &UniformStencils,
    grid: &FieldGrid,
    axis: &XAxis,
    value: &impl Fn(usize, usize, usize) -> f64,
    (n, i, j): (usize, usize, usize),
) -> GridDerivs {
    let (ntn, nx, nnu) = (grid.nt + 1, axis.nx, grid.nnu);
    let (dt, dx, dnu) = (grid.dt(), axis.dx(), grid.dnu());
    let d_nu = |ii: usize| apply(st.d1_stencil(j, nnu), j, |jj| value(n, ii, jj));
    GridDerivs {
        v: value(n, i, j),
        t: apply(st.d1_stencil(n, ntn), n, |nn| value(nn, i, j)) / dt,
        x: apply(st.d1_stencil(i, nx), i, |ii| value(n, ii, j)) / dx,
        xx: apply(st.d2_stencil(i, nx), i, |ii| value(n, ii, j)) / (dx * dx),
        nu: d_nu(i) / dnu,
        nunu: apply(st.d2_stencil(j, nnu), j, |jj| value(n, i, jj)) / (dnu * dnu),
        xnu: apply(st.d1_stencil(i, nx), i, d_nu) / (dx * dnu),
    }
}

/// Grid sizes recorded in a [`ResidualReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportGrid {
    pub nt: usize,
    pub nnu: usize,
    pub nx: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub max_residual: f64,
    pub mean_residual: f64,
    pub grid: ReportGrid,
    /// Empirical order against the next coarser grid, when known.
    pub refinement_slope: Option<f64>,
}

/// Max and mean of `|residual(n, i, j, derivs)|` over all times, the x axis
/// and `|ν| ≤ L/2`. The closure also receives per-node closure terms.
fn residual_over_grid(
    mf: &MasterField,
    model: &ModelSpec,
    axis: &XAxis,
    value: impl Fn(usize, usize, usize) -> f64 + Sync,
    residual: impl Fn(&GridDerivs, Node) -> f64 + Sync,
) -> Result<ResidualReport> {
    let grid = *mf.grid();
    let control = ControlMap::new(model, mf.riccati)?;
    let st = UniformStencils::new();
    let window: Vec<usize> = (0..grid.nnu)
        .filter(|&j| grid.nu(j).abs() <= 0.5 * grid.half_width + 1e-12)
        .collect();
    let rows = (0..=grid.nt)
        .into_par_iter()
        .map(|n| -> Result<(f64, f64)> {
            let (mut max, mut sum) = (0.0f64, 0.0);
            for &j in &window {
                let nu = grid.nu(j);
                let (eu, h) = closure_terms(model, &control, mf.p[n], mf.field.at(n, j), nu)?;
                for i in 0..axis.nx {
                    let d = grid_derivs(&st, &grid, axis, &value, (n, i, j));
                    let node = Node {
                        x: axis.x(i),
                        nu,
                        eu,
                        h,
                    };
                    let r = residual(&d, node).abs();
                    max = max.max(r);
                    sum += r;
                }
            }
            Ok((max, sum))
        })
        .collect::<Result<Vec<_>>>()?;
    let count = (rows.len() * window.len() * axis.nx).max(1);
    let max = rows.iter().fold(0.0f64, |m, r| m.max(r.0));
    let sum: f64 = rows.iter().map(|r| r.1).sum();
    Ok(ResidualReport {
        max_residual: max,
        mean_residual: sum / count as f64,
        grid: ReportGrid {
            nt: grid.nt,
            nnu: grid.nnu,
            nx: axis.nx,
        },
        refinement_slope: None,
    })
}

#[derive(Clone, Copy)]
struct Node {
    x: f64,
    nu: f64,
    eu: f64,
    h: f64,
}

/// Residual of the vectorial master equation for `U`, with every derivative
/// taken by finite differences of grid values of `U`.
pub fn vec_master_residual(mf: &MasterField, model: &ModelSpec, axis: &XAxis) -> Result<ResidualReport> {
    let m = model.clone();
    let gain = m.gain();
    let var = m.sigma * m.sigma + m.sigma0 * m.sigma0;
    let s02 = m.sigma0 * m.sigma0;
    residual_over_grid(
        mf,
        model,
        axis,
        |n, i, j| mf.u_node(n, axis.x(i), j),
        |d, k| {
            d.t + d.x * (m.a * k.x - gain * d.v + k.h)
                + 0.5 * var * d.xx
                + d.nu * (m.a * k.nu - gain * k.eu + k.h)
                + 0.5 * s02 * d.nunu
                + s02 * d.xnu
                + m.a * d.v
                + m.q * (k.x + m.l.eval(k.nu))
        },
    )
}

/// Residual of the full master equation for `V = ½P x² + Φ x + c`.
pub fn master_residual(mf: &MasterField, model: &ModelSpec, axis: &XAxis) -> Result<ResidualReport> {
    let c = mf.offset.as_ref().ok_or_else(|| {
        Error::InvalidParameter("value offset has not been solved".into())
    })?;
    let m = model.clone();
    let gain = m.gain();
    let var = m.sigma * m.sigma + m.sigma0 * m.sigma0;
    let s02 = m.sigma0 * m.sigma0;
    residual_over_grid(
        mf,
        model,
        axis,
        |n, i, j| mf.v_node(c, n, axis.x(i), j),
        |d, k| {
            let run = k.x + m.l.eval(k.nu);
            d.t - 0.5 * gain * d.x * d.x
                + d.x * (m.a * k.x + k.h)
                + 0.5 * var * d.xx
                + d.nu * (m.a * k.nu - gain * k.eu + k.h)
                + 0.5 * s02 * d.nunu
                + s02 * d.xnu
                + 0.5 * m.q * run * run
        },
    )
}

/// Sizes of the `x²` and `x¹` collections of the full master equation under
/// the quadratic ansatz, with the tolerance they are held to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnsatzCollections {
    /// `max_t |½(Ṗ + 2AP − γP² + Q)|` on the field's time nodes.
    pub x2: f64,
    /// Interior residual of the `Φ` equation.
    pub x1: f64,
    pub tol: f64,
}

impl AnsatzCollections {
    pub fn passed(&self) -> bool {
        self.x2 <= self.tol && self.x1 <= self.tol
    }
}

/// Tolerance `2 (Δt² + Δν²)(1 + ‖Φ‖∞)` for grid-level identities.
pub fn grid_tolerance(field: &DecouplingField) -> f64 {
    let g = &field.grid;
    2.0 * (g.dt() * g.dt() + g.dnu() * g.dnu()) * (1.0 + field.sup_norm())
}

pub fn ansatz_collections(mf: &MasterField, model: &ModelSpec) -> Result<AnsatzCollections> {
    let grid = mf.grid();
    let st = UniformStencils::new();
    let gain = model.gain();
    let x2 = (0..=grid.nt)
        .map(|n| {
            let p = mf.p[n];
            let pdot = st.d1(&mf.p, n, grid.dt());
            (0.5 * (pdot + 2.0 * model.a * p - gain * p * p + model.q)).abs()
        })
        .fold(0.0, f64::max);
    let profile: ResidualProfile = phi_residual(model, mf.riccati, mf.field)?;
    Ok(AnsatzCollections {
        x2,
        x1: profile.interior_max,
        tol: grid_tolerance(mf.field),
    })
}

/// The `x⁰` collection: a linear backward equation for `c` with velocity
/// `aν − γΦ + H` and frozen source.
struct OffsetPde {
    diffusion: f64,
    g_weight: f64,
    g: crate::model::ScalarFn,
    nnu: usize,
    beta: Vec<f64>,
    source: Vec<f64>,
}

impl OffsetPde {
    fn new(mf: &MasterField, model: &ModelSpec) -> Result<Self> {
        let grid = *mf.grid();
        let control = ControlMap::new(model, mf.riccati)?;
        let gain = model.gain();
        let var = model.sigma * model.sigma + model.sigma0 * model.sigma0;
        let s02 = model.sigma0 * model.sigma0;
        let size = (grid.nt + 1) * grid.nnu;
        let mut beta = Vec::with_capacity(size);
        let mut source = Vec::with_capacity(size);
        for n in 0..=grid.nt {
            let p = mf.p[n];
            let a = model.a - gain * p;
            for j in 0..grid.nnu {
                let nu = grid.nu(j);
                let k = n * grid.nnu + j;
                let (phi, dphi) = (mf.field.phi[k], mf.field.dphi[k]);
                let (_, h) = closure_terms(model, &control, p, phi, nu)?;
                let l = model.l.eval(nu);
                beta.push(a * nu - gain * phi + h);
                source.push(
                    -0.5 * gain * phi * phi
                        + phi * h
                        + 0.5 * p * var
                        + s02 * dphi
                        + 0.5 * model.q * l * l,
                );
            }
        }
        Ok(OffsetPde {
            diffusion: 0.5 * s02,
            g_weight: model.g_weight,
            g: model.g,
            nnu: grid.nnu,
            beta,
            source,
        })
    }
}

impl BackwardPde for OffsetPde {
    fn diffusion(&self, _n: usize) -> f64 {
        self.diffusion
    }

    fn linear_rate(&self, _n: usize) -> f64 {
        0.0
    }

    fn terminal(&self, nu: f64) -> f64 {
        let g = self.g.eval(nu);
        0.5 * self.g_weight * g * g
    }

    fn velocity_source(&self, n: usize, j: usize, _nu: f64, _c: f64) -> Result<(f64, f64)> {
        let k = n * self.nnu + j;
        Ok((self.beta[k], self.source[k]))
    }

    fn is_linear(&self) -> bool {
        true
    }
}

/// Check the `x²`/`x¹` collections and solve the `x⁰` collection for the
/// offset `c` on the field grid.
pub fn solve_value_offset<'a>(mut mf: MasterField<'a>, model: &ModelSpec) -> Result<MasterField<'a>> {
    let col = ansatz_collections(&mf, model)?;
    if col.x2 > col.tol {
        return Err(Error::AnsatzMismatch {
            which: "x^2",
            value: col.x2,
            tol: col.tol,
        });
    }
    if col.x1 > col.tol {
        return Err(Error::AnsatzMismatch {
            which: "x^1",
            value: col.x1,
            tol: col.tol,
        });
    }
    let pde = OffsetPde::new(&mf, model)?;
    let grid = *mf.grid();
    let values = solve_backward(&grid, &pde)?;
    mf.offset = Some(DecouplingField::from_values(
        grid,
        FieldKind::Offset,
        values,
        model.hash(),
    ));
    Ok(mf)
}

/// One resolution of a master-equation refinement study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MasterLevel {
    pub phi: ResidualProfile,
    pub vec_master: ResidualReport,
    pub master: ResidualReport,
    pub collections: AnsatzCollections,
}

/// Fill `refinement_slope` from consecutive max residuals.
pub fn attach_refinement_slopes(levels: &mut [MasterLevel]) {
    let vec_orders = dyadic_orders(&levels.iter().map(|l| l.vec_master.max_residual).collect::<Vec<_>>());
    let full_orders = dyadic_orders(&levels.iter().map(|l| l.master.max_residual).collect::<Vec<_>>());
    for (k, level) in levels.iter_mut().enumerate().skip(1) {
        level.vec_master.refinement_slope = Some(vec_orders[k - 1]);
        level.master.refinement_slope = Some(full_orders[k - 1]);
    }
}

/// Residuals of both master equations for a solved `Φ`.
pub fn master_level(
    model: &ModelSpec,
    riccati: &RiccatiSolution,
    field: &DecouplingField,
    axis: &XAxis,
) -> Result<MasterLevel> {
    let mf = assemble_u(model, riccati, field)?;
    let collections = ansatz_collections(&mf, model)?;
    let vec_master = vec_master_residual(&mf, model, axis)?;
    let mf = solve_value_offset(mf, model)?;
    let master = master_residual(&mf, model, axis)?;
    Ok(MasterLevel {
        phi: phi_residual(model, riccati, field)?,
        vec_master,
        master,
        collections,
    })
}

/// Where the value is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueProbe {
    pub t0: f64,
    pub x0: f64,
    pub nu0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub n_steps: usize,
}

/// Per-step drivers of one equilibrium path from `(t0, x0, ν0)`.
struct PathWalker<'e, 'a> {
    eq: &'e Equilibrium<'a>,
    t0: f64,
    dt: f64,
    n_steps: usize,
}

impl PathWalker<'_, '_> {
    fn exits(&self, nu: f64) -> bool {
        !(nu.abs() <= self.eq.field.grid.half_width)
    }
}

/// Monte Carlo estimate of `V(t0, x0, ν0)`: `ν*` from `ν0` under common
/// noise, the tagged state from `x0`, trapezoidal running cost plus the
/// terminal cost `½G(x_T + g(ν_T))²`.
pub fn value_v_monte_carlo(
    model: &ModelSpec,
    mf: &MasterField,
    probe: ValueProbe,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_paths < 2 || n_steps == 0 {
        return Err(Error::InvalidParameter(format!(
            "need n_paths >= 2 and n_steps >= 1 (got {n_paths}, {n_steps})"
        )));
    }
    let eq = Equilibrium::new(model, mf.riccati, mf.field)?;
    let half = mf.grid().half_width;
    if !(probe.nu0.abs() <= half) {
        return Err(Error::OutOfDomain {
            what: "nu0",
            value: probe.nu0,
            lo: -half,
            hi: half,
        });
    }
    if !(probe.t0 >= 0.0 && probe.t0 < model.horizon) {
        return Err(Error::OutOfDomain {
            what: "t0",
            value: probe.t0,
            lo: 0.0,
            hi: model.horizon,
        });
    }
    let walker = PathWalker {
        eq: &eq,
        t0: probe.t0,
        dt: (model.horizon - probe.t0) / n_steps as f64,
        n_steps,
    };
    let costs = (0..n_paths as u64)
        .into_par_iter()
        .map(|path| path_cost(&walker, probe, seed, path))
        .collect::<Result<Vec<_>>>()?;
    let exits = costs.iter().filter(|c| c.is_none()).count();
    if exits > 0 {
        return Err(Error::PathExit {
            fraction: exits as f64 / n_paths as f64,
            half_width: half,
        });
    }
    let values: Vec<f64> = costs.into_iter().flatten().collect();
    let (estimate, std_error) = mean_and_se(&values);
    Ok(McEstimate {
        estimate,
        std_error,
        n_paths,
        n_steps,
    })
}

/// Cost of one path, or `None` when `ν` leaves the field domain.
fn path_cost(w: &PathWalker, probe: ValueProbe, seed: u64, path: u64) -> Result<Option<f64>> {
    let m = w.eq.model;
    let gain = m.gain();
    let sq = w.dt.sqrt();
    let mut common = StreamKey::new(seed, path, 0, Role::Common).rng();
    let mut idio = StreamKey::new(seed, path, 0, Role::Idiosyncratic).rng();
    let (mut x, mut nu) = (probe.x0, probe.nu0);
    let running = |s: &crate::simulate::EqState, x: f64, nu: f64| {
        let u = s.p * x + s.phi;
        let e = x + m.l.eval(nu);
        0.5 * (m.q * e * e + gain * u * u)
    };
    let mut total = 0.0;
    let mut prev = None;
    for k in 0..=w.n_steps {
        let t = w.t0 + k as f64 * w.dt;
        if w.exits(nu) {
            return Ok(None);
        }
        let s = w.eq.state(t, nu)?;
        let c = running(&s, x, nu);
        if let Some(p) = prev {
            total += 0.5 * w.dt * (p + c);
        }
        prev = Some(c);
        if k < w.n_steps {
            let dw0: f64 = sq * common.sample::<f64, _>(StandardNormal);
            let dw: f64 = sq * idio.sample::<f64, _>(StandardNormal);
            let x_next = x + w.eq.x_drift(&s, x) * w.dt + m.sigma * dw + m.sigma0 * dw0;
            nu += w.eq.nu_drift(&s, nu) * w.dt + m.sigma0 * dw0;
            x = x_next;
        }
    }
    let end = x + m.g.eval(nu);
    Ok(Some(total + 0.5 * m.g_weight * end * end))
}

/// Backward-dynamics residual of `y = P x + Φ(t, ν)` along simulated paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjointReport {
    pub n_steps: usize,
    pub dt: f64,
    /// Root mean square over paths of `sup_t` of the accumulated residual.
    pub rms_sup_residual: f64,
    /// Mean and standard error of the accumulated residual at `T`.
    pub mean_terminal_residual: f64,
    pub terminal_se: f64,
    /// `max |(−R⁻¹B y − h(μ)) − α_feedback|` along all paths.
    pub max_control_gap: f64,
    /// `max |μ + h(μ) + R⁻¹B(Pν + Φ)|` along all paths.
    pub max_consistency_residual: f64,
}

/// Integrate the equilibrium from `(0, x0, ν0)` and accumulate
/// `Δy + (A y + Q x + Q l(ν))Δt − z ΔW − z⁰ ΔW⁰ − ½σ₀²∂ννΦ((ΔW⁰)² − Δt)` with
/// `z = Pσ` and `z⁰ = Pσ₀ + σ₀∂νΦ`.
pub fn adjoint_residual(
    model: &ModelSpec,
    mf: &MasterField,
    x0: f64,
    nu0: f64,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<AdjointReport> {
    if n_paths < 2 || n_steps == 0 {
        return Err(Error::InvalidParameter(format!(
            "need n_paths >= 2 and n_steps >= 1 (got {n_paths}, {n_steps})"
        )));
    }
    let eq = Equilibrium::new(model, mf.riccati, mf.field)?;
    let m = model;
    let dt = m.horizon / n_steps as f64;
    let sq = dt.sqrt();
    let s02 = m.sigma0 * m.sigma0;
    let rb = m.b / m.r;
    let half = mf.grid().half_width;
    let rows = (0..n_paths as u64)
        .into_par_iter()
        .map(|path| -> Result<(f64, f64, f64, f64)> {
            let mut common = StreamKey::new(seed, path, 0, Role::Common).rng();
            let mut idio = StreamKey::new(seed, path, 0, Role::Idiosyncratic).rng();
            let (mut x, mut nu) = (x0, nu0);
            let mut s = eq.state(0.0, nu)?;
            let (mut acc, mut sup, mut gap, mut cons) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for k in 0..n_steps {
                let y = s.p * x + s.phi;
                let open_loop = -rb * y - m.h.eval(s.mu);
                gap = gap.max((open_loop - eq.feedback_control(&s, x)).abs());
                cons = cons.max(eq.consistency_residual(&s, nu).abs());
                let dw0: f64 = sq * common.sample::<f64, _>(StandardNormal);
                let dw: f64 = sq * idio.sample::<f64, _>(StandardNormal);
                let x_next = x + eq.x_drift(&s, x) * dt + m.sigma * dw + m.sigma0 * dw0;
                let nu_next = nu + eq.nu_drift(&s, nu) * dt + m.sigma0 * dw0;
                if !(nu_next.abs() <= half) {
                    return Err(Error::PathExit {
                        fraction: 1.0 / n_paths as f64,
                        half_width: half,
                    });
                }
                let t_next = (k + 1) as f64 * dt;
                let s_next = eq.state(t_next, nu_next)?;
                let y_next = s_next.p * x_next + s_next.phi;
                let z = s.p * m.sigma;
                let z0 = s.p * m.sigma0 + m.sigma0 * s.dphi;
                acc += y_next - y + (m.a * y + m.q * x + m.q * m.l.eval(nu)) * dt
                    - z * dw
                    - z0 * dw0
                    - 0.5 * s.ddphi * s02 * (dw0 * dw0 - dt);
                sup = sup.max(acc.abs());
                x = x_next;
                nu = nu_next;
                s = s_next;
            }
            Ok((sup, acc, gap, cons))
        })
        .collect::<Result<Vec<_>>>()?;
    let rms = (rows.iter().map(|r| r.0 * r.0).sum::<f64>() / n_paths as f64).sqrt();
    let terminal: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (mean, se) = mean_and_se(&terminal);
    Ok(AdjointReport {
        n_steps,
        dt,
        rms_sup_residual: rms,
        mean_terminal_residual: mean,
        terminal_se: se,
        max_control_gap: rows.iter().fold(0.0, |a, r| a.max(r.2)),
        max_consistency_residual: rows.iter().fold(0.0, |a, r| a.max(r.3)),
    })
}
