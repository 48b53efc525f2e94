//! Coupled Monte Carlo: the equilibrium population under common noise, the
//! N-player system driven by projected fields, the mean-field limit particles
//! and the propagation-of-chaos statistics.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::{ControlMap, VectorConsistency};
use crate::error::{Error, Result};
use crate::field::{DecouplingField, FieldKind};
use crate::model::{check_assumptions, Mode, ModelSpec};
use crate::numerics::{fit_slope, mean_and_se, SlopeFit};
use crate::riccati::RiccatiSolution;
use crate::streams::{Role, StreamKey};

pub const DEFAULT_STEPS: usize = 800;
pub const DEFAULT_PARTICLES: usize = 10_000;
pub const DEFAULT_REPS: usize = 32;
pub const DEFAULT_N_LIST: [usize; 6] = [8, 16, 32, 64, 128, 256];
/// Replications below this are flagged in sweep reports.
pub const MIN_REPS: usize = 8;
/// Allowed `sup_t |ν*_Δt − ν*_{Δt/2}|` per unit of `Δt·(1 + sup|ν*|)`.
pub const STEP_GAP_FACTOR: f64 = 10.0;

/// Law of the initial states `ξⁱ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum XiLaw {
    Constant { value: f64 },
    Normal { mean: f64, variance: f64 },
    /// `low` or `high` with probability ½ each.
    TwoPoint { low: f64, high: f64 },
}

impl XiLaw {
    pub fn mean(&self) -> f64 {
        match *self {
            XiLaw::Constant { value } => value,
            XiLaw::Normal { mean, .. } => mean,
            XiLaw::TwoPoint { low, high } => 0.5 * (low + high),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            XiLaw::Constant { .. } => 0.0,
            XiLaw::Normal { variance, .. } => variance,
            XiLaw::TwoPoint { low, high } => 0.25 * (high - low) * (high - low),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            XiLaw::Constant { value } => value,
            XiLaw::Normal { mean, variance } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + variance.sqrt() * z
            }
            XiLaw::TwoPoint { low, high } => {
                if rng.random::<bool>() {
                    high
                } else {
                    low
                }
            }
        }
    }
}

impl Default for XiLaw {
    fn default() -> Self {
        XiLaw::Normal {
            mean: 0.0,
            variance: 1.0,
        }
    }
}

/// Simulation controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub n_steps: usize,
    pub n_particles: usize,
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub xi_law: XiLaw,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            n_steps: DEFAULT_STEPS,
            n_particles: DEFAULT_PARTICLES,
            n_list: DEFAULT_N_LIST.to_vec(),
            reps: DEFAULT_REPS,
            seed: 0,
            xi_law: XiLaw::default(),
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 100 {
            return Err(Error::InvalidParameter(format!(
                "n_steps must be >= 100, got {}",
                self.n_steps
            )));
        }
        if let Some(n) = self.n_list.iter().find(|&&n| n < 2) {
            return Err(Error::InvalidParameter(format!("every N must be >= 2, got {n}")));
        }
        if self.reps == 0 {
            return Err(Error::InvalidParameter("reps must be >= 1".into()));
        }
        match self.xi_law {
            XiLaw::Normal { variance, .. } if !(variance >= 0.0) => Err(Error::InvalidParameter(
                format!("xi variance must be >= 0, got {variance}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Feedback quantities of the equilibrium at `(t, ν)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EqState {
    pub p: f64,
    pub phi: f64,
    pub dphi: f64,
    pub ddphi: f64,
    /// `μ = k(t, ν, Φ(t, ν))`.
    pub mu: f64,
    /// `−B h(μ) + f(ν) + b(μ)`.
    pub forcing: f64,
}

/// Model, gain and decoupling field bundled for path simulation.
#[derive(Debug, Clone, Copy)]
pub struct Equilibrium<'a> {
    pub model: &'a ModelSpec,
    pub riccati: &'a RiccatiSolution,
    pub field: &'a DecouplingField,
    control: ControlMap<'a>,
}

impl<'a> Equilibrium<'a> {
    pub fn new(
        model: &'a ModelSpec,
        riccati: &'a RiccatiSolution,
        field: &'a DecouplingField,
    ) -> Result<Self> {
        let control = ControlMap::new(model, riccati)?;
        if field.model_hash() != model.hash() {
            return Err(Error::ModelMismatch {
                left: model.hash().to_string(),
                right: field.model_hash().to_string(),
            });
        }
        if !matches!(field.kind, FieldKind::Phi | FieldKind::Reconstructed) {
            return Err(Error::InvalidParameter(format!(
                "expected a Phi field, got {:?}",
                field.kind
            )));
        }
        Ok(Equilibrium {
            model,
            riccati,
            field,
            control,
        })
    }

    pub fn control(&self) -> &ControlMap<'a> {
        &self.control
    }

    pub fn state(&self, t: f64, nu: f64) -> Result<EqState> {
        let p = self.riccati.eval_p(t)?;
        let (phi, dphi, ddphi) = self.field.eval(t, nu)?;
        let mu = self.control.k_with_p(p, nu, phi)?;
        let m = self.model;
        let forcing = -m.b * m.h.eval(mu) + m.f.eval(nu) + m.b_fn.eval(mu);
        Ok(EqState {
            p,
            phi,
            dphi,
            ddphi,
            mu,
            forcing,
        })
    }

    /// Drift of `ν*`: `(A − γP)ν − γΦ + forcing`.
    pub fn nu_drift(&self, s: &EqState, nu: f64) -> f64 {
        let gain = self.model.gain();
        (self.model.a - gain * s.p) * nu - gain * s.phi + s.forcing
    }

    /// Drift of a player in feedback `α = −R⁻¹B(P x + Φ) − h(μ)`.
    pub fn x_drift(&self, s: &EqState, x: f64) -> f64 {
        self.model.a * x - self.model.gain() * (s.p * x + s.phi) + s.forcing
    }

    /// `α = −R⁻¹B(P x + Φ) − h(μ)`.
    pub fn feedback_control(&self, s: &EqState, x: f64) -> f64 {
        -self.control.rb() * (s.p * x + s.phi) - self.model.h.eval(s.mu)
    }

    /// `μ + h(μ) + R⁻¹B(P ν + Φ)`.
    pub fn consistency_residual(&self, s: &EqState, nu: f64) -> f64 {
        s.mu + self.model.h.eval(s.mu) + self.control.rb() * (s.p * nu + s.phi)
    }
}

/// What produced a [`PathBundle`]; equal tags mean shared noise streams.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingTag {
    pub seed: u64,
    pub replication: u64,
    pub n_players: usize,
    pub n_steps: usize,
    pub model_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleKind {
    MeanField,
    NPlayer,
    Limit,
}

/// Recorded trajectories on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub kind: BundleKind,
    pub tgrid: Vec<f64>,
    /// `W⁰` increments, one per step.
    pub common: Vec<f64>,
    /// `ν*` (or `ν̄`) at every recorded time.
    pub nu_star: Vec<f64>,
    /// `μ*` along `ν*`.
    pub mu_star: Vec<f64>,
    /// Largest consistency residual met along `ν*`.
    pub consistency_residual: f64,
    /// `states[i][k]`.
    pub states: Vec<Vec<f64>>,
    /// `controls[i][k]`.
    pub controls: Vec<Vec<f64>>,
    pub tag: CouplingTag,
}

impl PathBundle {
    /// Empirical mean of the particles at step `k`.
    pub fn particle_mean(&self, k: usize) -> f64 {
        self.states.iter().map(|s| s[k]).sum::<f64>() / self.states.len() as f64
    }
}

fn time_grid(horizon: f64, n_steps: usize) -> Vec<f64> {
    let dt = horizon / n_steps as f64;
    (0..=n_steps).map(|k| k as f64 * dt).collect()
}

/// `W⁰` increments on `n_steps` steps and on twice as many; the coarse ones
/// are pairwise sums of the fine ones.
pub fn common_increments(
    seed: u64,
    replication: u64,
    horizon: f64,
    n_steps: usize,
) -> (Vec<f64>, Vec<f64>) {
    let fine_dt = horizon / (2 * n_steps) as f64;
    let mut rng = StreamKey::new(seed, replication, 0, Role::Common).rng();
    let fine: Vec<f64> = (0..2 * n_steps)
        .map(|_| fine_dt.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let coarse = fine.chunks(2).map(|c| c[0] + c[1]).collect();
    (coarse, fine)
}

/// Idiosyncratic increments for one player.
pub fn idiosyncratic_increments(
    seed: u64,
    replication: u64,
    player: usize,
    horizon: f64,
    n_steps: usize,
) -> Vec<f64> {
    let scale = (horizon / n_steps as f64).sqrt();
    let mut rng = StreamKey::new(seed, replication, player as u64, Role::Idiosyncratic).rng();
    (0..n_steps)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn initial_state(law: &XiLaw, seed: u64, replication: u64, player: usize) -> f64 {
    let mut rng = StreamKey::new(seed, replication, player as u64, Role::Initial).rng();
    law.sample(&mut rng)
}

/// `ν*`, `μ*` and the largest consistency residual, by Euler–Maruyama.
pub struct NuPath {
    pub nu: Vec<f64>,
    pub mu: Vec<f64>,
    pub states: Vec<EqState>,
    pub consistency_residual: f64,
}

pub fn simulate_nu_star(eq: &Equilibrium, nu0: f64, t0: f64, dw0: &[f64]) -> Result<NuPath> {
    let n = dw0.len();
    let dt = (eq.model.horizon - t0) / n as f64;
    let s0 = eq.model.sigma0;
    let mut nu = Vec::with_capacity(n + 1);
    let mut mu = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut worst: f64 = 0.0;
    let mut v = nu0;
    for k in 0..=n {
        let t = t0 + k as f64 * dt;
        let s = eq.state(t, v)?;
        worst = worst.max(eq.consistency_residual(&s, v).abs());
        nu.push(v);
        mu.push(s.mu);
        states.push(s);
        if k < n {
            v += eq.nu_drift(&s, v) * dt + s0 * dw0[k];
        }
    }
    Ok(NuPath {
        nu,
        mu,
        states,
        consistency_residual: worst,
    })
}

/// Equilibrium population: `ν*` plus `K` particles sharing `W⁰`.
///
/// Fails with [`Error::StepTooCoarse`] when halving the step moves `ν*` by
/// more than `STEP_GAP_FACTOR·Δt·(1 + sup|ν*|)`.
pub fn simulate_mfe(eq: &Equilibrium, params: &SimParams, replication: u64) -> Result<PathBundle> {
    params.validate()?;
    let horizon = eq.model.horizon;
    let n = params.n_steps;
    let dt = horizon / n as f64;
    let (dw0, fine) = common_increments(params.seed, replication, horizon, n);
    let coarse = simulate_nu_star(eq, params.xi_law.mean(), 0.0, &dw0)?;
    let refined = simulate_nu_star(eq, params.xi_law.mean(), 0.0, &fine)?;
    let gap = (0..=n)
        .map(|k| (coarse.nu[k] - refined.nu[2 * k]).abs())
        .fold(0.0, f64::max);
    let scale = 1.0 + coarse.nu.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = STEP_GAP_FACTOR * dt * scale;
    if gap > tol {
        return Err(Error::StepTooCoarse { gap, tol });
    }

    let (sigma, s0) = (eq.model.sigma, eq.model.sigma0);
    let paths: Vec<(Vec<f64>, Vec<f64>)> = (0..params.n_particles)
        .into_par_iter()
        .map(|i| {
            let dw = idiosyncratic_increments(params.seed, replication, i, horizon, n);
            let mut x = initial_state(&params.xi_law, params.seed, replication, i);
            let mut xs = Vec::with_capacity(n + 1);
            let mut us = Vec::with_capacity(n + 1);
            for k in 0..=n {
                let s = &coarse.states[k];
                xs.push(x);
                us.push(eq.feedback_control(s, x));
                if k < n {
                    x += eq.x_drift(s, x) * dt + sigma * dw[k] + s0 * dw0[k];
                }
            }
            (xs, us)
        })
        .collect();
    let (states, controls) = paths.into_iter().unzip();
    Ok(PathBundle {
        kind: BundleKind::MeanField,
        tgrid: time_grid(horizon, n),
        common: dw0,
        nu_star: coarse.nu,
        mu_star: coarse.mu,
        consistency_residual: coarse.consistency_residual,
        states,
        controls,
        tag: CouplingTag {
            seed: params.seed,
            replication,
            n_players: params.n_particles,
            n_steps: n,
            model_hash: eq.model.hash().to_string(),
        },
    })
}

/// Outcome of the conditional-mean check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanGate {
    /// Largest `|mean − ν*| / SE` over recorded times with positive spread.
    pub max_z: f64,
    pub worst_step: usize,
    pub passed: bool,
}

/// Compare the empirical particle mean with `ν*` at every recorded time,
/// in units of the sample standard error.
pub fn conditional_mean_gate(bundle: &PathBundle, z: f64) -> MeanGate {
    let mut gate = MeanGate {
        max_z: 0.0,
        worst_step: 0,
        passed: true,
    };
    let mut column = vec![0.0; bundle.states.len()];
    for k in 0..bundle.tgrid.len() {
        for (c, s) in column.iter_mut().zip(&bundle.states) {
            *c = s[k];
        }
        let (mean, se) = mean_and_se(&column);
        let gap = (mean - bundle.nu_star[k]).abs();
        let score = if se > 0.0 {
            gap / se
        } else if gap <= 1e-12 * (1.0 + mean.abs()) {
            0.0
        } else {
            f64::INFINITY
        };
        if score > gate.max_z {
            gate.max_z = score;
            gate.worst_step = k;
        }
    }
    gate.passed = gate.max_z <= z;
    gate
}

fn loo_means(x: &[f64], out: &mut [f64]) {
    let total: f64 = x.iter().sum();
    let inv = 1.0 / (x.len() as f64 - 1.0);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (total - v) * inv;
    }
}

/// N players driven by `φ^{N,i}(t, x) = Φ(t, ν^{N,i})` and the leave-one-out
/// consistency map.
pub fn simulate_nplayer_projected(
    eq: &Equilibrium,
    params: &SimParams,
    n_players: usize,
    replication: u64,
) -> Result<PathBundle> {
    params.validate()?;
    let report = check_assumptions(eq.model, Mode::NPlayer);
    if !report.passed() {
        return Err(Error::Assumption(report.failures.join("; ")));
    }
    let m = eq.model;
    let horizon = m.horizon;
    let n = params.n_steps;
    let dt = horizon / n as f64;
    let gain = m.gain();
    let rb = eq.control().rb();
    let (dw0, _) = common_increments(params.seed, replication, horizon, n);
    let dw: Vec<Vec<f64>> = (0..n_players)
        .map(|i| idiosyncratic_increments(params.seed, replication, i, horizon, n))
        .collect();
    let mut x: Vec<f64> = (0..n_players)
        .map(|i| initial_state(&params.xi_law, params.seed, replication, i))
        .collect();
    let vc = VectorConsistency::new(n_players, m.h)?;

    let mut states = vec![Vec::with_capacity(n + 1); n_players];
    let mut controls = vec![Vec::with_capacity(n + 1); n_players];
    let mut nu_loo = vec![0.0; n_players];
    let mut phi = vec![0.0; n_players];
    let mut lambda = vec![0.0; n_players];
    let mut delta = vec![0.0; n_players];
    let mut mu: Option<Vec<f64>> = None;
    let mut nu_bar = Vec::with_capacity(n + 1);
    let mut mu_bar = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 * dt;
        let p = eq.riccati.eval_p(t)?;
        loo_means(&x, &mut nu_loo);
        for (ph, &v) in phi.iter_mut().zip(&nu_loo) {
            *ph = eq.field.eval(t, v)?.0;
        }
        loo_means(&phi, &mut lambda);
        for i in 0..n_players {
            delta[i] = -rb * (p * nu_loo[i] + lambda[i]);
        }
        let mu_k = match mu.as_mut() {
            Some(prev) => {
                vc.solve_in_place(&delta, prev)?;
                prev
            }
            None => mu.insert(vc.rho_n(&delta)?),
        };
        nu_bar.push(x.iter().sum::<f64>() / n_players as f64);
        mu_bar.push(mu_k.iter().sum::<f64>() / n_players as f64);
        for i in 0..n_players {
            let hmu = m.h.eval(mu_k[i]);
            states[i].push(x[i]);
            controls[i].push(-rb * (p * x[i] + phi[i]) - hmu);
            if k < n {
                let drift = m.a * x[i] - gain * (p * x[i] + phi[i]) - m.b * hmu;
                x[i] += drift * dt + m.sigma * dw[i][k] + m.sigma0 * dw0[k];
            }
        }
    }
    Ok(PathBundle {
        kind: BundleKind::NPlayer,
        tgrid: time_grid(horizon, n),
        common: dw0,
        nu_star: nu_bar,
        mu_star: mu_bar,
        consistency_residual: 0.0,
        states,
        controls,
        tag: CouplingTag {
            seed: params.seed,
            replication,
            n_players,
            n_steps: n,
            model_hash: m.hash().to_string(),
        },
    })
}

/// Mean-field limit particles `x̄ⁱ` on the same streams as the matching
/// N-player run; `ν̄` follows its own closed equation.
pub fn simulate_limit_particles(
    eq: &Equilibrium,
    params: &SimParams,
    n_players: usize,
    replication: u64,
) -> Result<PathBundle> {
    params.validate()?;
    let m = eq.model;
    let horizon = m.horizon;
    let n = params.n_steps;
    let dt = horizon / n as f64;
    let (dw0, _) = common_increments(params.seed, replication, horizon, n);
    let path = simulate_nu_star(eq, params.xi_law.mean(), 0.0, &dw0)?;
    let mut states = Vec::with_capacity(n_players);
    let mut controls = Vec::with_capacity(n_players);
    for i in 0..n_players {
        let dw = idiosyncratic_increments(params.seed, replication, i, horizon, n);
        let mut x = initial_state(&params.xi_law, params.seed, replication, i);
        let mut xs = Vec::with_capacity(n + 1);
        let mut us = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let s = &path.states[k];
            xs.push(x);
            us.push(eq.feedback_control(s, x));
            if k < n {
                x += eq.x_drift(s, x) * dt + m.sigma * dw[k] + m.sigma0 * dw0[k];
            }
        }
        states.push(xs);
        controls.push(us);
    }
    Ok(PathBundle {
        kind: BundleKind::Limit,
        tgrid: time_grid(horizon, n),
        common: dw0,
        nu_star: path.nu,
        mu_star: path.mu,
        consistency_residual: path.consistency_residual,
        states,
        controls,
        tag: CouplingTag {
            seed: params.seed,
            replication,
            n_players,
            n_steps: n,
            model_hash: m.hash().to_string(),
        },
    })
}

/// Gaps between one coupled N-player/limit pair, averaged over players.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChaosSample {
    #[serde(rename = "N")]
    pub n: usize,
    pub replication: u64,
    /// `avg_i sup_t |xⁱ − x̄ⁱ|`.
    pub sup_gap: f64,
    /// `avg_i sup_t |xⁱ − x̄ⁱ|²`.
    pub sup_gap_sq: f64,
    /// `avg_i sup_t |ν^{N,i}_{x̄} − ν̄|²`.
    pub nu_gap_sq: f64,
    pub seed: u64,
}

pub fn chaos_statistics(np: &PathBundle, limit: &PathBundle) -> Result<ChaosSample> {
    if np.tag != limit.tag || np.common != limit.common {
        return Err(Error::StreamMismatch(format!(
            "{:?} vs {:?}",
            np.tag, limit.tag
        )));
    }
    if np.kind != BundleKind::NPlayer || limit.kind != BundleKind::Limit {
        return Err(Error::StreamMismatch(format!(
            "expected an N-player and a limit bundle, got {:?} and {:?}",
            np.kind, limit.kind
        )));
    }
    let n = np.states.len();
    let steps = np.tgrid.len();
    let mut sup_gap = 0.0;
    let mut sup_gap_sq = 0.0;
    for (a, b) in np.states.iter().zip(&limit.states) {
        let s = a
            .iter()
            .zip(b)
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        sup_gap += s;
        sup_gap_sq += s * s;
    }
    let mut nu_sup = vec![0.0f64; n];
    let mut column = vec![0.0; n];
    let mut loo = vec![0.0; n];
    for k in 0..steps {
        for (c, s) in column.iter_mut().zip(&limit.states) {
            *c = s[k];
        }
        loo_means(&column, &mut loo);
        for (sup, &v) in nu_sup.iter_mut().zip(&loo) {
            *sup = sup.max((v - limit.nu_star[k]).abs());
        }
    }
    let nu_gap_sq = nu_sup.iter().map(|s| s * s).sum::<f64>() / n as f64;
    Ok(ChaosSample {
        n,
        replication: np.tag.replication,
        sup_gap: sup_gap / n as f64,
        sup_gap_sq: sup_gap_sq / n as f64,
        nu_gap_sq,
        seed: np.tag.seed,
    })
}

/// Replication averages for one `N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerN {
    #[serde(rename = "N")]
    pub n: usize,
    pub e_sup_sq_gap: f64,
    pub e_sup_sq_gap_se: f64,
    pub e_sup_gap: f64,
    pub e_sup_gap_se: f64,
    pub nu_gap_sq: f64,
    pub nu_gap_sq_se: f64,
}

/// Fitted log-log slope with a normal confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedSlope {
    pub slope: f64,
    pub slope_se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl FittedSlope {
    fn from_fit(fit: SlopeFit) -> Self {
        let (ci_low, ci_high) = fit.interval(1.96);
        FittedSlope {
            slope: fit.slope,
            slope_se: fit.slope_se,
            ci_low,
            ci_high,
        }
    }

    pub fn within(&self, lo: f64, hi: f64) -> bool {
        self.slope >= lo && self.slope <= hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub model_hash: String,
    pub per_n: Vec<PerN>,
    pub slope_sup_sq_gap: Option<FittedSlope>,
    pub slope_sup_gap: Option<FittedSlope>,
    pub slope_nu_gap_sq: Option<FittedSlope>,
    /// All gaps sit at round-off, so no slope is fitted.
    pub degenerate: bool,
    pub insufficient_replications: bool,
    #[serde(skip)]
    pub samples: Vec<ChaosSample>,
}

impl ConvergenceReport {
    /// CSV with columns `N,replication,sup_gap,sup_gap_sq,nu_gap_sq,seed`.
    pub fn write_csv(&self, mut out: impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "N,replication,sup_gap,sup_gap_sq,nu_gap_sq,seed")?;
        for s in &self.samples {
            writeln!(
                out,
                "{},{},{:e},{:e},{:e},{}",
                s.n, s.replication, s.sup_gap, s.sup_gap_sq, s.nu_gap_sq, s.seed
            )?;
        }
        Ok(())
    }
}

/// Gaps below this are treated as round-off.
const DEGENERATE_FLOOR: f64 = 1e-20;

/// Coupled N-player/limit pairs for every `N` and replication, and the
/// fitted decay rates of the gap statistics in `N`.
pub fn chaos_sweep(eq: &Equilibrium, params: &SimParams) -> Result<ConvergenceReport> {
    params.validate()?;
    if params.n_list.len() < 2 {
        return Err(Error::InvalidParameter("n_list needs at least two values".into()));
    }
    let jobs: Vec<(usize, u64)> = params
        .n_list
        .iter()
        .flat_map(|&n| (0..params.reps as u64).map(move |r| (n, r)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(n, r)| {
            let np = simulate_nplayer_projected(eq, params, n, r)?;
            let limit = simulate_limit_particles(eq, params, n, r)?;
            chaos_statistics(&np, &limit)
        })
        .collect::<Result<Vec<_>>>()?;

    let per_n: Vec<PerN> = params
        .n_list
        .iter()
        .map(|&n| {
            let pick = |f: fn(&ChaosSample) -> f64| -> Vec<f64> {
                samples.iter().filter(|s| s.n == n).map(f).collect()
            };
            let (e_sup_sq_gap, e_sup_sq_gap_se) = mean_and_se(&pick(|s| s.sup_gap_sq));
            let (e_sup_gap, e_sup_gap_se) = mean_and_se(&pick(|s| s.sup_gap));
            let (nu_gap_sq, nu_gap_sq_se) = mean_and_se(&pick(|s| s.nu_gap_sq));
            PerN {
                n,
                e_sup_sq_gap,
                e_sup_sq_gap_se,
                e_sup_gap,
                e_sup_gap_se,
                nu_gap_sq,
                nu_gap_sq_se,
            }
        })
        .collect();

    let degenerate = per_n.iter().all(|p| p.e_sup_sq_gap <= DEGENERATE_FLOOR);
    let fit = |stat: fn(&PerN) -> (f64, f64)| -> Option<FittedSlope> {
        let pts: Vec<(f64, f64)> = per_n.iter().map(stat).collect();
        if pts.iter().any(|&(m, _)| !(m > DEGENERATE_FLOOR)) {
            return None;
        }
        let x: Vec<f64> = per_n.iter().map(|p| (p.n as f64).ln()).collect();
        let y: Vec<f64> = pts.iter().map(|&(m, _)| m.ln()).collect();
        // Delta method: SE of ln(mean) is SE/mean.
        let se: Vec<f64> = pts
            .iter()
            .map(|&(m, s)| if s.is_finite() { s / m } else { 0.0 })
            .collect();
        Some(FittedSlope::from_fit(fit_slope(&x, &y, &se)))
    };
    let (slope_sup_sq_gap, slope_sup_gap, slope_nu_gap_sq) = if degenerate {
        (None, None, None)
    } else {
        (
            fit(|p| (p.e_sup_sq_gap, p.e_sup_sq_gap_se)),
            fit(|p| (p.e_sup_gap, p.e_sup_gap_se)),
            fit(|p| (p.nu_gap_sq, p.nu_gap_sq_se)),
        )
    };
    Ok(ConvergenceReport {
        n_list: params.n_list.clone(),
        reps: params.reps,
        n_steps: params.n_steps,
        seed: params.seed,
        model_hash: eq.model.hash().to_string(),
        per_n,
        slope_sup_sq_gap,
        slope_sup_gap,
        slope_nu_gap_sq,
        degenerate,
        insufficient_replications: params.reps < MIN_REPS,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{solve_phi, FieldGrid};
    use crate::model::{CoeffConfig, ModelConfig, ScalarFn};
    use crate::riccati::solve_riccati;

    struct Fixture {
        model: ModelSpec,
        riccati: RiccatiSolution,
        field: DecouplingField,
    }

    impl Fixture {
        fn new(model: ModelSpec) -> Self {
            let riccati = solve_riccati(&model, 800).unwrap();
            let grid = FieldGrid::for_model(&model, &riccati, 100, 201, 0.0).unwrap();
            let field = solve_phi(&model, &riccati, &grid).unwrap();
            Fixture {
                model,
                riccati,
                field,
            }
        }

        fn eq(&self) -> Equilibrium<'_> {
            Equilibrium::new(&self.model, &self.riccati, &self.field).unwrap()
        }
    }

    fn nplayer_generic() -> ModelSpec {
        ModelConfig::new(CoeffConfig {
            a: 0.1,
            ..CoeffConfig::unit()
        })
        .with_h(ScalarFn::sine(0.5, 1.0))
        .with_g(ScalarFn::tanh(0.3, 1.0))
        .with_l(ScalarFn::sine(0.2, 1.0))
        .build()
        .unwrap()
    }

    fn params(n_steps: usize) -> SimParams {
        SimParams {
            n_steps,
            n_particles: 500,
            n_list: vec![4, 8],
            reps: 8,
            seed: 21,
            xi_law: XiLaw::default(),
        }
    }

    #[test]
    fn uncontrolled_population_follows_common_noise() {
        let fx = Fixture::new(
            ModelConfig::new(CoeffConfig {
                a: 0.0,
                b: 0.0,
                ..CoeffConfig::unit()
            })
            .build()
            .unwrap(),
        );
        let p = SimParams {
            xi_law: XiLaw::Normal {
                mean: 0.4,
                variance: 2.0,
            },
            ..params(200)
        };
        let b = simulate_mfe(&fx.eq(), &p, 3).unwrap();
        let mut expect = 0.4;
        for k in 0..=200 {
            assert!((b.nu_star[k] - expect).abs() <= 1e-12);
            if k < 200 {
                expect += fx.model.sigma0 * b.common[k];
            }
        }
    }

    #[test]
    fn equilibrium_population_is_consistent_and_tracks_its_mean() {
        let fx = Fixture::new(nplayer_generic());
        let p = SimParams {
            n_particles: 4000,
            ..params(200)
        };
        let b = simulate_mfe(&fx.eq(), &p, 0).unwrap();
        assert!(b.consistency_residual <= 1e-10);
        let gate = conditional_mean_gate(&b, 4.0);
        assert!(gate.passed, "{gate:?}");
        assert_eq!(b, simulate_mfe(&fx.eq(), &p, 0).unwrap());
        assert_ne!(b.nu_star, simulate_mfe(&fx.eq(), &p, 1).unwrap().nu_star);
    }

    #[test]
    fn step_halving_gap_is_first_order() {
        let fx = Fixture::new(nplayer_generic());
        let eq = fx.eq();
        let mean_gap = |n: usize| {
            (0..16u64)
                .map(|r| {
                    let (c, f) = common_increments(5, r, 1.0, n);
                    let a = simulate_nu_star(&eq, 0.0, 0.0, &c).unwrap();
                    let b = simulate_nu_star(&eq, 0.0, 0.0, &f).unwrap();
                    (0..=n)
                        .map(|k| (a.nu[k] - b.nu[2 * k]).abs())
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 16.0
        };
        let (g1, g2, g3) = (mean_gap(100), mean_gap(200), mean_gap(400));
        for ratio in [g1 / g2, g2 / g3] {
            assert!(ratio > 1.6 && ratio < 2.5, "{g1} {g2} {g3}");
        }
    }

    #[test]
    fn two_players_without_interaction_match_gaussian_moments() {
        let fx = Fixture::new(
            ModelConfig::new(CoeffConfig {
                a: 0.3,
                ..CoeffConfig::unit()
            })
            .with_g(ScalarFn::Constant(0.5))
            .build()
            .unwrap(),
        );
        let eq = fx.eq();
        let p = SimParams {
            xi_law: XiLaw::Normal {
                mean: 1.0,
                variance: 0.5,
            },
            ..params(100)
        };
        let reps = 3000u64;
        let finals: Vec<f64> = (0..reps)
            .map(|r| simulate_nplayer_projected(&eq, &p, 2, r).unwrap().states[0][100])
            .collect();
        // Moments of the Euler recursion.
        let m = &fx.model;
        let dt = 0.01;
        let (mut mean, mut var) = (1.0, 0.5);
        for k in 0..100 {
            let t = k as f64 * dt;
            let pk = fx.riccati.eval_p(t).unwrap();
            let phi = fx.field.eval(t, 0.0).unwrap().0;
            let a = 1.0 + (m.a - m.gain() * pk) * dt;
            mean = a * mean - m.gain() * phi * dt;
            var = a * a * var + (m.sigma * m.sigma + m.sigma0 * m.sigma0) * dt;
        }
        let (emp_mean, se) = mean_and_se(&finals);
        let emp_var = finals.iter().map(|x| (x - emp_mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        assert!((emp_mean - mean).abs() <= 4.0 * se, "{emp_mean} vs {mean}");
        let var_se = var * (2.0 / reps as f64).sqrt();
        assert!((emp_var - var).abs() <= 4.0 * var_se, "{emp_var} vs {var}");
    }

    #[test]
    fn symmetric_start_reduces_to_scalar_map() {
        let fx = Fixture::new(nplayer_generic());
        let eq = fx.eq();
        let p = SimParams {
            xi_law: XiLaw::Constant { value: 0.7 },
            ..params(100)
        };
        let b = simulate_nplayer_projected(&eq, &p, 5, 0).unwrap();
        let s = eq.state(0.0, 0.7).unwrap();
        assert!((b.mu_star[0] - s.mu).abs() <= 1e-10);
        let u0 = b.controls[0][0];
        assert!(b.controls.iter().all(|c| (c[0] - u0).abs() <= 1e-14));
        assert_eq!(b, simulate_nplayer_projected(&eq, &p, 5, 0).unwrap());
    }

    #[test]
    fn coupled_pairs_and_their_statistics() {
        let fx = Fixture::new(nplayer_generic());
        let eq = fx.eq();
        let p = params(100);
        let np = simulate_nplayer_projected(&eq, &p, 6, 2).unwrap();
        let lim = simulate_limit_particles(&eq, &p, 6, 2).unwrap();
        assert_eq!(np.common, lim.common);
        assert_eq!(np.states[3][0], lim.states[3][0]);
        let s = chaos_statistics(&np, &lim).unwrap();
        assert!(s.sup_gap > 0.0 && s.sup_gap_sq > 0.0 && s.nu_gap_sq > 0.0);

        let mut np_perm = np.clone();
        let mut lim_perm = lim.clone();
        np_perm.states.reverse();
        lim_perm.states.reverse();
        let sp = chaos_statistics(&np_perm, &lim_perm).unwrap();
        assert!((sp.sup_gap_sq - s.sup_gap_sq).abs() <= 1e-12 * s.sup_gap_sq);
        assert!((sp.nu_gap_sq - s.nu_gap_sq).abs() <= 1e-12 * s.nu_gap_sq);

        let other = simulate_limit_particles(&eq, &p, 6, 3).unwrap();
        assert!(matches!(chaos_statistics(&np, &other), Err(Error::StreamMismatch(_))));
        assert!(matches!(chaos_statistics(&lim, &np), Err(Error::StreamMismatch(_))));
    }

    #[test]
    fn uncoupled_instance_gives_degenerate_sweep() {
        let fx = Fixture::new(ModelConfig::new(CoeffConfig::unit()).build().unwrap());
        let eq = fx.eq();
        let p = SimParams {
            reps: 2,
            ..params(100)
        };
        let report = chaos_sweep(&eq, &p).unwrap();
        assert!(report.degenerate);
        assert!(report.insufficient_replications);
        assert!(report.slope_sup_sq_gap.is_none());
        assert!(report.samples.iter().all(|s| s.sup_gap == 0.0));
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("N,replication,sup_gap,sup_gap_sq,nu_gap_sq,seed\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 2);
    }

    #[test]
    fn nplayer_requires_its_assumptions() {
        let fx = Fixture::new(
            ModelConfig::new(CoeffConfig::unit())
                .with_f(ScalarFn::Constant(0.2))
                .build()
                .unwrap(),
        );
        assert!(matches!(
            simulate_nplayer_projected(&fx.eq(), &params(100), 4, 0),
            Err(Error::Assumption(_))
        ));
        assert!(params(50).validate().is_err());
        assert!(SimParams { n_list: vec![1], ..params(100) }.validate().is_err());
    }
}
