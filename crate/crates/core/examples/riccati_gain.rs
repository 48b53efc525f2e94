//! Backward Riccati gain against its closed form, plus the `η` weight.

use mfgc::model::{CoeffConfig, ModelConfig};
use mfgc::riccati::{solve_riccati, DEFAULT_STEPS};

fn closed_form(a: f64, gamma: f64, q: f64, g: f64, tau: f64) -> f64 {
    let delta = (a * a + gamma * q).sqrt();
    let (pp, pm) = ((a + delta) / gamma, (a - delta) / gamma);
    let k = (g - pp) / (g - pm);
    let e = k * (-2.0 * delta * tau).exp();
    (pp - pm * e) / (1.0 - e)
}

fn main() -> mfgc::Result<()> {
    let coeffs = CoeffConfig { a: 0.3, g: 0.5, ..CoeffConfig::unit() };
    let model = ModelConfig::new(coeffs).build()?;
    let sol = solve_riccati(&model, DEFAULT_STEPS)?;

    let worst = sol
        .tgrid
        .iter()
        .zip(&sol.p)
        .map(|(t, p)| (p - closed_form(0.3, 1.0, 1.0, 0.5, 1.0 - t)).abs())
        .fold(0.0, f64::max);

    println!("P(0) = {:.12}", sol.p[0]);
    println!("max |P - closed form| = {worst:.3e}");
    let (lo, hi) = sol.eta_range();
    println!("eta in [{lo:.6}, {hi:.6}], eps1 = {:.6}", sol.eps1);
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        println!("t = {t:.2}  P = {:.8}  eta = {:.8}", sol.eval_p(t)?, sol.eta_of(t)?);
    }
    Ok(())
}
