//! Distance between N-player paths and their coupled limit copies as N grows.

use mfgc::field::{solve_phi, FieldGrid, DEFAULT_NNU, DEFAULT_NT};
use mfgc::model::{check_assumptions, Mode, ModelConfig};
use mfgc::riccati::{solve_riccati, DEFAULT_STEPS};
use mfgc::simulate::{chaos_sweep, Equilibrium, SimParams};

fn main() -> mfgc::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/nplayer.json");
    let model = ModelConfig::from_path(path)?.build()?;
    let report = check_assumptions(&model, Mode::NPlayer);
    assert!(report.passed(), "{:?}", report.failures);

    let ric = solve_riccati(&model, DEFAULT_STEPS)?;
    let grid = FieldGrid::for_model(&model, &ric, DEFAULT_NT, DEFAULT_NNU, 0.0)?;
    let phi = solve_phi(&model, &ric, &grid)?;
    let eq = Equilibrium::new(&model, &ric, &phi)?;

    let params = SimParams {
        n_list: vec![8, 16, 32, 64, 128],
        reps: 16,
        n_steps: 400,
        seed: 11,
        ..SimParams::default()
    };
    let sweep = chaos_sweep(&eq, &params)?;
    for p in &sweep.per_n {
        println!(
            "N = {:4}  E sup|x-xbar|^2 = {:.3e} +- {:.1e}  E sup|nu gap|^2 = {:.3e}",
            p.n, p.e_sup_sq_gap, p.e_sup_sq_gap_se, p.nu_gap_sq
        );
    }
    for (name, s) in [
        ("sup squared gap", &sweep.slope_sup_sq_gap),
        ("sup gap", &sweep.slope_sup_gap),
        ("empirical mean gap", &sweep.slope_nu_gap_sq),
    ] {
        if let Some(s) = s {
            println!("{name:>20}: slope {:+.3}  [{:+.3}, {:+.3}]", s.slope, s.ci_low, s.ci_high);
        }
    }
    Ok(())
}
