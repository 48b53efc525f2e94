//! Along simulated equilibrium paths `y = P x + Φ(t, ν)` solves the adjoint
//! equation up to a discretisation error that shrinks with the step.

use mfgc::field::{solve_phi, FieldGrid, DEFAULT_NNU, DEFAULT_NT};
use mfgc::master::{adjoint_residual, assemble_u};
use mfgc::model::ModelConfig;
use mfgc::riccati::{solve_riccati, DEFAULT_STEPS};

fn main() -> mfgc::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/generic.json");
    let model = ModelConfig::from_path(path)?.build()?;
    let ric = solve_riccati(&model, DEFAULT_STEPS)?;
    let grid = FieldGrid::for_model(&model, &ric, DEFAULT_NT, DEFAULT_NNU, 1.0)?;
    let phi = solve_phi(&model, &ric, &grid)?;
    let mf = assemble_u(&model, &ric, &phi)?;

    for n_steps in [25, 50, 100, 200, 400] {
        let r = adjoint_residual(&model, &mf, 0.5, 0.2, 1000, n_steps, 5)?;
        println!(
            "steps {n_steps:4}  rms sup residual {:.3e}  terminal {:+.2e} +- {:.1e}  control gap {:.1e}",
            r.rms_sup_residual, r.mean_terminal_residual, r.terminal_se, r.max_control_gap
        );
    }
    Ok(())
}
