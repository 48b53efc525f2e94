//! A large population driven by the equilibrium feedback, compared with the
//! conditional mean `ν*` it should track.

use mfgc::field::{solve_phi, FieldGrid, DEFAULT_NNU, DEFAULT_NT};
use mfgc::model::ModelConfig;
use mfgc::riccati::{solve_riccati, DEFAULT_STEPS};
use mfgc::simulate::{conditional_mean_gate, simulate_mfe, Equilibrium, SimParams};

fn main() -> mfgc::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/generic.json");
    let model = ModelConfig::from_path(path)?.build()?;
    let ric = solve_riccati(&model, DEFAULT_STEPS)?;
    let grid = FieldGrid::for_model(&model, &ric, DEFAULT_NT, DEFAULT_NNU, 0.0)?;
    let phi = solve_phi(&model, &ric, &grid)?;
    let eq = Equilibrium::new(&model, &ric, &phi)?;

    let params = SimParams { seed: 7, ..SimParams::default() };
    let bundle = simulate_mfe(&eq, &params, 0)?;
    let gate = conditional_mean_gate(&bundle, 4.0);
    println!("particles {}  steps {}", bundle.states.len(), bundle.tgrid.len() - 1);
    println!("consistency residual {:.2e}", bundle.consistency_residual);
    println!("worst |mean - nu*| / se = {:.2} at step {}  passed {}", gate.max_z, gate.worst_step, gate.passed);
    for k in (0..bundle.tgrid.len()).step_by(bundle.tgrid.len() / 4) {
        println!(
            "t = {:.2}  nu* = {:+.5}  mean = {:+.5}  mu* = {:+.5}",
            bundle.tgrid[k],
            bundle.nu_star[k],
            bundle.particle_mean(k),
            bundle.mu_star[k]
        );
    }
    Ok(())
}
