//! Grid value `V` against a Monte Carlo estimate at a few probes.

use mfgc::field::{solve_phi, FieldGrid, DEFAULT_NNU, DEFAULT_NT};
use mfgc::master::{assemble_u, solve_value_offset, value_v_monte_carlo, ValueProbe};
use mfgc::model::ModelConfig;
use mfgc::riccati::{solve_riccati, DEFAULT_STEPS};

fn main() -> mfgc::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/generic.json");
    let model = ModelConfig::from_path(path)?.build()?;
    let ric = solve_riccati(&model, DEFAULT_STEPS)?;
    let grid = FieldGrid::for_model(&model, &ric, DEFAULT_NT, DEFAULT_NNU, 1.0)?;
    let phi = solve_phi(&model, &ric, &grid)?;
    let mf = solve_value_offset(assemble_u(&model, &ric, &phi)?, &model)?;

    let probes = [(0.0, 0.0, 0.0), (0.3, -1.0, 0.5), (0.8, 2.0, -1.0)];
    for (seed, (t0, x0, nu0)) in probes.into_iter().enumerate() {
        let grid_v = mf.value(t0, x0, nu0)?;
        let mc = value_v_monte_carlo(&model, &mf, ValueProbe { t0, x0, nu0 }, 5000, 400, seed as u64)?;
        println!(
            "V({t0}, {x0:+}, {nu0:+}) grid {grid_v:.5}  mc {:.5} +- {:.5}  z = {:+.2}",
            mc.estimate,
            mc.std_error,
            (mc.estimate - grid_v) / mc.std_error
        );
    }
    Ok(())
}
