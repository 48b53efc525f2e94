//! The `η`-rescaled field and two candidate ways of mapping it back.

use mfgc::field::{reconstruct_phi, solve_phi, solve_phi_tilde, FieldGrid, Reconstruction};
use mfgc::model::ModelConfig;
use mfgc::riccati::{solve_riccati, DEFAULT_STEPS};

fn main() -> mfgc::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/generic.json");
    let model = ModelConfig::from_path(path)?.build()?;
    let ric = solve_riccati(&model, DEFAULT_STEPS)?;

    let mut grid = FieldGrid::for_model(&model, &ric, 100, 201, 0.0)?;
    for _ in 0..3 {
        let phi = solve_phi(&model, &ric, &grid)?;
        let tilde = solve_phi_tilde(&model, &ric, &grid)?;
        let mut line = format!("nt = {:4}", grid.nt);
        for (name, variant) in [
            ("scaled", Reconstruction::Scaled),
            ("inverse", Reconstruction::InverseScaled),
        ] {
            let rebuilt = reconstruct_phi(&tilde, &ric, &grid, variant)?;
            let mut gap = 0f64;
            for n in 0..=grid.nt {
                for j in 0..grid.nnu {
                    if grid.nu(j).abs() <= 0.5 * grid.half_width {
                        gap = gap.max((rebuilt.at(n, j) - phi.at(n, j)).abs());
                    }
                }
            }
            line += &format!("  {name}: {gap:.3e}");
        }
        println!("{line}");
        grid = grid.refined();
    }
    Ok(())
}
