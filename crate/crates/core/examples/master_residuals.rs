//! Plug `U = P x + Φ` and `V = ½P x² + Φ x + c` into both master equations.

use mfgc::field::{solve_phi, FieldGrid};
use mfgc::master::{attach_refinement_slopes, master_level, XAxis, DEFAULT_NX, DEFAULT_X_HALF_WIDTH};
use mfgc::model::ModelConfig;
use mfgc::riccati::{solve_riccati, DEFAULT_STEPS};

fn main() -> mfgc::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/generic.json");
    let model = ModelConfig::from_path(path)?.build()?;
    let ric = solve_riccati(&model, DEFAULT_STEPS)?;
    let axis = XAxis::new(DEFAULT_NX, DEFAULT_X_HALF_WIDTH)?;

    let mut grid = FieldGrid::for_model(&model, &ric, 100, 201, 0.0)?;
    let mut levels = Vec::new();
    for _ in 0..3 {
        let phi = solve_phi(&model, &ric, &grid)?;
        levels.push(master_level(&model, &ric, &phi, &axis)?);
        grid = grid.refined();
    }
    attach_refinement_slopes(&mut levels);

    let order = |s: Option<f64>| s.map_or("-".to_string(), |s| format!("{s:.2}"));
    for l in &levels {
        println!(
            "nt = {:4}  Phi {:.3e}  vector {:.3e} ({})  scalar {:.3e} ({})  x^2 {:.1e} x^1 {:.1e}",
            l.vec_master.grid.nt,
            l.phi.interior_max,
            l.vec_master.max_residual,
            order(l.vec_master.refinement_slope),
            l.master.max_residual,
            order(l.master.refinement_slope),
            l.collections.x2,
            l.collections.x1,
        );
    }
    Ok(())
}
