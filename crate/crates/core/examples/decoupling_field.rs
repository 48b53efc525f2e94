//! Solve `Φ` on three nested grids and watch the residual fall.

use mfgc::field::{phi_residual, solve_phi, FieldGrid};
use mfgc::model::ModelConfig;
use mfgc::riccati::{solve_riccati, DEFAULT_STEPS};

fn main() -> mfgc::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/generic.json");
    let model = ModelConfig::from_path(path)?.build()?;
    let ric = solve_riccati(&model, DEFAULT_STEPS)?;

    let mut grid = FieldGrid::for_model(&model, &ric, 100, 201, 0.0)?;
    println!("half-width L = {:.4}", grid.half_width);
    let mut previous: Option<f64> = None;
    for _ in 0..3 {
        let phi = solve_phi(&model, &ric, &grid)?;
        let profile = phi_residual(&model, &ric, &phi)?;
        let order = previous.map(|p| (p / profile.interior_max).log2());
        println!(
            "nt = {:4} nnu = {:4}  sup|Phi| = {:.5}  residual {:.3e}  order {}",
            grid.nt,
            grid.nnu,
            phi.sup_norm(),
            profile.interior_max,
            order.map_or("-".into(), |o| format!("{o:.2}"))
        );
        let (value, d1, d2) = phi.eval(0.0, 0.0)?;
        println!("    Phi(0, 0) = {value:+.8}  dPhi = {d1:+.6}  d2Phi = {d2:+.6}");
        previous = Some(profile.interior_max);
        grid = grid.refined();
    }
    Ok(())
}
