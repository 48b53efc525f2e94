//! Scalar and N-player consistency maps for a contracting `h`.

use mfgc::consistency::{gershgorin_certificate, RhoSolver, VectorConsistency};
use mfgc::model::ScalarFn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mfgc::Result<()> {
    let h = ScalarFn::sine(0.5, 1.0);
    let scalar = RhoSolver::new(h);
    println!("eps0 = {}", scalar.eps0());
    for delta in [-3.0, -1.0, 0.0, 0.5, 2.0] {
        let mu = scalar.rho(delta)?;
        println!(
            "rho({delta:+.1}) = {mu:+.12}  residual {:.1e}  rho' = {:.6}",
            (mu + h.eval(mu) - delta).abs(),
            scalar.rho_prime(delta)?
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [2, 8, 64] {
        let vector = VectorConsistency::new(n, h)?;
        let delta: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mu = vector.rho_n(&delta)?;
        let res = vector.residual(&delta, &mu).iter().fold(0.0f64, |m, r| m.max(r.abs()));
        println!(
            "N = {n:3}  max residual {res:.1e}  Gershgorin bound {:.4}",
            gershgorin_certificate(&h, &mu)
        );
    }
    Ok(())
}
