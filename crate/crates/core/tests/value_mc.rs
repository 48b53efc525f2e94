use mfgc::field::{solve_phi, FieldGrid, DEFAULT_NNU, DEFAULT_NT};
use mfgc::master::{assemble_u, solve_value_offset, value_v_monte_carlo, ValueProbe};
use mfgc::model::{CoeffConfig, ModelConfig, ModelSpec, ScalarFn};
use mfgc::riccati::{solve_riccati, DEFAULT_STEPS};

fn model(sigma0: f64) -> ModelSpec {
    ModelConfig::new(CoeffConfig { a: 0.1, sigma0, ..CoeffConfig::unit() })
        .with_h(ScalarFn::sine(0.5, 1.0))
        .with_g(ScalarFn::tanh(0.3, 1.0))
        .with_l(ScalarFn::sine(0.2, 1.0))
        .build()
        .unwrap()
}

#[test]
fn standard_error_scales_with_inverse_root_paths() {
    let m = model(1.0);
    let ric = solve_riccati(&m, DEFAULT_STEPS).unwrap();
    let grid = FieldGrid::for_model(&m, &ric, 200, 401, 1.0).unwrap();
    let phi = solve_phi(&m, &ric, &grid).unwrap();
    let mf = solve_value_offset(assemble_u(&m, &ric, &phi).unwrap(), &m).unwrap();
    let probe = ValueProbe { t0: 0.2, x0: 0.5, nu0: -0.5 };
    let se: Vec<f64> = [1000, 4000, 16_000]
        .into_iter()
        .map(|n| value_v_monte_carlo(&m, &mf, probe, n, 200, 3).unwrap().std_error)
        .collect();
    for w in se.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.7..=2.3).contains(&ratio), "{se:?}");
    }
}

#[test]
fn small_common_noise_matches_grid_value() {
    let m = model(1e-3);
    let ric = solve_riccati(&m, DEFAULT_STEPS).unwrap();
    let grid = FieldGrid::for_model(&m, &ric, DEFAULT_NT, DEFAULT_NNU, 1.0).unwrap();
    let phi = solve_phi(&m, &ric, &grid).unwrap();
    let mf = solve_value_offset(assemble_u(&m, &ric, &phi).unwrap(), &m).unwrap();
    for (k, (t0, x0, nu0)) in [(0.0, 0.0, 0.0), (0.4, -1.0, 0.8)].into_iter().enumerate() {
        let grid_v = mf.value(t0, x0, nu0).unwrap();
        let mc = value_v_monte_carlo(&m, &mf, ValueProbe { t0, x0, nu0 }, 10_000, 800, 40 + k as u64)
            .unwrap();
        let z = (mc.estimate - grid_v) / mc.std_error;
        assert!(z.abs() <= 3.0, "probe {k}: grid {grid_v} mc {} se {}", mc.estimate, mc.std_error);
    }
}
