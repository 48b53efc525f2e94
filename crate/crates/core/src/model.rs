//! Problem instance: constant coefficients, the registry of admissible
//! nonlinear scalar functions, and the assumption validators.
//!
//! Every registry member is C² and bounded with bounded first and second
//! derivatives. Sup-bounds are closed forms, so the assumption report is
//! exact rather than sampled.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Maximum of `|u (1 + u^2)^{-5/2}|`, reached at `u = 1/2`.
fn clamp_curvature_peak() -> f64 {
    0.5 * 1.25f64.powf(-2.5)
}

/// Closed-form scalar nonlinearity drawn from the registry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarFn {
    Zero,
    Constant(f64),
    /// `a sin(ω x)`
    ScaledSine { amplitude: f64, frequency: f64 },
    /// `a tanh(s x)`
    ScaledTanh { amplitude: f64, slope: f64 },
    /// `a u / sqrt(1 + u²)` with `u = x / s`; a smooth clamp onto `(-a, a)`.
    SmoothedClamp { amplitude: f64, scale: f64 },
}

/// `(‖φ‖∞, ‖φ′‖∞, ‖φ″‖∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FnBounds(pub f64, pub f64, pub f64);

impl FnBounds {
    pub fn sup(&self) -> f64 {
        self.0
    }
    pub fn sup_d1(&self) -> f64 {
        self.1
    }
    pub fn sup_d2(&self) -> f64 {
        self.2
    }
}

impl ScalarFn {
    pub fn sine(amplitude: f64, frequency: f64) -> Self {
        ScalarFn::ScaledSine {
            amplitude,
            frequency,
        }
    }

    pub fn tanh(amplitude: f64, slope: f64) -> Self {
        ScalarFn::ScaledTanh { amplitude, slope }
    }

    pub fn clamp(amplitude: f64, scale: f64) -> Self {
        ScalarFn::SmoothedClamp { amplitude, scale }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ScalarFn::Zero => 0.0,
            ScalarFn::Constant(c) => c,
            ScalarFn::ScaledSine {
                amplitude,
                frequency,
            } => amplitude * (frequency * x).sin(),
            ScalarFn::ScaledTanh { amplitude, slope } => amplitude * (slope * x).tanh(),
            ScalarFn::SmoothedClamp { amplitude, scale } => {
                let u = x / scale;
                amplitude * u / (1.0 + u * u).sqrt()
            }
        }
    }

    pub fn deriv1(&self, x: f64) -> f64 {
        match *self {
            ScalarFn::Zero | ScalarFn::Constant(_) => 0.0,
            ScalarFn::ScaledSine {
                amplitude,
                frequency,
            } => amplitude * frequency * (frequency * x).cos(),
            ScalarFn::ScaledTanh { amplitude, slope } => {
                let th = (slope * x).tanh();
                amplitude * slope * (1.0 - th * th)
            }
            ScalarFn::SmoothedClamp { amplitude, scale } => {
                let u = x / scale;
                amplitude / scale * (1.0 + u * u).powf(-1.5)
            }
        }
    }

    pub fn deriv2(&self, x: f64) -> f64 {
        match *self {
            ScalarFn::Zero | ScalarFn::Constant(_) => 0.0,
            ScalarFn::ScaledSine {
                amplitude,
                frequency,
            } => -amplitude * frequency * frequency * (frequency * x).sin(),
            ScalarFn::ScaledTanh { amplitude, slope } => {
                let th = (slope * x).tanh();
                -2.0 * amplitude * slope * slope * th * (1.0 - th * th)
            }
            ScalarFn::SmoothedClamp { amplitude, scale } => {
                let u = x / scale;
                -3.0 * amplitude / (scale * scale) * u * (1.0 + u * u).powf(-2.5)
            }
        }
    }

    /// Value and first derivative in one call.
    #[inline]
    pub fn eval_d1(&self, x: f64) -> (f64, f64) {
        match *self {
            ScalarFn::ScaledSine {
                amplitude,
                frequency,
            } => {
                let (s, c) = (frequency * x).sin_cos();
                (amplitude * s, amplitude * frequency * c)
            }
            _ => (self.eval(x), self.deriv1(x)),
        }
    }

    pub fn bounds(&self) -> FnBounds {
        match *self {
            ScalarFn::Zero => FnBounds(0.0, 0.0, 0.0),
            ScalarFn::Constant(c) => FnBounds(c.abs(), 0.0, 0.0),
            ScalarFn::ScaledSine {
                amplitude,
                frequency,
            } => {
                let a = amplitude.abs();
                let w = frequency.abs();
                if w == 0.0 {
                    FnBounds(0.0, 0.0, 0.0)
                } else {
                    FnBounds(a, a * w, a * w * w)
                }
            }
            ScalarFn::ScaledTanh { amplitude, slope } => {
                let a = amplitude.abs();
                let s = slope.abs();
                if s == 0.0 {
                    FnBounds(0.0, 0.0, 0.0)
                } else {
                    FnBounds(a, a * s, 4.0 * a * s * s / (3.0 * 3f64.sqrt()))
                }
            }
            ScalarFn::SmoothedClamp { amplitude, scale } => {
                let a = amplitude.abs();
                let s = scale.abs();
                FnBounds(a, a / s, 3.0 * clamp_curvature_peak() * a / (s * s))
            }
        }
    }

    /// Closed-form `(inf φ′, sup φ′)` over the real line (infimum/supremum,
    /// possibly not attained).
    pub fn deriv1_range(&self) -> (f64, f64) {
        match *self {
            ScalarFn::Zero | ScalarFn::Constant(_) => (0.0, 0.0),
            ScalarFn::ScaledSine { .. } => {
                let d = self.bounds().sup_d1();
                (-d, d)
            }
            ScalarFn::ScaledTanh { amplitude, slope } => {
                let peak = amplitude * slope;
                (peak.min(0.0), peak.max(0.0))
            }
            ScalarFn::SmoothedClamp { amplitude, scale } => {
                let peak = amplitude / scale;
                (peak.min(0.0), peak.max(0.0))
            }
        }
    }

    /// True when the function vanishes identically.
    pub fn is_zero(&self) -> bool {
        match *self {
            ScalarFn::Zero => true,
            ScalarFn::Constant(c) => c == 0.0,
            ScalarFn::ScaledSine {
                amplitude,
                frequency,
            } => amplitude == 0.0 || frequency == 0.0,
            ScalarFn::ScaledTanh { amplitude, slope } => amplitude == 0.0 || slope == 0.0,
            ScalarFn::SmoothedClamp { amplitude, .. } => amplitude == 0.0,
        }
    }

    /// True when the function is constant (including zero).
    pub fn is_constant(&self) -> bool {
        matches!(self, ScalarFn::Zero | ScalarFn::Constant(_)) || self.is_zero()
    }

    fn from_spec(name: &str, spec: &FnSpec) -> Result<Self> {
        let reject = |reason: String| Error::RejectedConfig {
            field: format!("fns.{name}"),
            reason,
        };
        let want = |n: usize| -> Result<()> {
            if spec.params.len() != n {
                return Err(reject(format!(
                    "kind {} takes {} parameter(s), got {}",
                    spec.kind,
                    n,
                    spec.params.len()
                )));
            }
            Ok(())
        };
        if spec.params.iter().any(|p| !p.is_finite()) {
            return Err(reject("non-finite parameter".into()));
        }
        let p = &spec.params;
        let f = match spec.kind.as_str() {
            "Zero" => {
                want(0)?;
                ScalarFn::Zero
            }
            "Constant" => {
                want(1)?;
                ScalarFn::Constant(p[0])
            }
            "ScaledSine" => {
                want(2)?;
                ScalarFn::ScaledSine {
                    amplitude: p[0],
                    frequency: p[1],
                }
            }
            "ScaledTanh" => {
                want(2)?;
                ScalarFn::ScaledTanh {
                    amplitude: p[0],
                    slope: p[1],
                }
            }
            "SmoothedClamp" => {
                want(2)?;
                if p[1] <= 0.0 {
                    return Err(reject("SmoothedClamp scale must be > 0".into()));
                }
                ScalarFn::SmoothedClamp {
                    amplitude: p[0],
                    scale: p[1],
                }
            }
            other => return Err(reject(format!("unknown ScalarFn kind `{other}`"))),
        };
        Ok(f)
    }

    pub fn to_spec(&self) -> FnSpec {
        let (kind, params) = match *self {
            ScalarFn::Zero => ("Zero", vec![]),
            ScalarFn::Constant(c) => ("Constant", vec![c]),
            ScalarFn::ScaledSine {
                amplitude,
                frequency,
            } => ("ScaledSine", vec![amplitude, frequency]),
            ScalarFn::ScaledTanh { amplitude, slope } => ("ScaledTanh", vec![amplitude, slope]),
            ScalarFn::SmoothedClamp { amplitude, scale } => {
                ("SmoothedClamp", vec![amplitude, scale])
            }
        };
        FnSpec {
            kind: kind.to_string(),
            params,
        }
    }
}

impl fmt::Display for ScalarFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.to_spec();
        write!(f, "{}{:?}", s.kind, s.params)
    }
}

/// Serialized form of a registry function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FnSpec {
    pub kind: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

impl Default for FnSpec {
    fn default() -> Self {
        FnSpec {
            kind: "Zero".into(),
            params: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffConfig {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub sigma: f64,
    pub sigma0: f64,
    #[serde(rename = "Q")]
    pub q: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(rename = "T")]
    pub t: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FnsConfig {
    #[serde(default)]
    pub f: FnSpec,
    #[serde(default)]
    pub b: FnSpec,
    #[serde(default)]
    pub l: FnSpec,
    #[serde(default)]
    pub h: FnSpec,
    #[serde(default)]
    pub g: FnSpec,
}

/// The JSON configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub coeffs: CoeffConfig,
    #[serde(default)]
    pub fns: FnsConfig,
}

impl CoeffConfig {
    /// `A = 0`, `B = σ = σ₀ = Q = R = G = T = 1`.
    pub fn unit() -> Self {
        CoeffConfig {
            a: 0.0,
            b: 1.0,
            sigma: 1.0,
            sigma0: 1.0,
            q: 1.0,
            r: 1.0,
            g: 1.0,
            t: 1.0,
        }
    }
}

impl ModelConfig {
    /// Configuration with every nonlinearity set to `Zero`.
    pub fn new(coeffs: CoeffConfig) -> Self {
        ModelConfig {
            coeffs,
            fns: FnsConfig::default(),
        }
    }

    pub fn with_f(mut self, f: ScalarFn) -> Self {
        self.fns.f = f.to_spec();
        self
    }

    pub fn with_b(mut self, f: ScalarFn) -> Self {
        self.fns.b = f.to_spec();
        self
    }

    pub fn with_l(mut self, f: ScalarFn) -> Self {
        self.fns.l = f.to_spec();
        self
    }

    pub fn with_h(mut self, f: ScalarFn) -> Self {
        self.fns.h = f.to_spec();
        self
    }

    pub fn with_g(mut self, f: ScalarFn) -> Self {
        self.fns.g = f.to_spec();
        self
    }

    pub fn build(&self) -> Result<ModelSpec> {
        build_model(self)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }
}

/// Validated, immutable problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub sigma0: f64,
    pub q: f64,
    pub r: f64,
    pub g_weight: f64,
    pub horizon: f64,
    pub f: ScalarFn,
    pub b_fn: ScalarFn,
    pub l: ScalarFn,
    pub h: ScalarFn,
    pub g: ScalarFn,
    hash: String,
}

impl ModelSpec {
    /// `B²R⁻¹`.
    pub fn gain(&self) -> f64 {
        self.b * self.b / self.r
    }

    /// `1 − ‖h′‖∞`.
    pub fn eps0(&self) -> f64 {
        1.0 - self.h.bounds().sup_d1()
    }

    /// `inf (1 + h′)`; the lower bound on `|1 + h′|` on the positive branch.
    pub fn eps0_b(&self) -> f64 {
        1.0 + self.h.deriv1_range().0
    }

    /// Hex digest of the canonical configuration.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn to_config(&self) -> ModelConfig {
        ModelConfig {
            coeffs: CoeffConfig {
                a: self.a,
                b: self.b,
                sigma: self.sigma,
                sigma0: self.sigma0,
                q: self.q,
                r: self.r,
                g: self.g_weight,
                t: self.horizon,
            },
            fns: FnsConfig {
                f: self.f.to_spec(),
                b: self.b_fn.to_spec(),
                l: self.l.to_spec(),
                h: self.h.to_spec(),
                g: self.g.to_spec(),
            },
        }
    }

    pub fn named_fns(&self) -> [(&'static str, ScalarFn); 5] {
        [
            ("f", self.f),
            ("b", self.b_fn),
            ("l", self.l),
            ("h", self.h),
            ("g", self.g),
        ]
    }
}

fn config_hash(config: &ModelConfig) -> String {
    // Struct field order is fixed, so the compact serialization is canonical.
    let text = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

/// Validate a configuration into a [`ModelSpec`].
pub fn build_model(config: &ModelConfig) -> Result<ModelSpec> {
    let c = &config.coeffs;
    let reject = |field: &str, reason: &str| Error::RejectedConfig {
        field: field.to_string(),
        reason: reason.to_string(),
    };
    for (name, v) in [
        ("A", c.a),
        ("B", c.b),
        ("sigma", c.sigma),
        ("sigma0", c.sigma0),
        ("Q", c.q),
        ("R", c.r),
        ("G", c.g),
        ("T", c.t),
    ] {
        if !v.is_finite() {
            return Err(reject(name, "must be finite"));
        }
    }
    if c.sigma0 <= 0.0 {
        return Err(reject("sigma0", "common-noise volatility must be > 0"));
    }
    if c.sigma < 0.0 {
        return Err(reject("sigma", "must be >= 0"));
    }
    if c.r <= 0.0 {
        return Err(reject("R", "must be > 0"));
    }
    if c.q < 0.0 {
        return Err(reject("Q", "must be >= 0"));
    }
    if c.g < 0.0 {
        return Err(reject("G", "must be >= 0"));
    }
    if c.t <= 0.0 {
        return Err(reject("T", "horizon must be > 0"));
    }
    let fns = &config.fns;
    let model = ModelSpec {
        a: c.a,
        b: c.b,
        sigma: c.sigma,
        sigma0: c.sigma0,
        q: c.q,
        r: c.r,
        g_weight: c.g,
        horizon: c.t,
        f: ScalarFn::from_spec("f", &fns.f)?,
        b_fn: ScalarFn::from_spec("b", &fns.b)?,
        l: ScalarFn::from_spec("l", &fns.l)?,
        h: ScalarFn::from_spec("h", &fns.h)?,
        g: ScalarFn::from_spec("g", &fns.g)?,
        hash: String::new(),
    };
    let hash = config_hash(&model.to_config());
    Ok(ModelSpec { hash, ..model })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    MeanField,
    NPlayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub mode: Mode,
    #[serde(rename = "holds_A")]
    pub holds_a: bool,
    #[serde(rename = "holds_B")]
    pub holds_b: bool,
    #[serde(rename = "holds_Bprime")]
    pub holds_bprime: bool,
    #[serde(rename = "holds_C")]
    pub holds_c: bool,
    /// `1 − ‖h′‖∞`, the (B') constant.
    pub eps0: f64,
    /// `inf (1 + h′)`, the (B) constant.
    pub eps0_b: f64,
    pub lipschitz_bounds: BTreeMap<String, FnBounds>,
    pub failures: Vec<String>,
}

impl AssumptionReport {
    /// True when every assumption the mode requires holds.
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Evaluate Assumptions (A), (B), (B'), (C) from registry closed forms.
pub fn check_assumptions(model: &ModelSpec, mode: Mode) -> AssumptionReport {
    let mut failures = Vec::new();
    let holds_a = model.sigma >= 0.0
        && model.sigma0 > 0.0
        && model.q >= 0.0
        && model.g_weight >= 0.0
        && model.r > 0.0;
    // Every registry member is bounded, Lipschitz and C² with bounded derivatives.
    let holds_c = model
        .named_fns()
        .iter()
        .all(|(_, f)| {
            let b = f.bounds();
            b.0.is_finite() && b.1.is_finite() && b.2.is_finite()
        });
    let eps0 = model.eps0();
    let eps0_b = model.eps0_b();
    let holds_bprime = eps0 > 0.0;
    let holds_b = eps0_b > 0.0;

    if !holds_a {
        failures.push("assumption A: coefficient signs".to_string());
    }
    if !holds_c {
        failures.push("assumption C: unbounded derivative".to_string());
    }
    match mode {
        Mode::MeanField => {
            if !holds_b {
                failures.push(format!("assumption B: inf(1+h') = {eps0_b} <= 0"));
            }
        }
        Mode::NPlayer => {
            if !holds_bprime {
                failures.push(format!("assumption B': 1 - sup|h'| = {eps0} <= 0"));
            }
            if !(model.sigma > 0.0) {
                failures.push("n-player mode requires sigma > 0".to_string());
            }
            if !model.f.is_zero() {
                failures.push(format!("n-player mode requires f = 0, got {}", model.f));
            }
            if !model.b_fn.is_zero() {
                failures.push(format!("n-player mode requires b = 0, got {}", model.b_fn));
            }
        }
    }

    let lipschitz_bounds = model
        .named_fns()
        .iter()
        .map(|(name, f)| (name.to_string(), f.bounds()))
        .collect();

    AssumptionReport {
        mode,
        holds_a,
        holds_b,
        holds_bprime,
        holds_c,
        eps0,
        eps0_b,
        lipschitz_bounds,
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn zero_config() -> ModelConfig {
        ModelConfig::from_json_str(
            r#"{"coeffs":{"A":0,"B":0,"sigma":1,"sigma0":1,"Q":1,"R":1,"G":0,"T":1}}"#,
        )
        .unwrap()
    }

    fn registry() -> Vec<ScalarFn> {
        vec![
            ScalarFn::Zero,
            ScalarFn::Constant(0.3),
            ScalarFn::ScaledSine {
                amplitude: 0.5,
                frequency: 1.0,
            },
            ScalarFn::ScaledSine {
                amplitude: -0.7,
                frequency: 2.5,
            },
            ScalarFn::ScaledTanh {
                amplitude: 0.3,
                slope: 1.0,
            },
            ScalarFn::ScaledTanh {
                amplitude: -2.0,
                slope: 0.4,
            },
            ScalarFn::SmoothedClamp {
                amplitude: 1.5,
                scale: 0.8,
            },
            ScalarFn::SmoothedClamp {
                amplitude: -0.5,
                scale: 2.0,
            },
        ]
    }

    #[test]
    fn zero_model_is_valid_with_unit_eps0() {
        let m = build_model(&zero_config()).unwrap();
        assert_eq!(m.eps0(), 1.0);
        let r = check_assumptions(&m, Mode::MeanField);
        assert!(r.passed());
        assert!(r.holds_a && r.holds_b && r.holds_bprime && r.holds_c);
        assert_eq!(r.eps0, 1.0);
    }

    #[test]
    fn rejects_nonpositive_sigma0_and_r() {
        let mut c = zero_config();
        c.coeffs.sigma0 = 0.0;
        match build_model(&c) {
            Err(Error::RejectedConfig { field, .. }) => assert_eq!(field, "sigma0"),
            other => panic!("{other:?}"),
        }
        let mut c = zero_config();
        c.coeffs.r = -1.0;
        assert!(matches!(build_model(&c), Err(Error::RejectedConfig { field, .. }) if field == "R"));
        let mut c = zero_config();
        c.coeffs.q = -0.1;
        assert!(matches!(build_model(&c), Err(Error::RejectedConfig { field, .. }) if field == "Q"));
        let mut c = zero_config();
        c.coeffs.g = -0.1;
        assert!(matches!(build_model(&c), Err(Error::RejectedConfig { field, .. }) if field == "G"));
    }

    #[test]
    fn rejects_unknown_kind_and_bad_arity() {
        let mut c = zero_config();
        c.fns.h = FnSpec {
            kind: "Cubic".into(),
            params: vec![1.0],
        };
        assert!(matches!(build_model(&c), Err(Error::RejectedConfig { .. })));
        c.fns.h = FnSpec {
            kind: "ScaledSine".into(),
            params: vec![1.0],
        };
        assert!(matches!(build_model(&c), Err(Error::RejectedConfig { .. })));
    }

    #[test]
    fn sine_h_gives_half_eps0() {
        let mut c = zero_config();
        c.fns.h = FnSpec {
            kind: "ScaledSine".into(),
            params: vec![0.5, 1.0],
        };
        let m = build_model(&c).unwrap();
        assert_eq!(m.eps0(), 0.5);
    }

    #[test]
    fn steep_tanh_fails_bprime_but_keeps_b() {
        let mut c = zero_config();
        c.fns.h = FnSpec {
            kind: "ScaledTanh".into(),
            params: vec![2.0, 1.0],
        };
        let m = build_model(&c).unwrap();
        let r = check_assumptions(&m, Mode::MeanField);
        assert!(!r.holds_bprime);
        assert!(r.holds_b);
        assert!(r.passed());
        assert!(!check_assumptions(&m, Mode::NPlayer).passed());
    }

    #[test]
    fn nplayer_mode_flags_nonzero_f() {
        let mut c = zero_config();
        c.fns.f = FnSpec {
            kind: "Constant".into(),
            params: vec![0.3],
        };
        let m = build_model(&c).unwrap();
        assert!(check_assumptions(&m, Mode::MeanField).passed());
        let r = check_assumptions(&m, Mode::NPlayer);
        assert!(!r.passed());
        assert!(r.failures.iter().any(|f| f.contains("f = 0")));
    }

    #[test]
    fn nplayer_mode_requires_sigma() {
        let mut c = zero_config();
        c.coeffs.sigma = 0.0;
        let m = build_model(&c).unwrap();
        assert!(!check_assumptions(&m, Mode::NPlayer).passed());
    }

    #[test]
    fn check_assumptions_is_pure() {
        let mut c = zero_config();
        c.fns.h = FnSpec {
            kind: "SmoothedClamp".into(),
            params: vec![0.4, 1.0],
        };
        let m = build_model(&c).unwrap();
        assert_eq!(
            check_assumptions(&m, Mode::NPlayer),
            check_assumptions(&m, Mode::NPlayer)
        );
    }

    #[test]
    fn hash_tracks_config_content() {
        let a = build_model(&zero_config()).unwrap();
        let b = build_model(&zero_config()).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = zero_config();
        c.coeffs.a = 0.1;
        assert_ne!(build_model(&c).unwrap().hash(), a.hash());
    }

    #[test]
    fn config_round_trips_through_json() {
        let m = build_model(&zero_config()).unwrap();
        let text = serde_json::to_string(&m.to_config()).unwrap();
        let back = build_model(&ModelConfig::from_json_str(&text).unwrap()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn parse_error_reports_line() {
        let err = ModelConfig::from_json_str("{\n\"coeffs\": {\n  \"A\": oops }}").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    /// Low-discrepancy points (golden-ratio additive recurrence) on [-8, 8].
    fn quasi_random(n: usize) -> impl Iterator<Item = f64> {
        let phi = 0.618_033_988_749_894_9;
        (0..n).map(move |k| ((k as f64 * phi).fract() - 0.5) * 16.0)
    }

    #[test]
    fn derivatives_respect_bounds_and_finite_differences() {
        let delta = 1e-4;
        for f in registry() {
            let b = f.bounds();
            let (lo, hi) = f.deriv1_range();
            for x in quasi_random(10_000) {
                let d1 = f.deriv1(x);
                let d2 = f.deriv2(x);
                assert!(f.eval(x).abs() <= b.sup() * (1.0 + 1e-12) + 1e-15, "{f} sup");
                assert!(d1.abs() <= b.sup_d1() * (1.0 + 1e-12) + 1e-15, "{f} d1");
                assert!(d2.abs() <= b.sup_d2() * (1.0 + 1e-12) + 1e-15, "{f} d2");
                assert!(d1 >= lo - 1e-12 && d1 <= hi + 1e-12, "{f} range");
                let fd1 = (f.eval(x + delta) - f.eval(x - delta)) / (2.0 * delta);
                let fd2 = (f.deriv1(x + delta) - f.deriv1(x - delta)) / (2.0 * delta);
                // Central differences carry an O(δ²) truncation plus rounding.
                let c3 = 10.0 * (1.0 + b.sup_d2() + b.sup_d1() * 10.0);
                assert!((fd1 - d1).abs() <= c3 * delta * delta + 1e-10, "{f} fd1 at {x}");
                assert!((fd2 - d2).abs() <= 10.0 * c3 * delta * delta + 1e-9, "{f} fd2 at {x}");
                let (v, dv) = f.eval_d1(x);
                assert_eq!(v, f.eval(x));
                assert!((dv - d1).abs() <= 1e-15 * (1.0 + d1.abs()));
            }
        }
    }

    #[test]
    fn closed_form_bounds_are_tight() {
        for f in registry() {
            let b = f.bounds();
            let (mut s0, mut s1, mut s2) = (0f64, 0f64, 0f64);
            for k in 0..200_001 {
                let x = -25.0 + 50.0 * k as f64 / 200_000.0;
                s0 = s0.max(f.eval(x).abs());
                s1 = s1.max(f.deriv1(x).abs());
                s2 = s2.max(f.deriv2(x).abs());
            }
            // SmoothedClamp and tanh approach their value bound only at infinity.
            assert!(s0 <= b.0 + 1e-12 && s0 >= 0.9 * b.0, "{f} sup {s0} vs {}", b.0);
            assert!((s1 - b.1).abs() <= 1e-6 * (1.0 + b.1), "{f} d1 {s1} vs {}", b.1);
            assert!((s2 - b.2).abs() <= 1e-5 * (1.0 + b.2), "{f} d2 {s2} vs {}", b.2);
        }
    }
}
