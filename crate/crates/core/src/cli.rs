//! Command-line front end: `validate`, `solve`, `chaos` and `value`.
//!
//! Every command writes its artifacts through one writer, stamps them with
//! the hash of a run manifest, and keeps wall-clock timings in a separate
//! `timings.json` so reruns reproduce the other files byte for byte.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{self, DecouplingField, FieldGrid, DEFAULT_NNU, DEFAULT_NT};
use crate::master::{self, MasterLevel, ValueProbe, XAxis};
use crate::model::{check_assumptions, AssumptionReport, Mode, ModelConfig, ModelSpec};
use crate::riccati::{self, RiccatiSolution};
use crate::simulate::{self, Equilibrium, SimParams, XiLaw};

/// Residual levels below this count as round-off when a refinement slope
/// cannot be measured.
const ROUND_OFF_RESIDUAL: f64 = 1e-10;
/// Required empirical order of the master residuals.
pub const MIN_ORDER: f64 = 1.7;

#[derive(Debug, Parser)]
#[command(name = "mfgc", version, about = "Linear-quadratic mean-field games of controls with common noise")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the model assumptions and print the report.
    Validate(ValidateArgs),
    /// Solve P, Φ and the value offset and check the master residuals.
    Solve(SolveArgs),
    /// Propagation-of-chaos sweep over player counts.
    Chaos(ChaosArgs),
    /// Compare the grid value with its Monte Carlo estimate.
    Value(ValueArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    MeanField,
    NPlayer,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::MeanField => Mode::MeanField,
            ModeArg::NPlayer => Mode::NPlayer,
        }
    }
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum, default_value = "mean-field")]
    pub mode: ModeArg,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[arg(long = "grid-nt", default_value_t = DEFAULT_NT)]
    pub grid_nt: usize,
    #[arg(long = "grid-nnu", default_value_t = DEFAULT_NNU)]
    pub grid_nnu: usize,
    /// Half-width of the ν domain; derived from the model when omitted.
    #[arg(long = "domain-L")]
    pub domain_l: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Riccati RK4 steps.
    #[arg(long, default_value_t = riccati::DEFAULT_STEPS)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct ChaosArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "n-list", value_delimiter = ',', default_values_t = simulate::DEFAULT_N_LIST)]
    pub n_list: Vec<usize>,
    #[arg(long, default_value_t = simulate::DEFAULT_REPS)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Euler steps on `[0, T]`.
    #[arg(long, default_value_t = simulate::DEFAULT_STEPS)]
    pub steps: usize,
    /// Accepted range for both fitted slopes.
    #[arg(long = "slope-window", value_delimiter = ',', num_args = 2, default_values_t = [-1.35, -0.65], allow_hyphen_values = true)]
    pub slope_window: Vec<f64>,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Args)]
pub struct ValueArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output and cache directory.
    #[arg(long, default_value = "mfgc-out")]
    pub out: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub t0: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub x0: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub nu0: f64,
    #[arg(long, default_value_t = 20_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = simulate::DEFAULT_STEPS)]
    pub steps: usize,
    #[command(flatten)]
    pub grid: GridArgs,
}

/// Parse arguments, size the thread pool from `MFGC_THREADS` and run.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = std::env::var("MFGC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let mut stdout = std::io::stdout().lock();
    match run(cli.command, &mut stdout) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Run one command. `Ok(false)` means the command's check failed.
pub fn run(command: Command, out: &mut impl Write) -> Result<bool> {
    match command {
        Command::Validate(a) => cmd_validate(&a, out),
        Command::Solve(a) => cmd_solve(&a, out),
        Command::Chaos(a) => cmd_chaos(&a, out),
        Command::Value(a) => cmd_value(&a, out),
    }
}

fn load_model(path: &Path) -> Result<ModelSpec> {
    ModelConfig::from_path(path)
        .and_then(|c| c.build())
        .map_err(|e| match e {
            Error::Io(io) => Error::Io(std::io::Error::new(
                io.kind(),
                format!("{}: {io}", path.display()),
            )),
            other => other,
        })
}

/// Prints the assumption report; a config that does not build counts as a
/// failed validation.
pub fn cmd_validate(args: &ValidateArgs, out: &mut impl Write) -> Result<bool> {
    let model = match load_model(&args.config) {
        Ok(m) => m,
        Err(e @ (Error::Parse { .. } | Error::RejectedConfig { .. })) => {
            writeln!(out, "{}", json!({ "valid": false, "error": e.to_string() }))?;
            return Ok(false);
        }
        Err(e) => return Err(e),
    };
    let report: AssumptionReport = check_assumptions(&model, args.mode.into());
    writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    Ok(report.passed())
}

#[derive(Debug, Clone, Serialize)]
struct GridInfo {
    nt: usize,
    nnu: usize,
    half_width: f64,
}

/// Inputs that determine a run's artifacts.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub config_hash: String,
    pub version: &'static str,
    grid: GridInfo,
    pub riccati_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim: Option<serde_json::Value>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("manifest serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

/// Serializes every artifact of a run through one place.
struct ArtifactWriter {
    dir: PathBuf,
    manifest_hash: String,
}

impl ArtifactWriter {
    fn new(dir: &Path, manifest: &RunManifest) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let writer = ArtifactWriter {
            dir: dir.to_path_buf(),
            manifest_hash: manifest.hash(),
        };
        writer.json(
            "manifest.json",
            &json!({ "manifest_hash": writer.manifest_hash, "manifest": manifest }),
        )?;
        Ok(writer)
    }

    fn csv(&self, name: &str, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(self.dir.join(name))?);
        writeln!(w, "# manifest={}", self.manifest_hash)?;
        body(&mut w)?;
        w.flush()?;
        Ok(())
    }

    fn json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.dir.join(name), text)?;
        Ok(())
    }
}

fn write_timings(dir: &Path, timings: &[(&str, f64)]) -> Result<()> {
    let map: serde_json::Map<String, serde_json::Value> = timings
        .iter()
        .map(|(k, v)| (k.to_string(), json!(v)))
        .collect();
    fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&map)? + "\n")?;
    Ok(())
}

fn build_grid(model: &ModelSpec, ric: &RiccatiSolution, g: &GridArgs, nu0_max: f64) -> Result<FieldGrid> {
    match g.domain_l {
        Some(l) => FieldGrid::new(model.horizon, g.grid_nt, g.grid_nnu, l),
        None => FieldGrid::for_model(model, ric, g.grid_nt, g.grid_nnu, nu0_max),
    }
}

/// `Φ` from `<out>/cache/<key>/phi.csv`, solving and storing it when absent.
pub fn cached_phi(
    model: &ModelSpec,
    ric: &RiccatiSolution,
    grid: &FieldGrid,
    out: &Path,
) -> Result<(DecouplingField, bool)> {
    let key_text = format!(
        "{}:{}:{}:{:?}:{}",
        model.hash(),
        grid.nt,
        grid.nnu,
        grid.half_width,
        ric.n_steps()
    );
    let key = hex::encode(&Sha256::digest(key_text.as_bytes())[..8]);
    let dir = out.join("cache").join(key);
    let path = dir.join("phi.csv");
    if let Ok(file) = fs::File::open(&path) {
        if let Ok(f) = DecouplingField::read_csv(BufReader::new(file)) {
            if f.model_hash() == model.hash() && f.grid == *grid {
                return Ok((f, true));
            }
        }
    }
    let f = field::solve_phi(model, ric, grid)?;
    fs::create_dir_all(&dir)?;
    let mut w = BufWriter::new(fs::File::create(&path)?);
    f.write_csv(&mut w)?;
    w.flush()?;
    Ok((f, false))
}

/// Coarser grids used for the refinement check: up to two halvings while
/// the time grid keeps at least 100 steps.
fn refinement_grids(grid: &FieldGrid) -> Vec<FieldGrid> {
    let mut grids = vec![*grid];
    while grids.len() < 3 {
        let g = grids[0];
        if g.nt % 2 != 0 || (g.nnu - 1) % 2 != 0 || g.nt / 2 < 100 {
            break;
        }
        grids.insert(
            0,
            FieldGrid {
                nt: g.nt / 2,
                nnu: (g.nnu - 1) / 2 + 1,
                ..g
            },
        );
    }
    grids
}

fn slope_ok(report: &master::ResidualReport) -> bool {
    report.max_residual <= ROUND_OFF_RESIDUAL
        || report.refinement_slope.is_some_and(|s| s >= MIN_ORDER)
}

pub fn cmd_solve(args: &SolveArgs, out: &mut impl Write) -> Result<bool> {
    let start = Instant::now();
    let model = load_model(&args.config)?;
    let ric = riccati::solve_riccati(&model, args.steps)?;
    let t_riccati = start.elapsed().as_secs_f64();
    let grid = build_grid(&model, &ric, &args.grid, 0.0)?;
    let manifest = RunManifest {
        command: "solve",
        config_hash: model.hash().to_string(),
        version: env!("CARGO_PKG_VERSION"),
        grid: GridInfo {
            nt: grid.nt,
            nnu: grid.nnu,
            half_width: grid.half_width,
        },
        riccati_steps: args.steps,
        sim: None,
        outputs: ["riccati.csv", "phi.csv", "value_offset.csv", "residual_report.json"]
            .map(String::from)
            .to_vec(),
    };
    fs::create_dir_all(&args.out)?;
    let (phi, from_cache) = cached_phi(&model, &ric, &grid, &args.out)?;
    let t_phi = start.elapsed().as_secs_f64();

    let axis = XAxis::default();
    let grids = refinement_grids(&grid);
    let mut levels: Vec<MasterLevel> = Vec::with_capacity(grids.len());
    for g in &grids[..grids.len() - 1] {
        let f = field::solve_phi(&model, &ric, g)?;
        levels.push(master::master_level(&model, &ric, &f, &axis)?);
    }
    levels.push(master::master_level(&model, &ric, &phi, &axis)?);
    master::attach_refinement_slopes(&mut levels);
    let finest = *levels.last().expect("at least one level");
    let mf = master::solve_value_offset(master::assemble_u(&model, &ric, &phi)?, &model)?;
    let t_master = start.elapsed().as_secs_f64();

    let bound = 10.0 * finest.phi.interior_max.max(ROUND_OFF_RESIDUAL);
    let passed = slope_ok(&finest.vec_master)
        && slope_ok(&finest.master)
        && finest.vec_master.max_residual <= bound
        && finest.master.max_residual <= bound
        && finest.collections.passed();

    let w = ArtifactWriter::new(&args.out, &manifest)?;
    w.csv("riccati.csv", |o| ric.write_csv(o))?;
    w.csv("phi.csv", |o| phi.write_csv(o))?;
    w.csv("value_offset.csv", |o| {
        mf.offset().expect("offset solved").write_csv(o)
    })?;
    let report = json!({
        "manifest_hash": w.manifest_hash,
        "vec_master": finest.vec_master,
        "master": finest.master,
        "phi": finest.phi,
        "collections": finest.collections,
        "levels": levels,
        "passed": passed,
    });
    w.json("residual_report.json", &report)?;
    write_timings(
        &args.out,
        &[
            ("riccati_s", t_riccati),
            ("phi_s", t_phi - t_riccati),
            ("master_s", t_master - t_phi),
            ("total_s", start.elapsed().as_secs_f64()),
            ("phi_from_cache", if from_cache { 1.0 } else { 0.0 }),
        ],
    )?;
    writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    Ok(passed)
}

pub fn cmd_chaos(args: &ChaosArgs, out: &mut impl Write) -> Result<bool> {
    let start = Instant::now();
    let model = load_model(&args.config)?;
    let assumptions = check_assumptions(&model, Mode::NPlayer);
    if !assumptions.passed() {
        writeln!(out, "{}", serde_json::to_string_pretty(&assumptions)?)?;
        return Ok(false);
    }
    let (lo, hi) = (args.slope_window[0], args.slope_window[1]);
    let params = SimParams {
        n_steps: args.steps,
        n_list: args.n_list.clone(),
        reps: args.reps,
        seed: args.seed,
        xi_law: XiLaw::default(),
        ..SimParams::default()
    };
    params.validate()?;
    let ric = riccati::solve_riccati(&model, riccati::DEFAULT_STEPS)?;
    let grid = build_grid(&model, &ric, &args.grid, 0.0)?;
    let manifest = RunManifest {
        command: "chaos",
        config_hash: model.hash().to_string(),
        version: env!("CARGO_PKG_VERSION"),
        grid: GridInfo {
            nt: grid.nt,
            nnu: grid.nnu,
            half_width: grid.half_width,
        },
        riccati_steps: riccati::DEFAULT_STEPS,
        sim: Some(json!({ "params": params, "slope_window": [lo, hi] })),
        outputs: ["chaos_sweep.csv", "chaos_report.json"].map(String::from).to_vec(),
    };
    fs::create_dir_all(&args.out)?;
    let (phi, _) = cached_phi(&model, &ric, &grid, &args.out)?;
    let t_phi = start.elapsed().as_secs_f64();
    let eq = Equilibrium::new(&model, &ric, &phi)?;
    let report = simulate::chaos_sweep(&eq, &params)?;
    let t_sweep = start.elapsed().as_secs_f64();

    let in_window = |s: Option<simulate::FittedSlope>| s.is_some_and(|s| s.within(lo, hi));
    let passed = !report.degenerate
        && in_window(report.slope_sup_sq_gap)
        && in_window(report.slope_nu_gap_sq);
    let w = ArtifactWriter::new(&args.out, &manifest)?;
    w.csv("chaos_sweep.csv", |o| report.write_csv(o))?;
    let summary = json!({
        "manifest_hash": w.manifest_hash,
        "report": report,
        "slope_window": [lo, hi],
        "passed": passed,
    });
    w.json("chaos_report.json", &summary)?;
    write_timings(
        &args.out,
        &[
            ("phi_s", t_phi),
            ("sweep_s", t_sweep - t_phi),
            ("total_s", start.elapsed().as_secs_f64()),
        ],
    )?;
    writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
    Ok(passed)
}

/// Passes when the Monte Carlo estimate lies within 3 standard errors of the
/// grid value.
pub fn cmd_value(args: &ValueArgs, out: &mut impl Write) -> Result<bool> {
    let start = Instant::now();
    let model = load_model(&args.config)?;
    let ric = riccati::solve_riccati(&model, riccati::DEFAULT_STEPS)?;
    let grid = build_grid(&model, &ric, &args.grid, args.nu0.abs())?;
    fs::create_dir_all(&args.out)?;
    let (phi, from_cache) = cached_phi(&model, &ric, &grid, &args.out)?;
    let mf = master::solve_value_offset(master::assemble_u(&model, &ric, &phi)?, &model)?;
    let grid_v = mf.value(args.t0, args.x0, args.nu0)?;
    let probe = ValueProbe {
        t0: args.t0,
        x0: args.x0,
        nu0: args.nu0,
    };
    let mc = master::value_v_monte_carlo(&model, &mf, probe, args.paths, args.steps, args.seed)?;
    let z = if mc.std_error > 0.0 {
        (mc.estimate - grid_v) / mc.std_error
    } else if (mc.estimate - grid_v).abs() <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    };
    let manifest = RunManifest {
        command: "value",
        config_hash: model.hash().to_string(),
        version: env!("CARGO_PKG_VERSION"),
        grid: GridInfo {
            nt: grid.nt,
            nnu: grid.nnu,
            half_width: grid.half_width,
        },
        riccati_steps: riccati::DEFAULT_STEPS,
        sim: Some(json!({ "probe": probe, "paths": args.paths, "steps": args.steps, "seed": args.seed })),
        outputs: vec!["value.json".into()],
    };
    let w = ArtifactWriter::new(&args.out, &manifest)?;
    let passed = z.abs() <= 3.0;
    let summary = json!({
        "manifest_hash": w.manifest_hash,
        "probe": probe,
        "grid_v": grid_v,
        "mc_v": mc.estimate,
        "std_error": mc.std_error,
        "z_score": z,
        "n_paths": mc.n_paths,
        "n_steps": mc.n_steps,
        "passed": passed,
    });
    w.json("value.json", &summary)?;
    write_timings(
        &args.out,
        &[
            ("total_s", start.elapsed().as_secs_f64()),
            ("phi_from_cache", if from_cache { 1.0 } else { 0.0 }),
        ],
    )?;
    writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
    Ok(passed)
}
