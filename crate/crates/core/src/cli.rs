//! Command-line front end: config parsing, dispatch, seeding and output.
//!
//! Exit status: 0 when every counted check passes, 1 when a check fails,
//! 2 on usage or configuration errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{functionals_ledger, LedgerConfig};
use crate::geometry::build_grid;
use crate::heat_kernel::{kernel_matrix, scaling_residual};
use crate::montecarlo::{replica_rng, run_experiment, with_threads, ExperimentConfig, ExperimentKind, ExperimentReport, Table};
use crate::noise::{build_factor, Baseline, CovarianceKernel, KernelFamily, NoiseConstants};
use crate::solver::{
    contraction_bound, picard_alpha, picard_solve, simulate, FieldState, NoiseRealization, Propagator, SigmaFunction, SigmaSpec, Simulator,
    SolverConfig, TrajectoryPoint,
};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sphere-she", version, about = "Stochastic heat equation on spheres of radius R")]
pub struct Cli {
    /// Worker threads for replica farms (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Output directory; defaults to runs/<command>-<config hash prefix>.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Row-sum defect of the heat-kernel matrix and the scaling-identity residual.
    KernelCheck {
        #[arg(long = "R")]
        radius: f64,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        n: u32,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        /// Also write the kernel matrix (little-endian f64) to this file.
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Quadrature checks of the noise functionals over a parameter sweep.
    FunctionalsLedger {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// One realization, optionally with a Picard iteration on the same noise.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// A replica experiment.
    Experiment {
        kind: ExperimentArg,
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExperimentArg {
    Moments,
    Tails,
    SupScaling,
    Holder,
    Independence,
    GaussianOracle,
}

impl From<ExperimentArg> for ExperimentKind {
    fn from(a: ExperimentArg) -> Self {
        match a {
            ExperimentArg::Moments => ExperimentKind::Moments,
            ExperimentArg::Tails => ExperimentKind::Tails,
            ExperimentArg::SupScaling => ExperimentKind::SupScaling,
            ExperimentArg::Holder => ExperimentKind::Holder,
            ExperimentArg::Independence => ExperimentKind::Independence,
            ExperimentArg::GaussianOracle => ExperimentKind::GaussianOracle,
        }
    }
}

// ---------------------------------------------------------------------------
// Configs

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {}", path.display(), e.message())]))
}

/// Reads and fully validates an experiment config; every violation is
/// reported at once.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = read_toml(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// MASTER_SEED from the environment, if set.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var("MASTER_SEED") {
        Ok(s) => s
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(vec![format!("MASTER_SEED must be a decimal 64-bit integer, got {s:?}")])),
        Err(_) => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PicardParams {
    pub iterations: usize,
    /// Moment order k in the contraction factor L_σ√(2h_up·k/α).
    pub k: f64,
    /// Weight α of the norm; defaults to 8L_σ²h_up·k, where the factor is ½.
    pub alpha: Option<f64>,
}

impl Default for PicardParams {
    fn default() -> Self {
        Self { iterations: 5, k: 2.0, alpha: None }
    }
}

/// A single realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub radius: f64,
    pub t: f64,
    pub grid_level: u32,
    pub master_seed: u64,
    /// Constant initial datum.
    pub initial_value: f64,
    pub solver: SolverConfig,
    pub kernel: KernelFamily,
    pub baseline: Baseline,
    pub constants: NoiseConstants,
    pub sigma: SigmaSpec,
    pub picard: Option<PicardParams>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            radius: std::f64::consts::E.powi(2),
            t: 1.0,
            grid_level: 2,
            master_seed: 0,
            initial_value: 0.0,
            solver: SolverConfig::for_time(1.0, 20),
            kernel: KernelFamily::ExponentialGeodesic { kappa: 4.0 },
            baseline: Baseline::LowerBound,
            constants: NoiseConstants::new(0.0, 0.0),
            sigma: SigmaSpec::Constant { value: 1.0 },
            picard: None,
        }
    }
}

impl SimulateConfig {
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardSummary {
    pub alpha: f64,
    /// L_σ√(2h_up·k/α).
    pub bound: f64,
    pub differences: Vec<f64>,
    pub ratios: Vec<f64>,
    pub fixed_point_at: Option<usize>,
    /// 1-based iteration whose ratio first falls below the bound.
    pub below_bound_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub config_hash: String,
    pub master_seed: u64,
    pub final_max_abs: f64,
    pub trajectory: Vec<TrajectoryPoint>,
    pub picard: Option<PicardSummary>,
    #[serde(skip)]
    pub final_field: Vec<f64>,
}

/// Runs one realization (replica stream 0) and, when requested, a Picard
/// iteration driven by an independent noise path (stream 1).
pub fn run_simulation(cfg: &SimulateConfig) -> Result<SimulateReport> {
    let grid = Arc::new(build_grid(cfg.radius, cfg.grid_level)?);
    let kernel = CovarianceKernel::new(cfg.kernel.clone(), cfg.constants, cfg.radius, cfg.baseline)?;
    let factor = Arc::new(build_factor(&grid, &kernel)?);
    let propagator = Arc::new(Propagator::from_config(&grid, &cfg.solver)?);
    let sigma = SigmaFunction::new(cfg.sigma.clone())?;
    let sim = Simulator::new(Arc::clone(&propagator), Arc::clone(&factor), sigma.clone())?;
    let u0 = FieldState::constant(Arc::clone(&grid), cfg.initial_value);
    let mut rng = replica_rng(cfg.master_seed, 0);
    let (field, trajectory) = simulate(&u0, cfg.t, &cfg.solver, &sim, &mut rng)?;

    let picard = match &cfg.picard {
        None => None,
        Some(pp) => {
            let h_up = kernel.h_up();
            let alpha = pp.alpha.unwrap_or_else(|| picard_alpha(sigma.lipschitz(), h_up, pp.k));
            let bound = contraction_bound(sigma.lipschitz(), h_up, pp.k, alpha);
            let noise = NoiseRealization::sample(&factor, cfg.solver.dt, cfg.solver.steps, &mut replica_rng(cfg.master_seed, 1));
            let res = picard_solve(&u0, &propagator, &sigma, &noise, pp.iterations, alpha)?;
            let below_bound_at = res.ratios.iter().position(|&r| r < bound).map(|i| i + 2);
            Some(PicardSummary {
                alpha,
                bound,
                differences: res.differences,
                ratios: res.ratios,
                fixed_point_at: res.fixed_point_at,
                below_bound_at,
            })
        }
    };
    Ok(SimulateReport {
        config_hash: cfg.hash(),
        master_seed: cfg.master_seed,
        final_max_abs: field.max_abs(),
        trajectory,
        picard,
        final_field: field.values,
    })
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub master_seed: Option<u64>,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
    pub version: String,
    pub output_dir: PathBuf,
    pub exit_status: i32,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_table(dir: &Path, table: &Table, hash: &str) -> Result<()> {
    let mut buf = format!("# config_hash {hash}\n").into_bytes();
    table.write_csv(&mut buf)?;
    fs::write(dir.join(format!("{}.csv", table.name)), buf)?;
    Ok(())
}

struct Run {
    command: String,
    config_path: Option<PathBuf>,
    started: f64,
    out: PathBuf,
}

impl Run {
    fn new(command: &str, config_path: Option<&Path>, out: &Option<PathBuf>, hash: &str) -> Result<Self> {
        let out = out.clone().unwrap_or_else(|| PathBuf::from("runs").join(format!("{command}-{}", &hash[..12])));
        fs::create_dir_all(&out)?;
        Ok(Self { command: command.into(), config_path: config_path.map(Path::to_path_buf), started: now(), out })
    }

    /// Writes the config snapshot (TOML, re-runnable) and the manifest.
    fn finish<C: Serialize>(self, config: &C, hash: &str, seed: Option<u64>, status: i32) -> Result<i32> {
        let snapshot = toml::to_string(config).map_err(|e| Error::Config(vec![format!("cannot snapshot config: {e}")]))?;
        fs::write(self.out.join("config.toml"), snapshot)?;
        let manifest = RunManifest {
            command: self.command,
            config_path: self.config_path,
            config: serde_json::to_value(config)?,
            config_hash: hash.into(),
            master_seed: seed,
            started: self.started,
            finished: now(),
            version: env!("CARGO_PKG_VERSION").into(),
            output_dir: self.out.clone(),
            exit_status: status,
        };
        fs::write(self.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        println!("outputs in {}", self.out.display());
        Ok(status)
    }
}

// ---------------------------------------------------------------------------
// Dispatch

fn print_report(rep: &ExperimentReport) {
    for c in &rep.checks {
        let tag = if c.informational { " (informational)" } else { "" };
        println!("{:<30} {:?}{tag} lhs={:.6e} rhs={:.6e}", c.id, c.status, c.lhs, c.rhs);
    }
    for n in &rep.notes {
        println!("note: {n}");
    }
    println!("all_pass: {}", rep.all_pass);
}

/// Runs an experiment config end to end and writes its outputs into `out`.
pub fn run_experiment_to_dir(cfg: &ExperimentConfig, config_path: Option<&Path>, out: &Option<PathBuf>) -> Result<(ExperimentReport, PathBuf)> {
    let hash = cfg.hash();
    let run = Run::new(&format!("experiment-{}", cfg.experiment.name()), config_path, out, &hash)?;
    let rep = run_experiment(cfg)?;
    fs::write(run.out.join("report.json"), rep.to_json())?;
    for t in &rep.tables {
        write_table(&run.out, t, &hash)?;
    }
    let dir = run.out.clone();
    let status = if rep.all_pass { EXIT_PASS } else { EXIT_FAIL };
    run.finish(cfg, &hash, Some(cfg.master_seed), status)?;
    Ok((rep, dir))
}

pub fn dispatch(cli: Cli) -> Result<i32> {
    let out = cli.out.clone();
    match cli.command {
        Command::KernelCheck { radius, t, n, tol, matrix } => {
            let grid = Arc::new(build_grid(radius, n)?);
            let km = kernel_matrix(&grid, t, tol)?;
            let residual = scaling_residual(radius, t, tol, 1000)?;
            println!("nodes            {}", grid.len());
            println!("truncation       {:?}", km.truncation());
            println!("delta_row        {:.6e}", km.row_defect());
            println!("scaling_residual {:.6e}", residual);
            if let Some(path) = matrix {
                km.write_binary(fs::File::create(&path)?)?;
                println!("matrix written to {}", path.display());
            }
            Ok(EXIT_PASS)
        }
        Command::FunctionalsLedger { config } => {
            let cfg: LedgerConfig = match &config {
                Some(p) => read_toml(p)?,
                None => LedgerConfig::default(),
            };
            let hash = sha256_hex(&serde_json::to_vec(&cfg)?);
            let run = Run::new("functionals-ledger", config.as_deref(), &out, &hash)?;
            let rep = with_threads(cli.threads, || functionals_ledger(&cfg))??;
            fs::write(run.out.join("report.json"), serde_json::to_string_pretty(&rep)?)?;
            for c in &rep.checks {
                let tag = if c.informational { " (informational)" } else { "" };
                println!("{:<26} {:?}{tag} lhs={:.6e} rhs={:.6e}", c.id, c.status, c.lhs, c.rhs);
            }
            println!("all_pass: {}", rep.all_pass);
            let status = if rep.all_pass { EXIT_PASS } else { EXIT_FAIL };
            run.finish(&cfg, &hash, None, status)
        }
        Command::Simulate { config } => {
            let mut cfg: SimulateConfig = match &config {
                Some(p) => read_toml(p)?,
                None => SimulateConfig::default(),
            };
            if let Some(seed) = seed_override()? {
                cfg.master_seed = seed;
            }
            let hash = cfg.hash();
            let run = Run::new("simulate", config.as_deref(), &out, &hash)?;
            let rep = with_threads(cli.threads, || run_simulation(&cfg))??;
            fs::write(run.out.join("report.json"), serde_json::to_string_pretty(&rep)?)?;
            let mut field = Table { name: "final_field".into(), columns: vec!["node".into(), "u".into()], rows: Vec::new() };
            field.rows = rep.final_field.iter().enumerate().map(|(i, v)| vec![i as f64, *v]).collect();
            write_table(&run.out, &field, &hash)?;
            println!("final max|u| = {:.6e}", rep.final_max_abs);
            let mut status = EXIT_PASS;
            if let Some(pc) = &rep.picard {
                println!("picard ratios {:?} (bound {:.4}), fixed point at {:?}", pc.ratios, pc.bound, pc.fixed_point_at);
                if pc.fixed_point_at.is_none() && pc.below_bound_at.is_none() {
                    status = EXIT_FAIL;
                }
            }
            run.finish(&cfg, &hash, Some(cfg.master_seed), status)
        }
        Command::Experiment { kind, config } => {
            let mut cfg = parse_config(&config)?;
            cfg.experiment = kind.into();
            if let Some(seed) = seed_override()? {
                cfg.master_seed = seed;
            }
            let (rep, _) = with_threads(cli.threads, || run_experiment_to_dir(&cfg, Some(&config), &out))??;
            print_report(&rep);
            Ok(if rep.all_pass { EXIT_PASS } else { EXIT_FAIL })
        }
    }
}

/// Parses arguments, runs, and maps errors to exit codes.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}
