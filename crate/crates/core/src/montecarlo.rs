//! Replica farm and the statistical experiments: moments, tails, growth of
//! the supremum in log R, spatial modulus, independence of truncated
//! processes, and the Gaussian covariance oracle.
//!
//! Replica i of a run draws from ChaCha8 seeded with the run seed on stream
//! i, so results do not depend on thread count or scheduling. Per-replica
//! outputs are collected in replica order and reduced on one thread.

use std::f64::consts::{E, PI};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain, Error, Result};
use crate::geometry::{build_grid, geodesic_angle, mesh_angle_bound, SphereGrid, SpherePoint};
use crate::noise::{build_factor, validate_constants, Baseline, CovarianceKernel, KernelFamily, NoiseConstants, NoiseFactor, CONSTANTS_WINDOW};
use crate::report::{p, BoundCheck, Status};
use crate::ring::RingOperator;
use crate::solver::{NoiseRealization, Propagator, SigmaFunction, SigmaSpec, Simulator, SolverConfig, TruncatedSolver};

// ---------------------------------------------------------------------------
// Seeding and the replica farm

/// RNG of one replica: the run seed selects the key, the replica the stream.
pub fn replica_rng(seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

/// Seed of the `index`-th sub-run (one per radius) of a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    master.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs `f` for replicas 0..n in parallel and returns the results in
/// replica order. `init` builds per-thread scratch state.
pub fn run_replicas<S, T, I, F>(n: usize, seed: u64, init: I, f: F) -> Result<Vec<T>>
where
    T: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, u64, &mut ChaCha8Rng) -> Result<T> + Sync + Send,
{
    (0..n as u64)
        .into_par_iter()
        .map_init(&init, |s, i| {
            let mut rng = replica_rng(seed, i);
            f(s, i, &mut rng)
        })
        .collect()
}

/// Runs `f` on a pool of `threads` workers (0 = rayon's default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(vec![format!("cannot build thread pool: {e}")]))?;
    Ok(pool.install(f))
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub stderr: f64,
}

impl Summary {
    /// mean ± z·stderr.
    pub fn interval(&self, z: f64) -> (f64, f64) {
        (self.mean - z * self.stderr, self.mean + z * self.stderr)
    }
}

/// Two-pass mean, unbiased variance and standard error of the mean.
pub fn summarize(xs: &[f64]) -> Summary {
    let n = xs.len();
    if n == 0 {
        return Summary { n, mean: f64::NAN, variance: f64::NAN, stderr: f64::NAN };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let variance = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    Summary { n, mean, variance, stderr: (variance / n as f64).sqrt() }
}

/// Wilson score interval for k successes out of n.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let ph = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (ph + z2 / (2.0 * nf)) / denom;
    let half = z * (ph * (1.0 - ph) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Sample Pearson correlation; NaN when either sample is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (sx, sy) = (summarize(x), summarize(y));
    let cov = x.iter().zip(y).map(|(a, b)| (a - sx.mean) * (b - sy.mean)).sum::<f64>() / (x.len() - 1) as f64;
    cov / (sx.variance * sy.variance).sqrt()
}

/// Fisher-z interval tanh(atanh r ± z/√(n−3)).
pub fn fisher_interval(r: f64, n: usize, z: f64) -> (f64, f64) {
    if n <= 3 || !r.is_finite() {
        return (-1.0, 1.0);
    }
    let c = r.clamp(-1.0 + 1e-15, 1.0 - 1e-15).atanh();
    let h = z / ((n - 3) as f64).sqrt();
    ((c - h).tanh(), (c + h).tanh())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub name: String,
    pub slope: f64,
    pub slope_stderr: f64,
    pub intercept: f64,
    pub intercept_stderr: f64,
    pub points: usize,
}

/// Ordinary least squares y = a + b·x with classical standard errors.
pub fn ols(name: &str, x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return domain("a linear fit needs at least two (x, y) points");
    }
    let (mx, my) = (x.iter().sum::<f64>() / n as f64, y.iter().sum::<f64>() / n as f64);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return domain("a linear fit needs distinct x values");
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let (slope_stderr, intercept_stderr) = if n > 2 {
        let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        let s2 = rss / (n - 2) as f64;
        ((s2 / sxx).sqrt(), (s2 * (1.0 / n as f64 + mx * mx / sxx)).sqrt())
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(LinearFit { name: name.into(), slope, slope_stderr, intercept, intercept_stderr, points: n })
}

// ---------------------------------------------------------------------------
// Exponents and the lower-bound parameter schedule

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentWindow {
    pub alpha_l: f64,
    pub alpha_u: f64,
}

/// α_l = 1/4 + C_lo/4 − C_up/8 and α_u = 1/2 + C_up/4.
pub fn exponent_window(c: NoiseConstants) -> Result<ExponentWindow> {
    if !validate_constants(c) {
        return domain(format!("noise constants ({}, {}) violate {CONSTANTS_WINDOW}", c.c_h_lo, c.c_h_up));
    }
    Ok(ExponentWindow { alpha_l: 0.25 + c.c_h_lo / 4.0 - c.c_h_up / 8.0, alpha_u: 0.5 + c.c_h_up / 4.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInputs {
    pub radius: f64,
    pub t: f64,
    pub constants: NoiseConstants,
    pub sigma_lo: f64,
    pub lipschitz: f64,
    /// |σ(0)|.
    pub sigma_zero: f64,
    /// Bound U on sup|u0|.
    pub u_bound: f64,
    pub eps_alpha: f64,
    pub eps0: f64,
    /// Exponent C_k < 2 in N = ⌊k^{C_k}N(k)⌋ + 1.
    pub c_k: f64,
}

/// The choices of k, α, β, λ, M, Picard depth and point count N made in the
/// lower-bound argument, evaluated at one R. N is kept in log form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSchedule {
    pub radius: f64,
    pub k: u64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub m: f64,
    pub picard_n: u64,
    /// ln N(k); None when N(k) is infinite or zero.
    pub log_n_k: Option<f64>,
    /// ln(k^{C_k} N(k)).
    pub log_n: Option<f64>,
    /// N itself when it fits in an f64.
    pub n: Option<f64>,
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

pub fn parameter_schedule(inp: &ScheduleInputs) -> Result<ParameterSchedule> {
    let ScheduleInputs { radius, t, constants, sigma_lo, lipschitz, sigma_zero, u_bound, eps_alpha, eps0, c_k } = *inp;
    if !(radius > 1.0 && t > 0.0 && eps_alpha > 0.0 && eps0 > 0.0 && eps0 < 1.0 && c_k > 0.0 && c_k < 2.0) {
        return domain("schedule needs R > 1, t > 0, eps_alpha > 0, 0 < eps0 < 1 and 0 < C_k < 2");
    }
    let log_r = radius.ln();
    let (h_lo, h_up) = (constants.h_lo(radius), constants.h_up(radius));
    let lmax = lipschitz.max(1.0);
    let k_real = log_r.powf(0.5 - constants.c_h_up / 4.0) / (2.0 * 2f64.sqrt() * PI * ((4.0 + eps_alpha) * t).sqrt() * lmax);
    let k = k_real.floor().max(0.0) as u64;
    let kf = k as f64;
    let alpha = 8.0 * PI * PI * h_up * lmax * lmax * kf;
    let beta = 4.0 * alpha * t;
    let decay = 1.0 - (-beta / 2.0).exp();
    let lambda = (h_lo * t / E).sqrt() * sigma_lo * (1.0 - eps0) * decay * kf.sqrt();
    let m = 4.0 * PI * PI * t * sigma_lo * sigma_lo * (1.0 - eps0).powi(2) * decay * decay;
    let picard_n = log_r.round().max(0.0) as u64;
    if k == 0 {
        return Ok(ParameterSchedule {
            radius,
            k,
            alpha,
            beta,
            lambda,
            m,
            picard_n,
            log_n_k: Some(0.0),
            log_n: None,
            n: Some(1.0),
            degenerate: true,
            note: format!("k = floor({k_real:.4}) = 0 at this R: the schedule is degenerate"),
        });
    }
    let q = (2.0 * kf * h_up / alpha).sqrt();
    let numer = u_bound + 2.0 * sigma_zero * q;
    let denom = 1.0 - 2.0 * lipschitz * q;
    let log_inner = alpha * t + 0.5 - 0.5 * (m * h_lo * kf).ln() + numer.ln() - denom.ln();
    let log_n_k = 4.0 * kf * log_inner;
    let log_n = c_k * kf.ln() + log_n_k;
    let finite = |x: f64| if x.is_finite() { Some(x) } else { None };
    let n = if log_n.is_finite() && log_n < 700.0 {
        Some(log_n.exp().floor() + 1.0)
    } else if log_n == f64::NEG_INFINITY {
        Some(1.0)
    } else {
        None
    };
    let note = if m == 0.0 { "C_sigma_lo = 0 makes M = 0 and N(k) infinite".to_string() } else { String::new() };
    Ok(ParameterSchedule {
        radius,
        k,
        alpha,
        beta,
        lambda,
        m,
        picard_n,
        log_n_k: finite(log_n_k),
        log_n: finite(log_n),
        n,
        degenerate: false,
        note,
    })
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Moments,
    Tails,
    SupScaling,
    Holder,
    Independence,
    GaussianOracle,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Moments => "moments",
            ExperimentKind::Tails => "tails",
            ExperimentKind::SupScaling => "sup_scaling",
            ExperimentKind::Holder => "holder",
            ExperimentKind::Independence => "independence",
            ExperimentKind::GaussianOracle => "gaussian_oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentsParams {
    pub orders: Vec<u32>,
    /// Relative slack on each moment bound; 3 standard errors are added when larger.
    pub slack: f64,
    /// Relative standard error above which a failing order is inconclusive.
    pub max_relative_error: f64,
}

impl Default for MomentsParams {
    fn default() -> Self {
        Self { orders: vec![2, 4, 6], slack: 0.25, max_relative_error: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TailsParams {
    pub m_grid: Vec<f64>,
    pub z: f64,
}

impl Default for TailsParams {
    fn default() -> Self {
        Self { m_grid: vec![7.0, 8.0, 10.0, 12.0, 15.0], z: 1.96 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupParams {
    pub slope_window: (f64, f64),
    pub z: f64,
}

impl Default for SupParams {
    fn default() -> Self {
        Self { slope_window: (0.10, 0.70), z: 1.96 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HolderParams {
    pub gamma: f64,
    /// Largest separation used in the exponent fit.
    pub max_fit_angle: f64,
    /// The fitted exponent may exceed 1/3 by this much.
    pub exponent_slack: f64,
}

impl Default for HolderParams {
    fn default() -> Self {
        Self { gamma: 0.25, max_fit_angle: PI / 4.0, exponent_slack: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndependenceParams {
    pub beta: f64,
    pub picard_n: usize,
    /// Center separations (angles) to test.
    pub separations: Vec<f64>,
    /// Separation of the overlapping-ball negative control.
    pub control_separation: f64,
}

impl Default for IndependenceParams {
    fn default() -> Self {
        Self { beta: 2.0, picard_n: 2, separations: vec![1.5, 2.5, PI], control_separation: PI / 16.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleParams {
    /// Also evaluate dt·Σ P(l·dt) H P(l·dt)ᵀ with freshly built kernels.
    pub direct_diagnostic: bool,
    pub z: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self { direct_diagnostic: true, z: 3.0 }
    }
}

/// One experiment. The initial datum is u0 ≡ 0 throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Radii; alternatively `log_r_list` gives log R.
    pub r_list: Vec<f64>,
    pub log_r_list: Vec<f64>,
    pub t: f64,
    pub grid_level: u32,
    pub replicas: usize,
    pub master_seed: u64,
    pub solver: SolverConfig,
    pub kernel: KernelFamily,
    pub baseline: Baseline,
    pub constants: NoiseConstants,
    pub sigma: SigmaSpec,
    pub moments: MomentsParams,
    pub tails: TailsParams,
    pub sup_scaling: SupParams,
    pub holder: HolderParams,
    pub independence: IndependenceParams,
    pub oracle: OracleParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::Moments,
            r_list: Vec::new(),
            log_r_list: vec![2.0],
            t: 1.0,
            grid_level: 2,
            replicas: 1000,
            master_seed: 0,
            solver: SolverConfig::for_time(1.0, 20),
            kernel: KernelFamily::Askey { theta_c: PI / 8.0, exponent: 2.0 },
            baseline: Baseline::Zero,
            constants: NoiseConstants { c_h_lo: 0.0, c_h_up: 0.0 },
            sigma: SigmaSpec::Constant { value: 1.0 },
            moments: MomentsParams::default(),
            tails: TailsParams::default(),
            sup_scaling: SupParams::default(),
            holder: HolderParams::default(),
            independence: IndependenceParams::default(),
            oracle: OracleParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn radii(&self) -> Vec<f64> {
        if self.r_list.is_empty() {
            self.log_r_list.iter().map(|l| l.exp()).collect()
        } else {
            self.r_list.clone()
        }
    }

    /// Every violated constraint, not just the first.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !self.r_list.is_empty() && !self.log_r_list.is_empty() {
            errs.push("give either r_list or log_r_list, not both".to_string());
        }
        let radii = self.radii();
        if radii.is_empty() {
            errs.push("no radius given".to_string());
        }
        for r in &radii {
            if !(*r > E) {
                errs.push(format!("every R must exceed e, got {r}"));
            }
        }
        if !(self.t > 0.0 && self.t.is_finite()) {
            errs.push(format!("t must be positive, got {}", self.t));
        }
        if self.replicas < 2 {
            errs.push("replicas must be at least 2".to_string());
        }
        if self.grid_level > 5 {
            errs.push(format!("grid_level {} is beyond what fits in memory (max 5)", self.grid_level));
        }
        if let Err(e) = self.solver.validate(Some(self.t)) {
            errs.push(e.to_string());
        }
        if !validate_constants(self.constants) {
            errs.push(format!(
                "noise constants (C_h_lo = {}, C_h_up = {}) violate {CONSTANTS_WINDOW}",
                self.constants.c_h_lo, self.constants.c_h_up
            ));
        } else {
            for r in radii.iter().filter(|r| **r > 1.0) {
                if let Err(e) = CovarianceKernel::new(self.kernel.clone(), self.constants, *r, self.baseline) {
                    errs.push(format!("kernel at R = {r}: {e}"));
                }
            }
        }
        if let Err(e) = SigmaFunction::new(self.sigma.clone()) {
            errs.push(format!("sigma: {e}"));
        }
        if self.moments.orders.iter().any(|&k| k == 0) {
            errs.push("moment orders must be >= 1".to_string());
        }
        if !(self.holder.gamma > 0.0 && self.holder.gamma < 1.0 / 3.0) {
            errs.push(format!("holder gamma must lie in (0, 1/3), got {}", self.holder.gamma));
        }
        if !(self.independence.beta > 0.0) {
            errs.push("independence beta must be positive".to_string());
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// SHA-256 of the canonical JSON of the configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", self.columns.join(","))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: ExperimentKind,
    pub config_hash: String,
    pub master_seed: u64,
    pub replicas: usize,
    pub window: ExponentWindow,
    pub tables: Vec<Table>,
    pub fits: Vec<LinearFit>,
    pub schedules: Vec<ParameterSchedule>,
    pub checks: Vec<BoundCheck>,
    pub notes: Vec<String>,
    /// The configuration sits outside the regime the bounds speak about.
    pub counter_regime: bool,
    pub all_pass: bool,
}

impl ExperimentReport {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            experiment: cfg.experiment,
            config_hash: cfg.hash(),
            master_seed: cfg.master_seed,
            replicas: cfg.replicas,
            window: exponent_window(cfg.constants)?,
            tables: Vec::new(),
            fits: Vec::new(),
            schedules: Vec::new(),
            checks: Vec::new(),
            notes: Vec::new(),
            counter_regime: false,
            all_pass: false,
        })
    }

    fn finish(mut self, cfg: &ExperimentConfig) -> Self {
        if cfg.replicas < 100 {
            self.notes.push(format!("{} replicas is below 100: statistical checks are inconclusive", cfg.replicas));
            for c in self.checks.iter_mut() {
                if c.status == Status::Pass || c.status == Status::Fail {
                    c.status = Status::Inconclusive;
                }
            }
        }
        let counted: Vec<&BoundCheck> = self.checks.iter().filter(|c| c.counts()).collect();
        self.all_pass = !counted.is_empty() && counted.iter().all(|c| c.status == Status::Pass);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

// ---------------------------------------------------------------------------
// Shared setup

struct RadiusSetup {
    grid: Arc<SphereGrid>,
    kernel: CovarianceKernel,
    propagator: Arc<Propagator>,
    factor: Arc<NoiseFactor>,
    sim: Simulator,
}

fn setup(cfg: &ExperimentConfig, radius: f64) -> Result<RadiusSetup> {
    let grid = Arc::new(build_grid(radius, cfg.grid_level)?);
    let kernel = CovarianceKernel::new(cfg.kernel.clone(), cfg.constants, radius, cfg.baseline)?;
    let propagator = Arc::new(Propagator::from_config(&grid, &cfg.solver)?);
    let factor = Arc::new(build_factor(&grid, &kernel)?);
    let sim = Simulator::new(Arc::clone(&propagator), Arc::clone(&factor), SigmaFunction::new(cfg.sigma.clone())?)?;
    Ok(RadiusSetup { grid, kernel, propagator, factor, sim })
}

/// Eight spread-out nodes: both poles and six ring nodes at varied
/// colatitude and longitude. Fewer on lattices with no rings.
pub fn representative_nodes(grid: &SphereGrid) -> Vec<usize> {
    let mut nodes = vec![grid.north_index(), grid.south_index()];
    let (r, m) = (grid.rings(), grid.per_ring());
    if r > 0 {
        for k in 0..6 {
            let a = k * (r - 1) / 5;
            let j = k * m / 6;
            nodes.push(grid.ring_index(a, j));
        }
    }
    nodes.dedup();
    nodes
}

/// Final fields of every replica, reduced by `extract`.
fn simulate_replicas<T: Send>(
    s: &RadiusSetup,
    cfg: &ExperimentConfig,
    seed: u64,
    extract: impl Fn(&[f64]) -> T + Sync + Send,
) -> Result<Vec<T>> {
    let zeros = vec![0.0; s.grid.len()];
    run_replicas(cfg.replicas, seed, || s.sim.scratch(), |scratch, _, rng| {
        let u = s.sim.run_final(&zeros, cfg.solver.steps, rng, scratch)?;
        Ok(extract(&u))
    })
}

fn radius_params(radius: f64) -> Vec<(String, f64)> {
    vec![p("log_r", radius.ln())]
}

/// Dispatches on `cfg.experiment`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    match cfg.experiment {
        ExperimentKind::Moments => run_moments(cfg),
        ExperimentKind::Tails => run_tails(cfg),
        ExperimentKind::SupScaling => run_sup_scaling(cfg),
        ExperimentKind::Holder => run_holder(cfg),
        ExperimentKind::Independence => run_independence(cfg),
        ExperimentKind::GaussianOracle => run_gaussian_oracle(cfg),
    }
}

// ---------------------------------------------------------------------------
// Moments

/// E|u(t,x)|^k at representative nodes against (2C_σ√(h_up t))^k k^{k/2}, and
/// the variance against h_up·t·C_σ².
pub fn run_moments(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut rep = ExperimentReport::new(cfg)?;
    let mp = &cfg.moments;
    let mut table = Table::new("moments", &["radius", "node", "k", "empirical", "stderr", "bound"]);
    for (ri, radius) in cfg.radii().into_iter().enumerate() {
        let s = setup(cfg, radius)?;
        let nodes = representative_nodes(&s.grid);
        let vals = simulate_replicas(&s, cfg, derive_seed(cfg.master_seed, ri as u64), |u| {
            nodes.iter().map(|&i| u[i]).collect::<Vec<f64>>()
        })?;
        let c_up = s.sim.sigma.up();
        let h_up = s.kernel.h_up();
        for (ni, &node) in nodes.iter().enumerate() {
            let col: Vec<f64> = vals.iter().map(|v| v[ni]).collect();
            for &k in &mp.orders {
                let kf = k as f64;
                let sample: Vec<f64> = col.iter().map(|x| x.abs().powi(k as i32)).collect();
                let sm = summarize(&sample);
                let bound = (2.0 * c_up * (h_up * cfg.t).sqrt()).powf(kf) * kf.powf(kf / 2.0);
                let rel = if sm.mean > 0.0 { sm.stderr / sm.mean } else { 0.0 };
                let mut params = radius_params(radius);
                params.extend([p("node", node as f64), p("k", kf)]);
                let mut c = BoundCheck::upper("moment_upper", params, sm.mean, bound, mp.slack.max(3.0 * rel));
                if c.status == Status::Fail && rel > mp.max_relative_error {
                    c = c.with_status(Status::Inconclusive).note(format!("relative MC error {rel:.3}"));
                }
                rep.checks.push(c);
                table.rows.push(vec![radius, node as f64, kf, sm.mean, sm.stderr, bound]);
            }
            let sv = summarize(&col);
            let centered: Vec<f64> = col.iter().map(|x| (x - sv.mean).powi(2)).collect();
            let var_se = summarize(&centered).stderr;
            let var_bound = h_up * cfg.t * c_up * c_up;
            let slack = if var_bound > 0.0 { 3.0 * var_se / var_bound } else { 0.0 };
            let mut params = radius_params(radius);
            params.push(p("node", node as f64));
            rep.checks.push(BoundCheck::upper("variance_upper", params, sv.variance, var_bound, slack));
        }
    }
    rep.tables.push(table);
    Ok(rep.finish(cfg))
}

// ---------------------------------------------------------------------------
// Tails

/// P(|u(t,x)| > M) against (M/(2C_σ√(h_up t e)))·exp(−M²/(16C_σ²h_up t e)).
pub fn run_tails(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut rep = ExperimentReport::new(cfg)?;
    let tp = &cfg.tails;
    let mut table = Table::new("tails", &["radius", "node", "m", "exceedances", "frequency", "wilson_lo", "wilson_hi", "bound"]);
    for (ri, radius) in cfg.radii().into_iter().enumerate() {
        let s = setup(cfg, radius)?;
        let nodes = representative_nodes(&s.grid);
        let vals = simulate_replicas(&s, cfg, derive_seed(cfg.master_seed, ri as u64), |u| {
            nodes.iter().map(|&i| u[i]).collect::<Vec<f64>>()
        })?;
        let c_up = s.sim.sigma.up();
        let scale = c_up * c_up * s.kernel.h_up() * cfg.t * E;
        let threshold = 4.0 * scale.sqrt();
        for &m in &tp.m_grid {
            if !(m > threshold) {
                rep.notes.push(format!("R = {radius}: M = {m} dropped, the bound needs M > {threshold:.6}"));
                continue;
            }
            let bound = m / (2.0 * scale.sqrt()) * (-m * m / (16.0 * scale)).exp();
            for (ni, &node) in nodes.iter().enumerate() {
                let count = vals.iter().filter(|v| v[ni].abs() > m).count();
                let (lo, hi) = wilson_interval(count, vals.len(), tp.z);
                let mut params = radius_params(radius);
                params.extend([p("node", node as f64), p("m", m)]);
                let mut c = BoundCheck::upper("tail_upper", params, hi, bound, 0.0);
                if c.status == Status::Fail && lo <= bound {
                    c = c.with_status(Status::Inconclusive).note("interval straddles the bound; more replicas needed");
                }
                rep.checks.push(c);
                table.rows.push(vec![radius, node as f64, m, count as f64, count as f64 / vals.len() as f64, lo, hi, bound]);
            }
        }
    }
    rep.tables.push(table);
    Ok(rep.finish(cfg))
}

// ---------------------------------------------------------------------------
// Supremum growth

fn support_of(family: &KernelFamily) -> Option<f64> {
    match family {
        KernelFamily::TruncatedLinear { theta_c } | KernelFamily::Askey { theta_c, .. } => Some(*theta_c),
        _ => None,
    }
}

fn schedule_for(cfg: &ExperimentConfig, sigma: &SigmaFunction, radius: f64) -> Result<ParameterSchedule> {
    parameter_schedule(&ScheduleInputs {
        radius,
        t: cfg.t,
        constants: cfg.constants,
        sigma_lo: sigma.lo(),
        lipschitz: sigma.lipschitz(),
        sigma_zero: sigma.eval(0.0).abs(),
        u_bound: cfg.solver.initial_bound_u.unwrap_or(0.0),
        eps_alpha: 0.1,
        eps0: 0.05,
        c_k: 1.5,
    })
}

/// E[max over lattice nodes |u(t,·)|] per R, and the slope of log E[sup]
/// against log log R.
pub fn run_sup_scaling(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let theta_c = support_of(&cfg.kernel)
        .ok_or_else(|| Error::Domain("sup scaling needs a compactly supported kernel family".into()))?;
    let mesh = mesh_angle_bound(cfg.grid_level);
    if mesh > theta_c / 4.0 {
        return domain(format!(
            "grid level {} has mesh bound {mesh:.4} > theta_c/4 = {:.4}; the lattice does not resolve the correlation length",
            cfg.grid_level,
            theta_c / 4.0
        ));
    }
    let radii = cfg.radii();
    let mut rep = ExperimentReport::new(cfg)?;
    let sp = &cfg.sup_scaling;
    let mut table = Table::new("sup_scaling", &["radius", "log_log_r", "mean_sup", "stderr", "ci_lo", "ci_hi", "mesh_bound"]);
    let mut stats = Vec::new();
    let mut constant = false;
    for (ri, &radius) in radii.iter().enumerate() {
        let s = setup(cfg, radius)?;
        constant |= s.kernel.is_constant();
        let sups = simulate_replicas(&s, cfg, derive_seed(cfg.master_seed, ri as u64), |u| {
            u.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        })?;
        let sm = summarize(&sups);
        let (lo, hi) = sm.interval(sp.z);
        table.rows.push(vec![radius, radius.ln().ln(), sm.mean, sm.stderr, lo, hi, mesh]);
        rep.schedules.push(schedule_for(cfg, &s.sim.sigma, radius)?);
        stats.push(sm);
    }
    rep.notes.push(format!(
        "sup over lattice nodes stands in for the sup over the sphere; mesh angle bound {mesh:.5}"
    ));

    let mut checks = Vec::new();
    for i in 1..stats.len() {
        let (a, b) = (stats[i - 1], stats[i]);
        let tol = sp.z * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        checks.push(BoundCheck::lower(
            "sup_nondecreasing",
            vec![p("log_r_from", radii[i - 1].ln()), p("log_r_to", radii[i].ln())],
            b.mean + tol,
            a.mean,
            0.0,
        ));
    }
    if stats.len() >= 2 {
        let (first, last) = (stats[0], stats[stats.len() - 1]);
        checks.push(BoundCheck::lower(
            "sup_increasing_endpoints",
            vec![p("log_r_from", radii[0].ln()), p("log_r_to", radii[radii.len() - 1].ln())],
            last.interval(sp.z).0,
            first.interval(sp.z).1,
            0.0,
        ));
        let x: Vec<f64> = radii.iter().map(|r| r.ln().ln()).collect();
        let y: Vec<f64> = stats.iter().map(|s| s.mean.ln()).collect();
        if y.iter().all(|v| v.is_finite()) {
            let fit = ols("log_mean_sup_vs_log_log_r", &x, &y)?;
            let params = vec![p("slope_stderr", fit.slope_stderr)];
            checks.push(BoundCheck::lower("slope_window_lower", params.clone(), fit.slope, sp.slope_window.0, 0.0));
            checks.push(BoundCheck::upper("slope_window_upper", params.clone(), fit.slope, sp.slope_window.1, 0.0));
            let w = rep.window;
            let inside = fit.slope >= w.alpha_l && fit.slope <= w.alpha_u;
            checks.push(
                BoundCheck::close("slope_in_exponent_window", params, fit.slope, 0.5 * (w.alpha_l + w.alpha_u), 0.5 * (w.alpha_u - w.alpha_l))
                    .with_status(if inside { Status::Pass } else { Status::Fail })
                    .informational(),
            );
            rep.fits.push(fit);
        }
    }
    if radii.len() < 4 {
        rep.notes.push(format!("{} radii given; the slope fit wants at least 4", radii.len()));
    }
    if constant {
        rep.counter_regime = true;
        rep.notes.push("the kernel is constant on the sphere: the noise is spatially constant and sup|u| cannot grow with R".into());
        for c in checks.iter_mut() {
            c.status = Status::CounterRegime;
        }
    }
    rep.checks.extend(checks);
    rep.tables.push(table);
    Ok(rep.finish(cfg))
}

// ---------------------------------------------------------------------------
// Spatial modulus

/// Largest |u(x) − u(x')| over meridional node pairs whose rings are 2^m
/// apart, i.e. at separation exactly 2^m·Δ, for m = 0, 1, …
pub fn meridional_increments(grid: &SphereGrid, u: &[f64]) -> Vec<f64> {
    let (r, m) = (grid.rings(), grid.per_ring());
    let mut out = Vec::new();
    let mut off = 1;
    while off < r {
        let mut best: f64 = 0.0;
        for a in 0..r - off {
            for j in 0..m {
                best = best.max((u[grid.ring_index(a, j)] - u[grid.ring_index(a + off, j)]).abs());
            }
        }
        out.push(best);
        off *= 2;
    }
    out
}

/// Dyadic increment suprema, the exponent fitted to their means, and the
/// frequency of {sup over θ ≤ π2^{−n} of |Δu| ≤ πR·2^{−γn}}.
pub fn run_holder(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut rep = ExperimentReport::new(cfg)?;
    let hp = &cfg.holder;
    let radius = cfg.radii()[0];
    if cfg.radii().len() > 1 {
        rep.notes.push(format!("only the first radius, R = {radius}, is used"));
    }
    let s = setup(cfg, radius)?;
    let step = s.grid.colatitude_step();
    let rings = s.grid.rings();
    let both = simulate_replicas(&s, cfg, derive_seed(cfg.master_seed, 0), |u| {
        // One fixed pair per offset, straddling the equator, for the moment check.
        let mut pair = Vec::new();
        let mut off = 1;
        while off < rings {
            let a = (rings - 1 - off) / 2;
            pair.push(u[s.grid.ring_index(a, 0)] - u[s.grid.ring_index(a + off, 0)]);
            off *= 2;
        }
        (meridional_increments(&s.grid, u), pair)
    })?;
    let (incs, pairs): (Vec<Vec<f64>>, Vec<Vec<f64>>) = both.into_iter().unzip();
    let n_sep = incs.first().map_or(0, |v| v.len());
    if n_sep == 0 {
        return domain("the lattice has too few rings for increments");
    }
    let mut table = Table::new("holder_increments", &["separation", "mean_sup_increment", "stderr", "pair_mean_square", "pair_moment_bound"]);
    let (mut fx, mut fy) = (Vec::new(), Vec::new());
    // Second-moment increment bound (4√2 C_σ √(2h_up) (1+ε₀)^{1/3} R^{4/3} θ^{1/3})².
    let eps0: f64 = 0.05;
    let moment_scale = 4.0 * 2f64.sqrt() * s.sim.sigma.up() * (2.0 * s.kernel.h_up()).sqrt() * (1.0 + eps0).cbrt() * radius.powf(4.0 / 3.0);
    for m in 0..n_sep {
        let sep = step * 2f64.powi(m as i32);
        let sm = summarize(&incs.iter().map(|v| v[m]).collect::<Vec<f64>>());
        let sq = summarize(&pairs.iter().map(|v| v[m] * v[m]).collect::<Vec<f64>>());
        let bound = (moment_scale * sep.cbrt()).powi(2);
        rep.checks.push(BoundCheck::upper("increment_second_moment", vec![p("separation", sep)], sq.mean, bound, 0.0).informational());
        table.rows.push(vec![sep, sm.mean, sm.stderr, sq.mean, bound]);
        if sep <= hp.max_fit_angle * (1.0 + 1e-12) && sm.mean > 0.0 {
            fx.push(sep.ln());
            fy.push(sm.mean.ln());
        }
    }
    rep.tables.push(table);

    // Dyadic events; level n covers separations ≤ π2^{−n}.
    let mut events = Table::new("holder_events", &["n", "threshold", "frequency", "wilson_lo", "wilson_hi"]);
    let max_n = (PI / step).log2().round() as i32;
    let mut freqs = Vec::new();
    for n in 1..=max_n {
        let limit = PI * 2f64.powi(-n);
        let threshold = PI * radius * 2f64.powf(-hp.gamma * n as f64);
        let ms: Vec<usize> = (0..n_sep).filter(|&m| step * 2f64.powi(m as i32) <= limit * (1.0 + 1e-12)).collect();
        if ms.is_empty() {
            continue;
        }
        let hits = incs.iter().filter(|v| ms.iter().map(|&m| v[m]).fold(0.0, f64::max) <= threshold).count();
        let (lo, hi) = wilson_interval(hits, incs.len(), 1.96);
        events.rows.push(vec![n as f64, threshold, hits as f64 / incs.len() as f64, lo, hi]);
        freqs.push((n, lo, hi));
    }
    for w in freqs.windows(2) {
        let ((n0, lo0, _), (n1, _, hi1)) = (w[0], w[1]);
        rep.checks.push(BoundCheck::lower("event_frequency_nondecreasing", vec![p("n_from", n0 as f64), p("n_to", n1 as f64)], hi1, lo0, 0.0));
    }
    rep.tables.push(events);

    if fx.len() >= 2 {
        let fit = ols("log_sup_increment_vs_log_separation", &fx, &fy)?;
        rep.checks.push(BoundCheck::upper(
            "holder_exponent",
            vec![p("slope_stderr", fit.slope_stderr), p("gamma", hp.gamma)],
            fit.slope,
            1.0 / 3.0 + hp.exponent_slack,
            0.0,
        ));
        rep.checks.push(
            BoundCheck::lower("holder_exponent_at_least_third", vec![p("slope_stderr", fit.slope_stderr)], fit.slope, 1.0 / 3.0, 0.0).informational(),
        );
        rep.fits.push(fit);
    } else {
        rep.notes.push("fewer than two separations with nonzero increments: no exponent fit".into());
    }
    Ok(rep.finish(cfg))
}

// ---------------------------------------------------------------------------
// Independence of truncated processes

/// Correlations of U^{(β,n)} between a reference center and centers at the
/// configured separations along the equator.
pub fn run_independence(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let ip = &cfg.independence;
    let mut rep = ExperimentReport::new(cfg)?;
    let radius = cfg.radii()[0];
    let s = setup(cfg, radius)?;
    let theta_c = s
        .kernel
        .support_angle()
        .ok_or_else(|| Error::Domain("independence needs a compactly supported kernel (zero baseline)".into()))?;
    let solver = TruncatedSolver::new(Arc::clone(&s.propagator), cfg.solver.steps, ip.beta, cfg.t)?;
    let reach = 2.0 * ip.picard_n as f64 * solver.ball_angle();

    let reference = SpherePoint::new(PI / 2.0, 0.0, radius)?;
    let x0 = s.grid.nearest_node(&reference)?;
    #[derive(Clone, Copy, PartialEq)]
    enum Role {
        Separated,
        Control,
        Between,
    }
    let mut targets: Vec<(usize, f64, Role)> = Vec::new();
    let requested: Vec<(f64, bool)> =
        ip.separations.iter().map(|&a| (a, false)).chain(std::iter::once((ip.control_separation, true))).collect();
    for (angle, control) in requested {
        if !(angle > 0.0) || angle > PI {
            rep.notes.push(format!("separation {angle} is not realizable on the sphere: dropped"));
            continue;
        }
        let node = s.grid.nearest_node(&s.grid.nodes()[x0].travel(angle, PI / 2.0))?;
        let actual = geodesic_angle(&s.grid.nodes()[x0], &s.grid.nodes()[node])?;
        let role = if actual > reach + theta_c {
            Role::Separated
        } else if actual < theta_c {
            Role::Control
        } else {
            Role::Between
        };
        if control && role != Role::Control {
            rep.notes.push(format!("control separation {angle} snaps to {actual:.4}, not below theta_c"));
        }
        if !control && role != Role::Separated {
            rep.notes.push(format!(
                "separation {angle} (snapped {actual:.4}) is within 2n sqrt(beta t)/R + theta_c = {:.4}",
                reach + theta_c
            ));
        }
        targets.push((node, actual, role));
    }

    let sigma = s.sim.sigma.clone();
    let zeros = vec![0.0; s.grid.len()];
    let mut watch = vec![x0];
    watch.extend(targets.iter().map(|t| t.0));
    let dt = cfg.solver.dt;
    let vals = run_replicas(cfg.replicas, derive_seed(cfg.master_seed, 0), || (), |_, _, rng| {
        let noise = NoiseRealization::sample(&s.factor, dt, cfg.solver.steps, rng);
        let paths = solver.paths(&zeros, &sigma, &noise, ip.picard_n)?;
        let last = &paths[cfg.solver.steps];
        Ok(watch.iter().map(|&i| last[i]).collect::<Vec<f64>>())
    })?;
    let n = vals.len();
    let band = 3.0 / (n as f64).sqrt();
    let base: Vec<f64> = vals.iter().map(|v| v[0]).collect();
    let mut table = Table::new("independence", &["separation", "correlation", "fisher_lo", "fisher_hi", "role"]);
    for (ti, &(node, actual, role)) in targets.iter().enumerate() {
        let other: Vec<f64> = vals.iter().map(|v| v[ti + 1]).collect();
        let r = pearson(&base, &other);
        let (lo, hi) = fisher_interval(r, n, 3.0);
        let params = vec![p("separation", actual), p("node", node as f64), p("beta", ip.beta), p("picard_n", ip.picard_n as f64)];
        match role {
            Role::Separated => rep.checks.push(BoundCheck::close("separated_uncorrelated", params, r, 0.0, band)),
            Role::Control => rep.checks.push(BoundCheck::lower("overlap_control_positive", params, lo, 0.0, 0.0)),
            Role::Between => rep.checks.push(BoundCheck::close("intermediate_separation", params, r, 0.0, band).informational()),
        }
        let code = match role {
            Role::Separated => 0.0,
            Role::Control => 1.0,
            Role::Between => 2.0,
        };
        table.rows.push(vec![actual, r, lo, hi, code]);
    }
    rep.notes.push("role column: 0 separated, 1 overlapping control, 2 intermediate".into());
    rep.tables.push(table);
    Ok(rep.finish(cfg))
}

// ---------------------------------------------------------------------------
// Gaussian oracle

/// Covariance of the exponential-Euler solution with σ ≡ 1 and u0 = 0 after
/// `steps` steps: C ← P(C + dt·H)Pᵀ from C = 0.
pub fn scheme_covariance(propagator: &Propagator, h: &RingOperator, steps: usize) -> RingOperator {
    let dt = propagator.time();
    let p = propagator.operator();
    let pt = propagator.transpose();
    let mut c = h.add_scaled(-1.0, h);
    for _ in 0..steps {
        c = p.compose(&c.add_scaled(dt, h)).compose(&pt);
    }
    c
}

/// dt·Σ_{l=1..steps} P(l·dt) H P(l·dt)ᵀ with each P(l·dt) built directly from
/// the kernel: the continuous-time covariance by left-endpoint quadrature.
pub fn direct_kernel_covariance(grid: &Arc<SphereGrid>, h: &RingOperator, dt: f64, steps: usize, solver: &SolverConfig) -> Result<RingOperator> {
    let mut c = h.add_scaled(-1.0, h);
    for l in 1..=steps {
        let p = Propagator::new(grid, l as f64 * dt, solver.kernel_tol, solver.clamp_negative_kernel, solver.normalize_rows)?;
        let term = p.operator().compose(h).compose(&p.transpose());
        c = c.add_scaled(dt, &term);
    }
    Ok(c)
}

/// Empirical node covariances against the scheme's exact covariance.
pub fn run_gaussian_oracle(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut rep = ExperimentReport::new(cfg)?;
    let op = &cfg.oracle;
    let radius = cfg.radii()[0];
    let s = setup(cfg, radius)?;
    if !s.sim.sigma.is_constant() {
        return domain("the Gaussian oracle needs a constant sigma");
    }
    let c = s.sim.sigma.eval(0.0);
    let h = s.factor.covariance();
    let oracle = scheme_covariance(&s.propagator, h, cfg.solver.steps);
    let direct = if op.direct_diagnostic {
        Some(direct_kernel_covariance(&s.grid, h, cfg.solver.dt, cfg.solver.steps, &cfg.solver)?)
    } else {
        None
    };

    // Diagonal at each representative node, and each with its eastern neighbour.
    let nodes = representative_nodes(&s.grid);
    let m = s.grid.per_ring();
    let mut pairs: Vec<(usize, usize)> = nodes.iter().map(|&i| (i, i)).collect();
    for &i in &nodes {
        if i != s.grid.north_index() && i != s.grid.south_index() {
            let a = (i - 1) / m;
            let j = (i - 1) % m;
            pairs.push((i, s.grid.ring_index(a, (j + 1) % m)));
        }
    }
    let mut watch: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    watch.sort_unstable();
    watch.dedup();
    let vals = simulate_replicas(&s, cfg, derive_seed(cfg.master_seed, 0), |u| watch.iter().map(|&i| u[i]).collect::<Vec<f64>>())?;
    let slot = |i: usize| watch.binary_search(&i).expect("watched node");

    let mut table = Table::new("gaussian_oracle", &["node_i", "node_j", "empirical", "stderr", "oracle", "direct_kernel"]);
    for &(i, j) in &pairs {
        let (a, b) = (slot(i), slot(j));
        // u0 = 0 makes the mean exactly zero, so E[u_i u_j] needs no centering.
        let prod: Vec<f64> = vals.iter().map(|v| v[a] * v[b]).collect();
        let sm = summarize(&prod);
        let exact = c * c * oracle.entry(i, j);
        let d = direct.as_ref().map_or(f64::NAN, |d| c * c * d.entry(i, j));
        let params = vec![p("node_i", i as f64), p("node_j", j as f64), p("stderr", sm.stderr)];
        rep.checks.push(BoundCheck::close("covariance_vs_oracle", params, sm.mean, exact, op.z * sm.stderr));
        table.rows.push(vec![i as f64, j as f64, sm.mean, sm.stderr, exact, d]);
    }
    for &i in &nodes {
        let diag = oracle.entry(i, i);
        for &(a, b) in pairs.iter().filter(|(a, b)| *a == i && a != b) {
            rep.checks.push(
                BoundCheck::lower("oracle_diagonal_dominates", vec![p("node_i", a as f64), p("node_j", b as f64)], diag, oracle.entry(a, b), 0.0)
                    .informational(),
            );
        }
    }
    if s.kernel.is_constant() {
        let h0 = s.kernel.eval_angle(0.0);
        for &i in &nodes {
            rep.checks.push(BoundCheck::close(
                "constant_kernel_variance",
                vec![p("node", i as f64)],
                c * c * oracle.entry(i, i),
                c * c * h0 * cfg.t,
                1e-10 * (1.0 + h0 * cfg.t),
            ));
        }
    }
    if let Some(d) = &direct {
        rep.notes.push(format!(
            "largest |scheme oracle - direct kernel quadrature| = {:.3e} (discretization bias of P(dt)^l against P(l dt))",
            oracle.max_abs_diff(d) * c * c
        ));
    }
    rep.tables.push(table);
    Ok(rep.finish(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn window_examples() {
        let w = exponent_window(NoiseConstants::new(0.0, 0.0)).unwrap();
        assert_eq!((w.alpha_l, w.alpha_u), (0.25, 0.5));
        let w = exponent_window(NoiseConstants::new(1.0, 1.0)).unwrap();
        assert_eq!((w.alpha_l, w.alpha_u), (0.375, 0.75));
        assert!(exponent_window(NoiseConstants::new(0.0, 2.0)).is_err());
    }

    proptest::proptest! {
        #[test]
        fn window_ordered(c in -1.9f64..1.9) {
            let w = exponent_window(NoiseConstants::new(c, c)).unwrap();
            proptest::prop_assert!((w.alpha_l - (0.25 + c / 8.0)).abs() < 1e-15);
            proptest::prop_assert!(w.alpha_l <= w.alpha_u);
        }
    }

    #[test]
    fn replica_streams_are_independent_of_scheduling() {
        let a = run_replicas(64, 7, || (), |_, i, rng| Ok((i, rng.random_range(0..u64::MAX)))).unwrap();
        let b: Vec<(u64, u64)> = (0..64).map(|i| (i, replica_rng(7, i).random_range(0..u64::MAX))).collect();
        assert_eq!(a, b);
        let c = with_threads(1, || run_replicas(64, 7, || (), |_, i, rng| Ok((i, rng.random_range(0..u64::MAX)))).unwrap()).unwrap();
        assert_eq!(a, c);
        assert_ne!(a[0].1, a[1].1);
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
    }

    #[test]
    fn wilson_and_fisher_shapes() {
        let (lo, hi) = wilson_interval(0, 100, 1.96);
        assert_eq!(lo, 0.0);
        assert!((hi - 1.96f64.powi(2) / (100.0 + 1.96f64.powi(2))).abs() < 1e-12);
        let (lo, hi) = wilson_interval(50, 100, 1.96);
        assert!(lo < 0.5 && hi > 0.5 && (0.5 - lo - (hi - 0.5)).abs() < 1e-12);
        let (lo, hi) = fisher_interval(0.0, 103, 2.0);
        assert!((hi - 0.2f64.tanh()).abs() < 1e-12 && (lo + hi).abs() < 1e-15);
    }

    #[test]
    fn ols_recovers_line_and_stderr() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = ols("line", &x, &y).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-14 && (f.intercept - 2.0).abs() < 1e-13);
        assert!(f.slope_stderr < 1e-14);
        assert!(ols("bad", &[1.0, 1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn interval_width_shrinks_with_root_n() {
        let mut rng = replica_rng(3, 0);
        let a: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..8000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ratio = summarize(&b).stderr / summarize(&a).stderr;
        assert!((0.4..=0.6).contains(&ratio), "{ratio}");
        let wa = wilson_interval(400, 2000, 1.96);
        let wb = wilson_interval(1600, 8000, 1.96);
        let r = (wb.1 - wb.0) / (wa.1 - wa.0);
        assert!((0.4..=0.6).contains(&r), "{r}");
    }

    #[test]
    fn schedule_arithmetic() {
        let inp = ScheduleInputs {
            radius: 400f64.exp(),
            t: 1.0,
            constants: NoiseConstants::new(0.0, 0.0),
            sigma_lo: 1.0,
            lipschitz: 0.5,
            sigma_zero: 1.0,
            u_bound: 1.0,
            eps_alpha: 0.1,
            eps0: 0.05,
            c_k: 1.5,
        };
        let s = parameter_schedule(&inp).unwrap();
        // k = ⌊√400 / (2√2π√4.1)⌋ = ⌊1.11⌋.
        assert_eq!(s.k, 1);
        let alpha = 8.0 * PI * PI;
        assert!((s.alpha - alpha).abs() < 1e-12);
        assert!((s.beta - 4.0 * alpha).abs() < 1e-12);
        assert_eq!(s.picard_n, 400);
        let m = 4.0 * PI * PI * 0.95f64.powi(2) * (1.0 - (-2.0 * alpha).exp()).powi(2);
        assert!((s.m - m).abs() < 1e-12);
        let q = (2.0 / alpha).sqrt();
        let nk = ((alpha + 0.5).exp() / m.sqrt() * (1.0 + 2.0 * q) / (1.0 - q)).powi(4);
        assert!((s.log_n_k.unwrap() - nk.ln()).abs() < 1e-12);
        assert!((s.n.unwrap() / (nk.floor() + 1.0) - 1.0).abs() < 1e-12);
        assert!(!s.degenerate);
    }

    #[test]
    fn schedule_degenerate_at_desk_scale() {
        let inp = ScheduleInputs {
            radius: 5f64.exp(),
            t: 1.0,
            constants: NoiseConstants::new(0.0, 0.0),
            sigma_lo: 1.0,
            lipschitz: 0.0,
            sigma_zero: 1.0,
            u_bound: 0.0,
            eps_alpha: 0.1,
            eps0: 0.05,
            c_k: 1.5,
        };
        let s = parameter_schedule(&inp).unwrap();
        assert_eq!(s.k, 0);
        assert!(s.degenerate);
    }

    #[test]
    fn config_validation_collects_everything() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        c.log_r_list = vec![0.5];
        c.t = -1.0;
        c.constants = NoiseConstants::new(0.0, 2.0);
        c.holder.gamma = 0.5;
        match c.validate() {
            Err(Error::Config(errs)) => assert!(errs.len() >= 4, "{errs:?}"),
            other => panic!("{other:?}"),
        }
        let toml_text = "experiment = \"tails\"\nunknown_key = 1\n";
        assert!(toml::from_str::<ExperimentConfig>(toml_text).is_err());
        let ok: ExperimentConfig = toml::from_str("experiment = \"sup_scaling\"\nlog_r_list = [2.0, 3.0]\n").unwrap();
        assert_eq!(ok.experiment, ExperimentKind::SupScaling);
        assert_ne!(ok.hash(), ExperimentConfig::default().hash());
    }

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        ExperimentConfig {
            experiment: kind,
            grid_level: 1,
            replicas: 200,
            solver: SolverConfig::for_time(1.0, 5),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_sigma_gives_zero_moments_and_no_exceedances() {
        let mut c = small(ExperimentKind::Moments);
        c.sigma = SigmaSpec::Constant { value: 0.0 };
        let r = run_moments(&c).unwrap();
        assert!(r.tables[0].rows.iter().all(|row| row[3] == 0.0));
        let mut c = small(ExperimentKind::Tails);
        c.sigma = SigmaSpec::Constant { value: 0.0 };
        c.tails.m_grid = vec![0.5, 1.0];
        let r = run_tails(&c).unwrap();
        // Threshold 0 keeps every M, and nothing exceeds it.
        assert!(r.tables[0].rows.iter().all(|row| row[3] == 0.0));
    }

    #[test]
    fn tail_threshold_drops_small_m() {
        let mut c = small(ExperimentKind::Tails);
        c.tails.m_grid = vec![1.0, 7.0];
        let r = run_tails(&c).unwrap();
        assert!(r.notes.iter().any(|n| n.contains("M = 1 dropped")));
        assert!((4.0 * E.sqrt() - 6.5948).abs() < 1e-4);
    }

    #[test]
    fn report_is_reproducible() {
        let c = small(ExperimentKind::Moments);
        let a = run_moments(&c).unwrap().to_json();
        let b = with_threads(1, || run_moments(&c).unwrap().to_json()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oracle_constant_kernel_variance_is_t() {
        let mut c = small(ExperimentKind::GaussianOracle);
        c.kernel = KernelFamily::Constant { h0: 1.0 };
        c.baseline = Baseline::LowerBound;
        c.sigma = SigmaSpec::Constant { value: 1.5 };
        c.replicas = 2000;
        let r = run_gaussian_oracle(&c).unwrap();
        for chk in r.checks.iter().filter(|c| c.id == "constant_kernel_variance") {
            assert_eq!(chk.status, Status::Pass, "{chk:?}");
            assert!((chk.rhs - 2.25).abs() < 1e-12);
        }
        assert!(r.checks.iter().filter(|c| c.id == "covariance_vs_oracle").count() >= 8);
    }

    #[test]
    fn oracle_zero_sigma_is_zero() {
        let mut c = small(ExperimentKind::GaussianOracle);
        c.sigma = SigmaSpec::Constant { value: 0.0 };
        c.oracle.direct_diagnostic = false;
        let r = run_gaussian_oracle(&c).unwrap();
        assert!(r.tables[0].rows.iter().all(|row| row[2] == 0.0 && row[4] == 0.0));
    }

    #[test]
    fn scheme_covariance_matches_stepping_by_hand() {
        let g = Arc::new(build_grid(3.0, 1).unwrap());
        let k = CovarianceKernel::new(KernelFamily::ExponentialGeodesic { kappa: 2.0 }, NoiseConstants::new(0.0, 0.0), 3.0, Baseline::Zero).unwrap();
        let f = build_factor(&g, &k).unwrap();
        let p = Propagator::new(&g, 0.1, 1e-12, true, true).unwrap();
        let c = scheme_covariance(&p, f.covariance(), 2);
        // Two steps: dt·(P H Pᵀ + P² H P²ᵀ), from dense matrices.
        let (pd, hd) = (p.operator().to_dense(), f.covariance().to_dense());
        let n = g.len();
        let mul = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            (0..n).map(|i| (0..n).map(|j| (0..n).map(|l| a[i][l] * b[l][j]).sum()).collect()).collect()
        };
        let tr = |a: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { (0..n).map(|i| (0..n).map(|j| a[j][i]).collect()).collect() };
        let p2 = mul(&pd, &pd);
        let t1 = mul(&mul(&pd, &hd), &tr(&pd));
        let t2 = mul(&mul(&p2, &hd), &tr(&p2));
        for i in 0..n {
            for j in 0..n {
                assert!((c.entry(i, j) - 0.1 * (t1[i][j] + t2[i][j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn meridional_increments_of_constant_and_linear_fields() {
        let g = build_grid(3.0, 2).unwrap();
        assert!(meridional_increments(&g, &vec![1.0; g.len()]).iter().all(|&v| v == 0.0));
        // u = colatitude: the increment at offset 2^m is exactly 2^m·Δ.
        let u: Vec<f64> = g.nodes().iter().map(|x| x.colatitude()).collect();
        for (m, v) in meridional_increments(&g, &u).iter().enumerate() {
            assert!((v - g.colatitude_step() * 2f64.powi(m as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_centers_are_perfectly_correlated() {
        let mut rng = replica_rng(1, 0);
        let x: Vec<f64> = (0..500).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!((pearson(&x, &x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sup_scaling_rejects_coarse_grid_and_flags_constant_kernel() {
        let mut c = small(ExperimentKind::SupScaling);
        c.kernel = KernelFamily::TruncatedLinear { theta_c: PI / 8.0 };
        c.baseline = Baseline::LowerBound;
        assert!(run_sup_scaling(&c).is_err());
        c.kernel = KernelFamily::TruncatedLinear { theta_c: PI };
        c.log_r_list = vec![2.0, 3.0];
        let r = run_sup_scaling(&c).unwrap();
        assert!(r.counter_regime);
        assert!(r.checks.iter().all(|c| c.status == Status::CounterRegime || c.informational));
    }
}
