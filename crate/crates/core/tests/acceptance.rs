//! Acceptance criteria A1–A10. Each test writes one PASS/FAIL line straight
//! to stdout (bypassing the harness capture) and then asserts the verdict.
//!
//! A4, A7 and A8 fail at the shipped settings; see README for why.

use std::f64::consts::PI;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use sphere_she::cli::{parse_config, run_experiment_to_dir, run_simulation, SimulateConfig};
use sphere_she::functionals::{functionals_ledger, LedgerConfig};
use sphere_she::geometry::build_grid;
use sphere_she::heat_kernel::{kernel_matrix, molchanov_relative_error, scaling_residual};
use sphere_she::montecarlo::{run_experiment, with_threads, ExperimentConfig, ExperimentReport};
use sphere_she::report::{BoundCheck, Status};
use sphere_she::solver::SigmaSpec;

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn experiment(name: &str) -> ExperimentConfig {
    parse_config(&config_path(name)).expect("shipped config parses")
}

fn verdict(id: &str, title: &str, pass: bool, detail: &str, started: Instant) {
    let line = format!(
        "\n{id} {title}: {} ({detail}; {:.1} s)\n",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
}

fn tally(checks: &[BoundCheck]) -> String {
    let counted: Vec<&BoundCheck> = checks.iter().filter(|c| c.counts()).collect();
    let count = |s: Status| counted.iter().filter(|c| c.status == s).count();
    format!(
        "{} pass, {} fail, {} inconclusive of {}",
        count(Status::Pass),
        count(Status::Fail),
        count(Status::Inconclusive),
        counted.len()
    )
}

fn failing_ids(rep: &ExperimentReport) -> String {
    let mut ids: Vec<&str> = rep.checks.iter().filter(|c| c.counts() && c.status != Status::Pass).map(|c| c.id.as_str()).collect();
    ids.dedup();
    ids.join(",")
}

#[test]
fn a01_kernel_normalization() {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for radius in [1.0, 5.0, 20.0] {
        for tau in [0.1, 1.0] {
            let grid = Arc::new(build_grid(radius, 3).unwrap());
            let km = kernel_matrix(&grid, tau * radius * radius, 1e-12).unwrap();
            worst = worst.max(km.row_defect());
        }
    }
    let pass = worst < 1e-3 && t0.elapsed().as_secs_f64() < 30.0;
    verdict("A1", "kernel normalization", pass, &format!("max row defect {worst:.3e}"), t0);
    assert!(pass);
}

#[test]
fn a02_scaling_identity() {
    let t0 = Instant::now();
    let tol = 1e-12;
    let mut worst: f64 = 0.0;
    for radius in [1.0, 5.0, 20.0] {
        for tau in [0.1, 1.0] {
            worst = worst.max(scaling_residual(radius, tau * radius * radius, tol, 1000).unwrap());
        }
    }
    let pass = worst < 2.0 * tol;
    verdict("A2", "scaling identity", pass, &format!("max residual {worst:.3e}"), t0);
    assert!(pass);
}

#[test]
fn a03_small_time_accuracy() {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for tau in [1e-2, 3e-3, 1e-3, 1e-4] {
        for i in 0..=1000 {
            let theta = 0.75 * PI * i as f64 / 1000.0;
            worst = worst.max(molchanov_relative_error(tau, theta).unwrap());
        }
    }
    let pass = worst <= 0.05 && t0.elapsed().as_secs_f64() < 60.0;
    verdict("A3", "small-time approximation", pass, &format!("max relative error {worst:.4}"), t0);
    assert!(pass);
}

#[test]
fn a04_functional_ledger() {
    let t0 = Instant::now();
    let rep = functionals_ledger(&LedgerConfig::default()).unwrap();
    let mut parts = Vec::new();
    for id in ["full_upper", "complement_upper", "ball_plus_complement", "ball_lower", "constant_closed_form"] {
        let of: Vec<BoundCheck> = rep.checks.iter().filter(|c| c.id == id).cloned().collect();
        let counted = of.iter().filter(|c| c.counts()).count();
        let passed = of.iter().filter(|c| c.counts() && c.status == Status::Pass).count();
        let regime = of.iter().filter(|c| c.status == Status::CounterRegime).count();
        let extra = if regime > 0 { format!(" (+{regime} counter-regime)") } else { String::new() };
        parts.push(format!("{id} {passed}/{counted}{extra}"));
    }
    verdict("A4", "functional ledger", rep.all_pass, &parts.join(", "), t0);
    assert!(rep.all_pass);
}

#[test]
fn a05_gaussian_oracle() {
    let t0 = Instant::now();
    let main = run_experiment(&experiment("gaussian_oracle.toml")).unwrap();
    let constant = run_experiment(&experiment("gaussian_oracle_constant.toml")).unwrap();
    let pass = main.all_pass && constant.all_pass;
    let detail = format!("askey kernel: {}; h = 1: {}", tally(&main.checks), tally(&constant.checks));
    verdict("A5", "Gaussian covariance oracle", pass, &detail, t0);
    assert!(pass);
}

#[test]
fn a06_moments_and_tails() {
    let t0 = Instant::now();
    let moments = run_experiment(&experiment("moments.toml")).unwrap();
    let tails = run_experiment(&experiment("tails.toml")).unwrap();
    let pass = moments.all_pass && tails.all_pass;
    let detail = format!("moments: {}; tails: {}", tally(&moments.checks), tally(&tails.checks));
    verdict("A6", "moment and tail bounds", pass, &detail, t0);
    assert!(pass);
}

#[test]
fn a07_sup_scaling_trend() {
    let t0 = Instant::now();
    let literal = run_experiment(&experiment("sup_scaling.toml")).unwrap();
    let pass = literal.all_pass && !literal.counter_regime;
    let slope = |r: &ExperimentReport| r.fits.first().map_or(f64::NAN, |f| f.slope);
    let detail = if literal.counter_regime {
        format!("counter-regime: the tent kernel with C_h = (0, 0) is constant; slope {:.3}", slope(&literal))
    } else {
        format!("{}; slope {:.3}", tally(&literal.checks), slope(&literal))
    };
    verdict("A7", "sup growth in log R", pass, &detail, t0);

    // Same support, positive-definite and compactly supported; outside the
    // h ≥ h_lo class, so it is reported but not scored.
    let t1 = Instant::now();
    let askey = run_experiment(&experiment("sup_scaling_askey.toml")).unwrap();
    let detail = format!("{}; slope {:.3} ± {:.3}", tally(&askey.checks), slope(&askey), askey.fits.first().map_or(f64::NAN, |f| f.slope_stderr));
    let line = format!(
        "\nA7 (informational, askey kernel) sup growth in log R: {} ({detail}; {:.1} s)\n",
        if askey.all_pass { "PASS" } else { "FAIL" },
        t1.elapsed().as_secs_f64()
    );
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(pass);
}

#[test]
fn a08_holder_and_independence() {
    let t0 = Instant::now();
    let holder = run_experiment(&experiment("holder.toml")).unwrap();
    let indep = run_experiment(&experiment("independence.toml")).unwrap();
    let pass = holder.all_pass && indep.all_pass;
    let exponent = holder.fits.first().map_or(f64::NAN, |f| f.slope);
    let detail = format!(
        "holder exponent {exponent:.3} ({}; failing: {}); independence: {}",
        tally(&holder.checks),
        failing_ids(&holder),
        tally(&indep.checks)
    );
    verdict("A8", "modulus and independence", pass, &detail, t0);
    assert!(pass);
}

#[test]
fn a09_picard_contraction() {
    let t0 = Instant::now();
    let text = std::fs::read_to_string(config_path("picard.toml")).unwrap();
    let cfg: SimulateConfig = toml::from_str(&text).unwrap();
    let lipschitz = run_simulation(&cfg).unwrap().picard.unwrap();
    let contracts = lipschitz.below_bound_at.is_some_and(|i| i <= 5);
    let constant_cfg = SimulateConfig { sigma: SigmaSpec::Constant { value: 1.0 }, ..cfg };
    let constant = run_simulation(&constant_cfg).unwrap().picard.unwrap();
    // u⁽¹⁾ is already the fixed point: the second map changes nothing.
    let one_step = constant.fixed_point_at == Some(2);
    let pass = contracts && one_step;
    let detail = format!(
        "ratios {:?} vs bound {:.3}; constant sigma fixed at iteration {:?}",
        lipschitz.ratios.iter().map(|r| (r * 1e4).round() / 1e4).collect::<Vec<_>>(),
        lipschitz.bound,
        constant.fixed_point_at.map(|n| n - 1)
    );
    verdict("A9", "Picard contraction", pass, &detail, t0);
    assert!(pass);
}

#[test]
fn a10_reproducibility() {
    let t0 = Instant::now();
    let mut cfg = experiment("moments.toml");
    cfg.replicas = 5000;
    let dir = tempfile::tempdir().unwrap();
    let (_, a) = run_experiment_to_dir(&cfg, None, &Some(dir.path().join("a"))).unwrap();
    let (_, b) = with_threads(1, || run_experiment_to_dir(&cfg, None, &Some(dir.path().join("b")))).unwrap().unwrap();
    let ra = std::fs::read(a.join("report.json")).unwrap();
    let rb = std::fs::read(b.join("report.json")).unwrap();
    let ca = std::fs::read(a.join("moments.csv")).unwrap();
    let cb = std::fs::read(b.join("moments.csv")).unwrap();
    let pass = ra == rb && ca == cb;
    verdict("A10", "reproducibility", pass, &format!("report.json {} bytes, identical: {}", ra.len(), ra == rb), t0);
    assert!(pass);
}
