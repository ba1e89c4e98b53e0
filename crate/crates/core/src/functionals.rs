//! Kernel functionals
//!
//! f(α) = ∫₀ᵗ e^{−2αs} ∫∫_D p_R(s,θ(x,y₁)) p_R(s,θ(x,y₂)) h_R(y₁,y₂) dy₁dy₂ ds
//!
//! over the whole sphere, over a ball B(x, √(βt)) squared, and over its
//! complement squared; the Garsia integral I_k with its radius sequence; and
//! an inequality ledger for the bounds these functionals satisfy.
//!
//! Space is integrated in geodesic polar coordinates (θ, ψ) about the base
//! point x. The kernel factors are radial, so for each s the double integral
//! is a quadratic form qᵀH̄q where q_i = p_R(s,θ_i)·2πR² sinθ_i·w_i and
//! H̄_ij is the ψ-average of h between the rings θ_i and θ_j. One H̄ serves
//! every s and every α, and every ball radius placed on a radial breakpoint.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::geometry::{geodesic_angle, SpherePoint};
use crate::heat_kernel::{HeatKernel, SMALL_TIME_THRESHOLD};
use crate::noise::{hr_eval, CovarianceKernel, NoiseConstants};
use crate::quadrature::GaussLegendre;
use crate::report::{p, BoundCheck, Status};
use crate::solver::FieldState;

/// Gauss–Legendre points per panel in θ, ψ and s.
const PANEL_ORDER: usize = 10;
/// The time integral starts at s_min = S_MIN_FRACTION·t; below it the inner
/// integral is replaced by its s → 0 limit.
const S_MIN_FRACTION: f64 = 1e-8;

/// Quadrature resolution. Level ℓ uses geometric panels with ratio 2^{1/ℓ}
/// in θ and s and 6ℓ+1 panels in ψ; errors are estimated against level 2ℓ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub level: u32,
}

impl Default for Resolution {
    fn default() -> Self {
        Self { level: 1 }
    }
}

impl Resolution {
    pub fn new(level: u32) -> Result<Self> {
        if level == 0 {
            return domain("resolution level must be at least 1");
        }
        Ok(Self { level })
    }

    fn refined(self) -> Self {
        Self { level: 2 * self.level }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionalResult {
    pub value: f64,
    /// (time nodes, space nodes) of the finer of the two evaluations.
    pub quadrature_points: (usize, usize),
    /// |value(ℓ) − value(2ℓ)|.
    pub estimated_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Region {
    Full,
    Ball(usize),
    Complement(usize),
}

fn geometric_breaks(lo: f64, hi: f64, level: u32) -> Vec<f64> {
    let ratio = 2f64.powf(1.0 / level as f64);
    let mut b = vec![0.0, lo];
    let mut x = lo;
    while x * ratio < hi * (1.0 - 1e-9) {
        x *= ratio;
        b.push(x);
    }
    b.push(hi);
    b
}

fn insert_breaks(breaks: &mut Vec<f64>, extra: &[f64]) {
    for &e in extra {
        if e > 0.0 && e < breaks[breaks.len() - 1] && !breaks.iter().any(|&b| (b - e).abs() <= 1e-14 * e) {
            breaks.push(e);
        }
    }
    breaks.sort_by(|a, b| a.total_cmp(b));
}

fn panel_rule(breaks: &[f64], gl: &GaussLegendre) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for w in breaks.windows(2) {
        for (x, wt) in gl.mapped(w[0], w[1]) {
            nodes.push(x);
            weights.push(wt);
        }
    }
    (nodes, weights)
}

/// Inner integrals of one (kernel, t, base point, resolution) as functions of s.
#[derive(Debug, Clone)]
struct Profile {
    s: Vec<f64>,
    ws: Vec<f64>,
    s_min: f64,
    diag: f64,
    /// Kernel mass inside each ball at s = s_min, for the [0, s_min] piece.
    small_mass: Vec<f64>,
    full: Vec<f64>,
    ball: Vec<Vec<f64>>,
    complement: Vec<Vec<f64>>,
    space_points: usize,
}

impl Profile {
    fn build(kernel: &CovarianceKernel, t: f64, base: &SpherePoint, rhos: &[f64], res: Resolution) -> Result<Self> {
        let radius = kernel.radius();
        let level = res.level;
        let gl = GaussLegendre::new(PANEL_ORDER);
        let s_min = S_MIN_FRACTION * t;

        // Radial rule: the finest kernel width is √s_min/R.
        let theta_lo = s_min.sqrt() / radius / 8.0;
        let mut rb = geometric_breaks(theta_lo, PI, level);
        let mut extra: Vec<f64> = rhos.to_vec();
        if let Some(c) = kernel.support_angle() {
            extra.push(c);
        }
        insert_breaks(&mut rb, &extra);
        let (theta, wtheta) = panel_rule(&rb, &gl);
        let nt = theta.len();

        // Azimuthal rule on [0, π], refined towards ψ = 0 where h has its kink
        // when θ_i = θ_j; h(ψ) = h(−ψ) covers the other half.
        let mut pb: Vec<f64> = (0..=6 * level).map(|j| PI * 2f64.powi(-(j as i32))).collect();
        pb.push(0.0);
        pb.reverse();
        let (psi, wpsi) = panel_rule(&pb, &gl);

        let anchors: Vec<SpherePoint> = theta.iter().map(|&th| base.travel(th, 0.0)).collect();
        let ring_points: Vec<Vec<SpherePoint>> =
            theta.iter().map(|&th| psi.iter().map(|&ps| base.travel(th, ps)).collect()).collect();

        let rows: Vec<Vec<f64>> = (0..nt)
            .into_par_iter()
            .map(|i| -> Result<Vec<f64>> {
                let mut row = vec![0.0; nt];
                for j in i..nt {
                    let mut acc = 0.0;
                    for (y, w) in ring_points[j].iter().zip(&wpsi) {
                        acc += w * hr_eval(kernel, &anchors[i], y)?;
                    }
                    row[j] = acc / PI;
                }
                Ok(row)
            })
            .collect::<Result<_>>()?;
        let mut hbar = vec![0.0; nt * nt];
        for i in 0..nt {
            for j in i..nt {
                hbar[i * nt + j] = rows[i][j];
                hbar[j * nt + i] = rows[i][j];
            }
        }
        let diag = hr_eval(kernel, base, base)?;

        // Which radial nodes lie inside each ball.
        let inside: Vec<Vec<bool>> = rhos.iter().map(|&r| theta.iter().map(|&th| th < r).collect()).collect();

        let tb = {
            let mut b = geometric_breaks(s_min, t, level);
            b.remove(0);
            b
        };
        let (s, ws) = panel_rule(&tb, &gl);

        let per_s: Vec<(f64, Vec<f64>, Vec<f64>)> = s
            .par_iter()
            .map(|&si| -> Result<(f64, Vec<f64>, Vec<f64>)> {
                let hk = kernel_for(radius, si)?;
                let q: Vec<f64> = theta
                    .iter()
                    .zip(&wtheta)
                    .map(|(&th, &w)| hk.eval(th) * 2.0 * PI * radius * radius * th.sin() * w)
                    .collect();
                let mut full = 0.0;
                let mut ball = vec![0.0; rhos.len()];
                let mut comp = vec![0.0; rhos.len()];
                // Per row: full row sum, and row sums split at each ball.
                for i in 0..nt {
                    if q[i] == 0.0 {
                        continue;
                    }
                    let row = &hbar[i * nt..(i + 1) * nt];
                    let mut r_full = 0.0;
                    for j in 0..nt {
                        r_full += row[j] * q[j];
                    }
                    full += q[i] * r_full;
                    for (b, mask) in inside.iter().enumerate() {
                        let mut r_in = 0.0;
                        for j in 0..nt {
                            if mask[j] {
                                r_in += row[j] * q[j];
                            }
                        }
                        if mask[i] {
                            ball[b] += q[i] * r_in;
                        } else {
                            comp[b] += q[i] * (r_full - r_in);
                        }
                    }
                }
                Ok((full, ball, comp))
            })
            .collect::<Result<_>>()?;

        let full = per_s.iter().map(|x| x.0).collect();
        let ball = (0..rhos.len()).map(|b| per_s.iter().map(|x| x.1[b]).collect()).collect();
        let complement = (0..rhos.len()).map(|b| per_s.iter().map(|x| x.2[b]).collect()).collect();
        // Gaussian mass of a ball of angular radius ρ at time s_min.
        let small_mass = rhos
            .iter()
            .map(|&r| 1.0 - (-(radius * r).powi(2) / (2.0 * s_min)).exp())
            .collect();

        Ok(Self { s, ws, s_min, diag, small_mass, full, ball, complement, space_points: nt * psi.len() })
    }

    fn integrate(&self, alpha: f64, region: Region) -> f64 {
        let (inner, head) = match region {
            Region::Full => (&self.full, self.diag),
            Region::Ball(b) => (&self.ball[b], self.diag * self.small_mass[b] * self.small_mass[b]),
            Region::Complement(b) => (&self.complement[b], 0.0),
        };
        // ∫₀^{s_min} e^{−2αs} ds, accurate for α → 0.
        let head_time = if alpha == 0.0 {
            self.s_min
        } else {
            -(-2.0 * alpha * self.s_min).exp_m1() / (2.0 * alpha)
        };
        let mut total = head * head_time;
        for ((&s, &w), &v) in self.s.iter().zip(&self.ws).zip(inner) {
            total += w * (-2.0 * alpha * s).exp() * v;
        }
        total
    }
}

/// p_R(s, ·) evaluator; very short times go straight to the image-sum form.
fn kernel_for(radius: f64, s: f64) -> Result<HeatKernel> {
    if s / (radius * radius) < SMALL_TIME_THRESHOLD {
        Ok(HeatKernel::Image { radius, time: s })
    } else {
        HeatKernel::new(radius, s, 1e-15 / (radius * radius))
    }
}

/// All three functionals at one (kernel, t, base point) for a set of ball
/// parameters β, at resolution ℓ and 2ℓ. Any α can then be evaluated cheaply.
#[derive(Debug, Clone)]
pub struct FunctionalTable {
    t: f64,
    betas: Vec<f64>,
    coarse: Profile,
    fine: Profile,
}

impl FunctionalTable {
    pub fn new(kernel: &CovarianceKernel, t: f64, betas: &[f64], res: Resolution) -> Result<Self> {
        let base = SpherePoint::north_pole(kernel.radius())?;
        Self::at(kernel, t, betas, res, &base)
    }

    pub fn at(kernel: &CovarianceKernel, t: f64, betas: &[f64], res: Resolution, base: &SpherePoint) -> Result<Self> {
        let radius = kernel.radius();
        if !(t > 0.0 && t.is_finite()) {
            return domain(format!("functionals need t > 0, got {t}"));
        }
        if (base.radius() - radius).abs() > 1e-12 * radius {
            return Err(crate::Error::RadiusMismatch(base.radius(), radius));
        }
        let mut rhos = Vec::with_capacity(betas.len());
        for &beta in betas {
            if !(beta > 0.0 && beta.is_finite()) {
                return domain(format!("ball parameter beta must be > 0 (empty ball), got {beta}"));
            }
            let rho = (beta * t).sqrt() / radius;
            if rho > PI * (1.0 + 1e-12) {
                return domain(format!("ball radius sqrt(beta t) = {} exceeds pi R = {}", (beta * t).sqrt(), PI * radius));
            }
            rhos.push(rho.min(PI));
        }
        Ok(Self {
            t,
            betas: betas.to_vec(),
            coarse: Profile::build(kernel, t, base, &rhos, res)?,
            fine: Profile::build(kernel, t, base, &rhos, res.refined())?,
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn result(&self, alpha: f64, region: Region) -> FunctionalResult {
        let c = self.coarse.integrate(alpha, region);
        let f = self.fine.integrate(alpha, region);
        FunctionalResult {
            value: f,
            quadrature_points: (self.fine.s.len(), self.fine.space_points),
            estimated_error: (f - c).abs(),
        }
    }

    fn beta_index(&self, beta: usize) -> Result<usize> {
        if beta >= self.betas.len() {
            return domain(format!("no ball parameter with index {beta}"));
        }
        Ok(beta)
    }

    /// Whole-sphere functional; α > 0.
    pub fn full(&self, alpha: f64) -> Result<FunctionalResult> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return domain(format!("f_e needs alpha > 0, got {alpha}"));
        }
        Ok(self.result(alpha, Region::Full))
    }

    /// Ball functional for the `beta`-th ball parameter; α ≥ 0.
    pub fn ball(&self, beta: usize, alpha: f64) -> Result<FunctionalResult> {
        let b = self.beta_index(beta)?;
        check_alpha_nonneg(alpha)?;
        Ok(self.result(alpha, Region::Ball(b)))
    }

    /// Complement functional for the `beta`-th ball parameter; α ≥ 0.
    pub fn complement(&self, beta: usize, alpha: f64) -> Result<FunctionalResult> {
        let b = self.beta_index(beta)?;
        check_alpha_nonneg(alpha)?;
        Ok(self.result(alpha, Region::Complement(b)))
    }
}

fn check_alpha_nonneg(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return domain(format!("alpha must be >= 0, got {alpha}"));
    }
    Ok(())
}

fn check_radius(radius: f64, kernel: &CovarianceKernel) -> Result<()> {
    if (radius - kernel.radius()).abs() > 1e-12 * radius.max(kernel.radius()) {
        return Err(crate::Error::RadiusMismatch(radius, kernel.radius()));
    }
    Ok(())
}

/// f_e(α, R, t) over the whole sphere, based at the north pole.
pub fn f_e(alpha: f64, radius: f64, t: f64, kernel: &CovarianceKernel, res: Resolution) -> Result<FunctionalResult> {
    check_radius(radius, kernel)?;
    FunctionalTable::new(kernel, t, &[], res)?.full(alpha)
}

/// f_e based at an arbitrary point x.
pub fn f_e_at(alpha: f64, t: f64, kernel: &CovarianceKernel, res: Resolution, base: &SpherePoint) -> Result<FunctionalResult> {
    FunctionalTable::at(kernel, t, &[], res, base)?.full(alpha)
}

/// f_{e,β}: both points in B(x, √(βt)).
pub fn f_e_ball(beta: f64, alpha: f64, radius: f64, t: f64, kernel: &CovarianceKernel, res: Resolution) -> Result<FunctionalResult> {
    check_radius(radius, kernel)?;
    FunctionalTable::new(kernel, t, &[beta], res)?.ball(0, alpha)
}

/// f̃_{e,β}: both points outside B(x, √(βt)).
pub fn f_e_complement(beta: f64, alpha: f64, radius: f64, t: f64, kernel: &CovarianceKernel, res: Resolution) -> Result<FunctionalResult> {
    check_radius(radius, kernel)?;
    FunctionalTable::new(kernel, t, &[beta], res)?.complement(0, alpha)
}

// ---------------------------------------------------------------------------
// Garsia machinery

/// μ_k(r) = r^{1/3 + a/k}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GarsiaSpec {
    pub k: u32,
    pub a: f64,
}

impl GarsiaSpec {
    pub fn new(k: u32, a: f64) -> Result<Self> {
        if k < 2 {
            return domain(format!("Garsia moment k must be >= 2, got {k}"));
        }
        if !(a > 0.0 && a < 2.0) {
            return domain(format!("Garsia parameter a must lie in (0, 2), got {a}"));
        }
        Ok(Self { k, a })
    }

    pub fn exponent(&self) -> f64 {
        1.0 / 3.0 + self.a / self.k as f64
    }

    pub fn doubling_constant(&self) -> f64 {
        2f64.powf(self.exponent())
    }

    pub fn mu(&self, r: f64) -> f64 {
        r.max(0.0).powf(self.exponent())
    }
}

/// r_n with r₀ = 1 and μ(r_{n+1}) = μ(r_n)/2.
pub fn garsia_radius(n: u32, spec: &GarsiaSpec) -> f64 {
    2f64.powf(-(n as f64) / spec.exponent())
}

/// Σ_{i≠j} w_i w_j |u_i − u_j|^k / (Rθ_ij)^{k/3+a} over arbitrary nodes.
pub fn garsia_integral_points(points: &[SpherePoint], weights: &[f64], values: &[f64], spec: &GarsiaSpec) -> Result<f64> {
    let n = points.len();
    if n < 2 || weights.len() != n || values.len() != n {
        return domain("Garsia integral needs at least two nodes with matching weights and values");
    }
    let k = spec.k as f64;
    let power = k / 3.0 + spec.a;
    let radius = points[0].radius();
    // The sum is symmetric: accumulate i < j and double.
    let half: f64 = (0..n)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut acc = 0.0;
            for j in i + 1..n {
                let du = (values[i] - values[j]).abs();
                if du == 0.0 {
                    continue;
                }
                let d = radius * geodesic_angle(&points[i], &points[j])?;
                acc += weights[j] * du.powf(k) / d.powf(power);
            }
            Ok(weights[i] * acc)
        })
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum();
    Ok(2.0 * half)
}

/// I_k of a lattice field.
pub fn garsia_integral(field: &FieldState, spec: &GarsiaSpec) -> Result<f64> {
    garsia_integral_points(field.grid.nodes(), field.grid.weights(), &field.values, spec)
}

/// Upper bound on E[I_k] for a solution with noise constants `constants`:
/// ((2−a)⁻¹π^{4−a}·32√2·C_σ√(k h_up)(1+ε₀)^{1/3})^k R^{4−a+k}.
pub fn garsia_moment_bound(spec: &GarsiaSpec, radius: f64, sigma_up: f64, constants: &NoiseConstants, eps0: f64) -> f64 {
    let k = spec.k as f64;
    let a = spec.a;
    let base = PI.powf(4.0 - a) / (2.0 - a)
        * 32.0
        * std::f64::consts::SQRT_2
        * sigma_up
        * (k * constants.h_up(radius)).sqrt()
        * (1.0 + eps0).cbrt();
    base.powf(k) * radius.powf(4.0 - a + k)
}

// ---------------------------------------------------------------------------
// Inequality ledger

/// Parameter sweep and kernel for the functional ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LedgerConfig {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub times: Vec<f64>,
    pub log_radii: Vec<f64>,
    pub kernel: crate::noise::KernelFamily,
    pub constants: NoiseConstants,
    /// Relative quadrature slack on every bound.
    pub slack: f64,
    /// Constant of the small-time kernel comparison.
    pub eps0: f64,
    pub resolution: Resolution,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.5, 1.0, 2.0],
            betas: vec![0.25, 1.0, 4.0],
            times: vec![0.5, 1.0],
            log_radii: vec![2.0, 3.0, 4.0],
            kernel: crate::noise::KernelFamily::ExponentialGeodesic { kappa: 4.0 },
            constants: NoiseConstants { c_h_lo: -0.5, c_h_up: 0.5 },
            slack: 0.10,
            eps0: 0.05,
            resolution: Resolution::default(),
        }
    }
}

/// Ledger output: every check, in sweep order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub checks: Vec<BoundCheck>,
    pub all_pass: bool,
}

/// Runs every bound over the sweep. Each (R, t) point is independent.
pub fn functionals_ledger(cfg: &LedgerConfig) -> Result<LedgerReport> {
    if cfg.alphas.iter().chain(&cfg.betas).chain(&cfg.times).any(|&x| !(x > 0.0)) {
        return domain("ledger alphas, betas and times must be positive");
    }
    let points: Vec<(f64, f64)> =
        cfg.log_radii.iter().flat_map(|&lr| cfg.times.iter().map(move |&t| (lr, t))).collect();
    let blocks: Vec<Vec<BoundCheck>> =
        points.par_iter().map(|&(lr, t)| ledger_point(cfg, lr, t)).collect::<Result<_>>()?;
    let mut checks: Vec<BoundCheck> = blocks.into_iter().flatten().collect();

    // Constant kernel against the closed form (1 − e^{−2αt})/(2α).
    let unit = CovarianceKernel::new(
        crate::noise::KernelFamily::Constant { h0: 1.0 },
        NoiseConstants { c_h_lo: 0.0, c_h_up: 0.0 },
        2f64.exp(),
        Default::default(),
    )?;
    for &t in &cfg.times {
        let table = FunctionalTable::new(&unit, t, &[], cfg.resolution)?;
        for &alpha in &cfg.alphas {
            let v = table.full(alpha)?.value;
            let exact = -(-2.0 * alpha * t).exp_m1() / (2.0 * alpha);
            checks.push(BoundCheck::close("constant_closed_form", vec![p("alpha", alpha), p("t", t)], v, exact, 1e-8));
        }
    }
    let all_pass = crate::report::all_pass(&checks);
    Ok(LedgerReport { checks, all_pass })
}

fn ledger_point(cfg: &LedgerConfig, log_r: f64, t: f64) -> Result<Vec<BoundCheck>> {
    let radius = log_r.exp();
    let kernel = CovarianceKernel::new(cfg.kernel.clone(), cfg.constants, radius, Default::default())?;
    let (h_lo, h_up) = (kernel.h_lo(), kernel.h_up());
    // The complement bound is instantiated at α = β = (log R)^{1/2}.
    let ab = log_r.sqrt();
    let mut betas = cfg.betas.clone();
    betas.push(ab);
    let table = FunctionalTable::new(&kernel, t, &betas, cfg.resolution)?;
    let mut out = Vec::new();

    for &alpha in &cfg.alphas {
        let f = table.full(alpha)?;
        let params = vec![p("alpha", alpha), p("log_r", log_r), p("t", t)];
        out.push(BoundCheck::upper("full_upper", params.clone(), f.value, h_up / (2.0 * alpha), cfg.slack));
        for (b, &beta) in cfg.betas.iter().enumerate() {
            let ball = table.ball(b, alpha)?.value;
            let comp = table.complement(b, alpha)?.value;
            let mut pr = params.clone();
            pr.push(p("beta", beta));
            // Region inclusion; the slack only absorbs quadrature error.
            out.push(BoundCheck::upper("ball_plus_complement", pr, ball + comp, f.value, 1e-6));
        }
    }

    let nb = cfg.betas.len();
    let comp = table.complement(nb, ab)?.value;
    out.push(BoundCheck::upper(
        "complement_upper",
        vec![p("alpha", ab), p("beta", ab), p("log_r", log_r), p("t", t)],
        comp,
        2.0 * h_up * t * (-2.0 * (ab * ab * t).sqrt()).exp(),
        cfg.slack,
    ));

    for (b, &beta) in cfg.betas.iter().enumerate() {
        let ball = table.ball(b, 0.0)?.value;
        let params = vec![p("alpha", 0.0), p("beta", beta), p("log_r", log_r), p("t", t)];
        let shape = t * h_lo * (1.0 - cfg.eps0).powi(2) * (1.0 - (-beta / 2.0).exp()).powi(2);
        let mut literal = BoundCheck::lower("ball_lower", params.clone(), ball, 2.0 * PI * PI * shape, cfg.slack);
        // The bound assumes R ≥ 4√(βt)/π.
        if radius < 4.0 * (beta * t).sqrt() / PI {
            literal = literal.with_status(Status::CounterRegime).note("R below 4 sqrt(beta t)/pi");
        }
        out.push(literal);
        out.push(
            BoundCheck::lower("ball_lower_half_constant", params, ball, 0.5 * shape, cfg.slack)
                .informational()
                .note("constant 1/2 keeps the 1/(4 pi^2) of the kernel product"),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_grid;
    use crate::noise::{Baseline, KernelFamily};
    use std::sync::Arc;

    fn exp_kernel(radius: f64) -> CovarianceKernel {
        CovarianceKernel::new(
            KernelFamily::ExponentialGeodesic { kappa: 4.0 },
            NoiseConstants { c_h_lo: -0.5, c_h_up: 0.5 },
            radius,
            Baseline::LowerBound,
        )
        .unwrap()
    }

    fn unit_kernel(radius: f64) -> CovarianceKernel {
        CovarianceKernel::new(
            KernelFamily::Constant { h0: 1.0 },
            NoiseConstants { c_h_lo: 0.0, c_h_up: 0.0 },
            radius,
            Baseline::LowerBound,
        )
        .unwrap()
    }

    #[test]
    fn constant_kernel_closed_form() {
        let r = 2f64.exp();
        let f = f_e(1.0, r, 1.0, &unit_kernel(r), Resolution::default()).unwrap();
        let exact = (1.0 - (-2.0f64).exp()) / 2.0;
        assert!((f.value - exact).abs() < 1e-8, "{} vs {exact}", f.value);
        assert!((f.value - 0.43233).abs() < 1e-5);
    }

    #[test]
    fn richardson_estimate_small_or_shrinking() {
        let r = 2f64.exp();
        let k = exp_kernel(r);
        let e1 = f_e(1.0, r, 1.0, &k, Resolution::new(1).unwrap()).unwrap();
        let e2 = f_e(1.0, r, 1.0, &k, Resolution::new(2).unwrap()).unwrap();
        assert!(
            e2.estimated_error <= e1.estimated_error / 2.0 || e2.estimated_error < 1e-11,
            "{e1:?} {e2:?}"
        );
        let oracle = spectral_f_e(&k, 1.0, 1.0, 3000);
        assert!((e2.value - oracle).abs() < 1e-6, "{} vs spectral {oracle}", e2.value);
        // Frozen value, agreed by both routes.
        assert!((e2.value - FROZEN_EXP_E2).abs() < 1e-6, "{}", e2.value);
    }

    const FROZEN_EXP_E2: f64 = 0.4592825;

    /// Independent route: with h(θ) = Σ c_l P_l(cos θ), the inner integral is
    /// Σ c_l e^{−l(l+1)s/R²}, so f_e = Σ c_l (1 − e^{−λ_l t})/λ_l with
    /// λ_l = 2α + l(l+1)/R². The c_l come from a fine θ quadrature.
    fn spectral_f_e(k: &CovarianceKernel, alpha: f64, t: f64, lmax: usize) -> f64 {
        let r2 = k.radius().powi(2);
        let gl = GaussLegendre::new(16);
        let panels = 4 * lmax;
        let mut c = vec![0.0; lmax + 1];
        for m in 0..panels {
            let (a, b) = (PI * m as f64 / panels as f64, PI * (m + 1) as f64 / panels as f64);
            for (th, w) in gl.mapped(a, b) {
                let x = th.cos();
                let hw = k.eval_angle(th) * th.sin() * w;
                let (mut p0, mut p1) = (1.0, x);
                c[0] += hw;
                c[1] += hw * x;
                for l in 2..=lmax {
                    let p2 = ((2 * l - 1) as f64 * x * p1 - (l - 1) as f64 * p0) / l as f64;
                    c[l] += hw * p2;
                    p0 = p1;
                    p1 = p2;
                }
            }
        }
        let mut total = 0.0;
        for (l, cl) in c.iter().enumerate() {
            let lf = l as f64;
            let lam = 2.0 * alpha + lf * (lf + 1.0) / r2;
            total += (2.0 * lf + 1.0) / 2.0 * cl * (-(-lam * t).exp_m1()) / lam;
        }
        total
    }

    #[test]
    fn rotational_invariance() {
        let r = 3f64.exp();
        let k = exp_kernel(r);
        let north = f_e(1.0, r, 1.0, &k, Resolution::default()).unwrap();
        let bases = [(0.3, 0.1), (1.2, 2.0), (PI / 2.0, -1.0), (2.5, 4.0), (3.1, 0.7)];
        for (c, l) in bases {
            let b = SpherePoint::new(c, l, r).unwrap();
            let f = f_e_at(1.0, 1.0, &k, Resolution::default(), &b).unwrap();
            let tol = 3.0 * north.estimated_error.max(f.estimated_error).max(1e-12);
            assert!((f.value - north.value).abs() <= tol, "{} vs {} (tol {tol})", f.value, north.value);
        }
    }

    #[test]
    fn ball_limits() {
        let r = 2f64.exp();
        let k = exp_kernel(r);
        let t = 1.0;
        let beta_full = (PI * r).powi(2) / t;
        let table = FunctionalTable::new(&k, t, &[beta_full, 1e-8], Resolution::default()).unwrap();
        let full = table.full(0.5).unwrap().value;
        assert!((table.ball(0, 0.5).unwrap().value - full).abs() < 1e-12 * full);
        assert!(table.complement(0, 0.5).unwrap().value.abs() < 1e-14);
        // A vanishing ball: the value is about h t (βt/2s)² integrated, tiny.
        assert!(table.ball(1, 0.5).unwrap().value < 1e-6);
    }

    #[test]
    fn ball_errors() {
        let r = 2f64.exp();
        let k = exp_kernel(r);
        assert!(f_e_ball(0.0, 1.0, r, 1.0, &k, Resolution::default()).is_err());
        assert!(f_e_ball(1e6, 1.0, r, 1.0, &k, Resolution::default()).is_err());
        assert!(f_e(0.0, r, 1.0, &k, Resolution::default()).is_err());
        assert!(f_e(1.0, r + 1.0, 1.0, &k, Resolution::default()).is_err());
        assert!(Resolution::new(0).is_err());
    }

    #[test]
    fn garsia_radius_examples() {
        let s = GarsiaSpec::new(3, 1.0).unwrap();
        assert!((s.exponent() - 2.0 / 3.0).abs() < 1e-15);
        assert!((garsia_radius(1, &s) - 2f64.powf(-1.5)).abs() < 1e-15);
        assert!((garsia_radius(1, &s) - 0.35355).abs() < 1e-5);
        assert_eq!(garsia_radius(0, &s), 1.0);
        for n in 0..=10 {
            let ratio = s.mu(garsia_radius(n + 1, &s)) / s.mu(garsia_radius(n, &s));
            assert!((ratio - 0.5).abs() < 1e-14);
        }
        assert!((s.doubling_constant() - 2f64.powf(2.0 / 3.0)).abs() < 1e-15);
        assert!(GarsiaSpec::new(1, 1.0).is_err());
        assert!(GarsiaSpec::new(3, 2.0).is_err());
    }

    #[test]
    fn garsia_spike_on_three_nodes() {
        // Nodes at the north pole and two equatorial points, spike at node 0.
        let r = 2.0;
        let pts = [
            SpherePoint::new(0.0, 0.0, r).unwrap(),
            SpherePoint::new(PI / 2.0, 0.0, r).unwrap(),
            SpherePoint::new(PI / 2.0, PI / 2.0, r).unwrap(),
        ];
        let w = [0.5, 1.5, 2.0];
        let u = [3.0, 0.0, 0.0];
        let s = GarsiaSpec::new(2, 0.5).unwrap();
        let got = garsia_integral_points(&pts, &w, &u, &s).unwrap();
        // Two ordered pairs per unequal couple; d = Rπ/2 from the pole to each.
        let d: f64 = r * PI / 2.0;
        let power = 2.0 / 3.0 + 0.5;
        let expected = 2.0 * (0.5 * 1.5 + 0.5 * 2.0) * 9.0 / d.powf(power);
        assert!((got - expected).abs() < 1e-12 * expected, "{got} vs {expected}");
    }

    #[test]
    fn garsia_constant_field_is_zero() {
        let grid = Arc::new(build_grid(3.0, 1).unwrap());
        let f = FieldState::constant(grid, 2.5);
        assert_eq!(garsia_integral(&f, &GarsiaSpec::new(4, 1.0).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn garsia_bound_positive_and_grows_with_k() {
        let c = NoiseConstants { c_h_lo: 0.0, c_h_up: 0.0 };
        let b2 = garsia_moment_bound(&GarsiaSpec::new(2, 1.0).unwrap(), 3.0, 1.0, &c, 0.05);
        let b4 = garsia_moment_bound(&GarsiaSpec::new(4, 1.0).unwrap(), 3.0, 1.0, &c, 0.05);
        assert!(b2 > 0.0 && b4 > b2);
    }
}
