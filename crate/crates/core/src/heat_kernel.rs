//! The heat kernel p_R(t,θ) of ½Δ on S_R²: truncated Legendre series with a
//! certified tail, an exact image-sum integral for very small t/R², the
//! Molchanov Gaussian asymptotic, and kernel matrices over lattices.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::{Arc, OnceLock};

use crate::error::{domain, Error, Result};
use crate::geometry::SphereGrid;
use crate::legendre::legendre_sum;
use crate::quadrature::GaussLegendre;
use crate::ring::RingOperator;

/// Below this t/R² kernels are evaluated by the image-sum integral.
pub const SMALL_TIME_THRESHOLD: f64 = 1e-4;

/// Largest admissible truncation degree.
pub const DEGREE_CAP: usize = 200_000;

/// Tail majorant for Σ_{l>L} (2l+1)e^{−l(l+1)τ/2}/(4πR²).
///
/// Consecutive terms for l ≥ L+1 shrink by at most
/// ρ = (2L+5)/(2L+3)·e^{−(L+2)τ}, so the tail is at most a_{L+1}/(1−ρ).
fn tail_majorant(l: usize, tau: f64, radius: f64) -> f64 {
    let lf = l as f64;
    let lead = (2.0 * lf + 3.0) * (-(lf + 1.0) * (lf + 2.0) * tau / 2.0).exp() / (4.0 * PI * radius * radius);
    let ratio = (2.0 * lf + 5.0) / (2.0 * lf + 3.0) * (-(lf + 2.0) * tau).exp();
    if ratio >= 1.0 {
        f64::INFINITY
    } else {
        lead / (1.0 - ratio)
    }
}

/// Smallest L whose tail majorant is at most `tol`.
pub fn truncation_degree(radius: f64, time: f64, tol: f64) -> Result<usize> {
    if !(radius > 0.0 && time > 0.0 && tol > 0.0) {
        return domain(format!("truncation_degree needs R, t, tol > 0 (got {radius}, {time}, {tol})"));
    }
    let tau = time / (radius * radius);
    if tol < 1e-290 {
        return Err(Error::DegreeCapExceeded { cap: DEGREE_CAP, tau, tol });
    }
    // The majorant is eventually decreasing; find a bracket by doubling, then bisect.
    let ok = |l: usize| tail_majorant(l, tau, radius) <= tol;
    if ok(0) {
        return Ok(0);
    }
    let mut hi = 1usize;
    while !ok(hi) {
        if hi >= DEGREE_CAP {
            return Err(Error::DegreeCapExceeded { cap: DEGREE_CAP, tau, tol });
        }
        hi = (hi * 2).min(DEGREE_CAP);
    }
    let mut lo = hi / 2;
    // Invariant: !ok(lo) (or lo = 0 which failed above), ok(hi).
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // The majorant is not monotone for tiny L when τ is small; scan down.
    while hi > 0 && ok(hi - 1) {
        hi -= 1;
    }
    Ok(hi)
}

/// Truncated Legendre expansion
/// p_R(t,θ) ≈ Σ_{l≤L} (2l+1)e^{−l(l+1)t/2R²}P_l(cosθ)/(4πR²).
#[derive(Debug, Clone)]
pub struct HeatKernelSeries {
    radius: f64,
    time: f64,
    truncation: usize,
    tail_tolerance: f64,
    coeffs: Vec<f64>,
}

impl HeatKernelSeries {
    pub fn new(radius: f64, time: f64, tail_tolerance: f64) -> Result<Self> {
        let truncation = truncation_degree(radius, time, tail_tolerance)?;
        let tau = time / (radius * radius);
        let norm = 1.0 / (4.0 * PI * radius * radius);
        let coeffs = (0..=truncation)
            .map(|l| {
                let lf = l as f64;
                (2.0 * lf + 1.0) * (-lf * (lf + 1.0) * tau / 2.0).exp() * norm
            })
            .collect();
        Ok(Self { radius, time, truncation, tail_tolerance, coeffs })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn tail_tolerance(&self) -> f64 {
        self.tail_tolerance
    }

    /// Certified bound on the omitted tail.
    pub fn tail_bound(&self) -> f64 {
        tail_majorant(self.truncation, self.time / (self.radius * self.radius), self.radius)
    }

    fn eval_unchecked(&self, theta: f64) -> f64 {
        legendre_sum(&self.coeffs, theta.cos())
    }
}

/// Evaluates the truncated series at angle θ ∈ [0, π].
pub fn kernel_eval(series: &HeatKernelSeries, theta: f64) -> Result<f64> {
    if !(0.0..=PI).contains(&theta) {
        return domain(format!("angle {theta} outside [0, pi]"));
    }
    Ok(series.eval_unchecked(theta))
}

const IMAGE_ORDER: usize = 16;
const IMAGE_CUTOFF: f64 = 80.0;

fn image_rule() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(IMAGE_ORDER))
}

/// p_1(τ,θ)·e^{shift/2τ} from the image-sum representation
///
/// p_1(τ,θ) = √2 e^{τ/8}/(2πτ)^{3/2} ∫_θ^π G(φ)/√(cosθ − cosφ) dφ,
/// G(φ) = Σ_k (−1)^k (φ+2πk) e^{−(φ+2πk)²/2τ},
///
/// with the substitution cosφ = cosθ − (1+cosθ)sin²v, which removes the
/// endpoint singularity. Geometric panels in v resolve the peak near v = 0.
fn image_integral(tau: f64, theta: f64, shift: f64) -> f64 {
    let (sh, ch) = (0.5 * theta).sin_cos();
    let phi_max = (theta * theta + 2.0 * tau * IMAGE_CUTOFF).sqrt();
    let v_max = if phi_max >= PI || ch < 1e-12 {
        0.5 * PI
    } else {
        let s = ((0.5 * phi_max).sin().powi(2) - sh * sh) / (ch * ch);
        s.clamp(0.0, 1.0).sqrt().asin()
    };
    let scale = if ch > 0.0 { sh / ch } else { f64::INFINITY };
    let floor = (0.05 * scale).max(v_max * 2f64.powi(-14));
    let mut breaks = vec![v_max];
    while *breaks.last().unwrap() > floor {
        let b = breaks.last().unwrap() * 0.5;
        breaks.push(b);
    }
    breaks.push(0.0);

    let (sh2, ch2) = (sh * sh, ch * ch);
    let g = |phi: f64| -> f64 {
        let mut s = 0.0;
        for k in -3i32..=3 {
            let x = phi + 2.0 * PI * k as f64;
            let term = x * (-(x * x - shift) / (2.0 * tau)).exp();
            s += if k % 2 == 0 { term } else { -term };
        }
        s
    };
    let rule = image_rule();
    let mut total = 0.0;
    for w in breaks.windows(2) {
        let (b, a) = (w[0], w[1]);
        total += rule.integrate(a, b, |v| {
            let (sv, cv) = v.sin_cos();
            let s2 = sh2 + ch2 * sv * sv;
            let c2 = ch2 * cv * cv;
            let phi = 2.0 * s2.sqrt().atan2(c2.sqrt());
            2.0 * g(phi) / (2.0 * s2).sqrt()
        });
    }
    std::f64::consts::SQRT_2 * (tau / 8.0).exp() / (2.0 * PI * tau).powf(1.5) * total
}

/// Unit-sphere kernel p_1(τ,θ) by the image-sum integral. Accurate for
/// τ ≲ 2 at every θ, including where the series cancels catastrophically.
pub fn unit_kernel_image(tau: f64, theta: f64) -> f64 {
    if theta * theta > 2.0 * tau * 760.0 {
        return 0.0;
    }
    image_integral(tau, theta, 0.0)
}

/// p_1(τ,θ)·e^{θ²/2τ}, the kernel with its Gaussian factor divided out.
pub fn unit_kernel_image_scaled(tau: f64, theta: f64) -> f64 {
    image_integral(tau, theta, theta * theta)
}

/// Molchanov asymptotic e^{−R²θ²/2t}/(2πt)·√(θ/sinθ).
pub fn molchanov_eval(radius: f64, time: f64, theta: f64) -> Result<f64> {
    if !(0.0..PI).contains(&theta) {
        return domain(format!("Molchanov asymptotic needs theta in [0, pi), got {theta}"));
    }
    if !(radius > 0.0 && time > 0.0) {
        return domain("Molchanov asymptotic needs R, t > 0");
    }
    let gauss = (-radius * radius * theta * theta / (2.0 * time)).exp() / (2.0 * PI * time);
    Ok(gauss * curvature_factor(theta))
}

fn curvature_factor(theta: f64) -> f64 {
    if theta < 1e-8 {
        1.0
    } else {
        (theta / theta.sin()).sqrt()
    }
}

/// |molchanov/exact − 1| at (τ = t/R², θ), computed with the common
/// Gaussian factor cancelled so it stays meaningful where both underflow.
pub fn molchanov_relative_error(tau: f64, theta: f64) -> Result<f64> {
    if !(0.0..PI).contains(&theta) {
        return domain(format!("Molchanov asymptotic needs theta in [0, pi), got {theta}"));
    }
    let exact = unit_kernel_image_scaled(tau, theta);
    let approx = curvature_factor(theta) / (2.0 * PI * tau);
    Ok((approx / exact - 1.0).abs())
}

/// Kernel evaluator choosing the series or the image-sum integral by t/R².
#[derive(Debug, Clone)]
pub enum HeatKernel {
    Series(HeatKernelSeries),
    Image { radius: f64, time: f64 },
}

impl HeatKernel {
    pub fn new(radius: f64, time: f64, tol: f64) -> Result<Self> {
        if !(radius > 0.0 && time > 0.0 && tol > 0.0) {
            return domain(format!("heat kernel needs R, t, tol > 0 (got {radius}, {time}, {tol})"));
        }
        let tau = time / (radius * radius);
        if tau < SMALL_TIME_THRESHOLD {
            log::warn!("t/R^2 = {tau:e} below {SMALL_TIME_THRESHOLD:e}: using the image-sum integral");
            Ok(HeatKernel::Image { radius, time })
        } else {
            Ok(HeatKernel::Series(HeatKernelSeries::new(radius, time, tol)?))
        }
    }

    pub fn radius(&self) -> f64 {
        match self {
            HeatKernel::Series(s) => s.radius,
            HeatKernel::Image { radius, .. } => *radius,
        }
    }

    pub fn time(&self) -> f64 {
        match self {
            HeatKernel::Series(s) => s.time,
            HeatKernel::Image { time, .. } => *time,
        }
    }

    pub fn truncation(&self) -> Option<usize> {
        match self {
            HeatKernel::Series(s) => Some(s.truncation),
            HeatKernel::Image { .. } => None,
        }
    }

    /// p_R(t,θ); θ is clamped to [0, π].
    pub fn eval(&self, theta: f64) -> f64 {
        let theta = theta.clamp(0.0, PI);
        match self {
            HeatKernel::Series(s) => s.eval_unchecked(theta),
            HeatKernel::Image { radius, time } => {
                unit_kernel_image(time / (radius * radius), theta) / (radius * radius)
            }
        }
    }
}

/// max_θ |p_R(t,θ) − R⁻²p₁(t/R²,θ)| over `samples` equispaced angles.
pub fn scaling_residual(radius: f64, time: f64, tol: f64, samples: usize) -> Result<f64> {
    let full = HeatKernelSeries::new(radius, time, tol)?;
    let unit = HeatKernelSeries::new(1.0, time / (radius * radius), tol)?;
    let mut worst: f64 = 0.0;
    for i in 0..samples {
        let theta = PI * i as f64 / (samples - 1).max(1) as f64;
        let a = kernel_eval(&full, theta)?;
        let b = kernel_eval(&unit, theta)? / (radius * radius);
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

/// The matrix K_ij = p_R(t, θ(x_i, x_j)) on a lattice, held in
/// rotation-blocked form.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    grid: Arc<SphereGrid>,
    time: f64,
    tolerance: f64,
    truncation: Option<usize>,
    op: RingOperator,
    row_defect: f64,
}

/// Assembles K(t) on `grid` and records δ_row = max_i |Σ_j K_ij w_j − 1|.
pub fn kernel_matrix(grid: &Arc<SphereGrid>, time: f64, tol: f64) -> Result<KernelMatrix> {
    if !(time > 0.0) {
        return domain(format!("kernel matrix needs t > 0, got {time}"));
    }
    let kernel = HeatKernel::new(grid.radius(), time, tol)?;
    let op = RingOperator::from_angle_fn(grid, |theta| kernel.eval(theta));
    let mut weighted = op.clone();
    scale_by_weights(&mut weighted, grid);
    let (ring, poles) = weighted.row_sums();
    let row_defect = ring.iter().chain(poles.iter()).fold(0.0f64, |m, s| m.max((s - 1.0).abs()));
    Ok(KernelMatrix {
        grid: Arc::clone(grid),
        time,
        tolerance: tol,
        truncation: kernel.truncation(),
        op,
        row_defect,
    })
}

pub(crate) fn scale_by_weights(op: &mut RingOperator, grid: &SphereGrid) {
    let ring_w: Vec<f64> = (0..grid.rings()).map(|a| grid.ring_weight(a)).collect();
    op.scale_cols(&ring_w, [grid.pole_weight(); 2]);
}

impl KernelMatrix {
    pub fn grid(&self) -> &Arc<SphereGrid> {
        &self.grid
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    /// Series truncation degree, or `None` when the image-sum integral was used.
    pub fn truncation(&self) -> Option<usize> {
        self.truncation
    }

    pub fn row_defect(&self) -> f64 {
        self.row_defect
    }

    pub fn operator(&self) -> &RingOperator {
        &self.op
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.op.entry(i, j)
    }

    /// K · diag(w).
    pub fn weighted(&self) -> RingOperator {
        let mut op = self.op.clone();
        scale_by_weights(&mut op, &self.grid);
        op
    }

    /// Binary export: magic `SPHK`, then little-endian R, t (f64), n (u64),
    /// L (u64, u64::MAX for the image-sum route), tol (f64), N (u64), and the
    /// N×N entries row by row.
    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(b"SPHK")?;
        out.write_all(&self.grid.radius().to_le_bytes())?;
        out.write_all(&self.time.to_le_bytes())?;
        out.write_all(&(self.grid.level() as u64).to_le_bytes())?;
        out.write_all(&(self.truncation.map_or(u64::MAX, |l| l as u64)).to_le_bytes())?;
        out.write_all(&self.tolerance.to_le_bytes())?;
        let n = self.grid.len();
        out.write_all(&(n as u64).to_le_bytes())?;
        let mut row = Vec::with_capacity(8 * n);
        for i in 0..n {
            row.clear();
            for j in 0..n {
                row.extend_from_slice(&self.op.entry(i, j).to_le_bytes());
            }
            out.write_all(&row)?;
        }
        Ok(())
    }

    /// CSV export with columns (i, j, value).
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "i,j,value")?;
        let n = self.grid.len();
        for i in 0..n {
            for j in 0..n {
                writeln!(out, "{i},{j},{:.17e}", self.op.entry(i, j))?;
            }
        }
        Ok(())
    }
}
