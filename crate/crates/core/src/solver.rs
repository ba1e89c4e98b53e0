//! Exponential-Euler time stepping of the mild solution, Picard iteration
//! against a frozen noise path, and the ball-truncated coupling process.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::{geodesic_angle, SphereGrid, SpherePoint};
use crate::heat_kernel::kernel_matrix;
use crate::noise::{NoiseFactor, NoiseWorkspace};
use crate::ring::{RingOperator, Workspace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaSpec {
    Constant { value: f64 },
    /// clamp(intercept + slope·v, lo, hi).
    AffineClamped { intercept: f64, slope: f64, lo: f64, hi: f64 },
    /// Piecewise linear through (v, σ) knots, constant beyond the ends.
    Table { knots: Vec<(f64, f64)> },
}

impl Default for SigmaSpec {
    fn default() -> Self {
        SigmaSpec::Constant { value: 1.0 }
    }
}

/// A bounded Lipschitz nonlinearity with its bounds and Lipschitz constant.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaFunction {
    spec: SigmaSpec,
    lo: f64,
    up: f64,
    lipschitz: f64,
}

impl SigmaFunction {
    pub fn new(spec: SigmaSpec) -> Result<Self> {
        let (lo, up, lipschitz) = match &spec {
            SigmaSpec::Constant { value } => {
                if !(value.is_finite() && *value >= 0.0) {
                    return domain(format!("constant sigma must be finite and >= 0, got {value}"));
                }
                (*value, *value, 0.0)
            }
            SigmaSpec::AffineClamped { intercept, slope, lo, hi } => {
                if !(intercept.is_finite() && slope.is_finite()) {
                    return domain("affine sigma needs finite intercept and slope");
                }
                if !(*lo >= 0.0 && lo <= hi && hi.is_finite()) {
                    return domain(format!("affine sigma needs 0 <= lo <= hi < inf, got [{lo}, {hi}]"));
                }
                (*lo, *hi, slope.abs())
            }
            SigmaSpec::Table { knots } => {
                if knots.is_empty() {
                    return domain("sigma table needs at least one knot");
                }
                let mut lip: f64 = 0.0;
                for w in knots.windows(2) {
                    if !(w[1].0 > w[0].0) {
                        return domain("sigma table knots must be strictly increasing");
                    }
                    lip = lip.max(((w[1].1 - w[0].1) / (w[1].0 - w[0].0)).abs());
                }
                let lo = knots.iter().map(|k| k.1).fold(f64::INFINITY, f64::min);
                let up = knots.iter().map(|k| k.1).fold(f64::NEG_INFINITY, f64::max);
                if !(lo >= 0.0 && up.is_finite()) {
                    return domain("sigma table values must be finite and >= 0");
                }
                (lo, up, lip)
            }
        };
        Ok(Self { spec, lo, up, lipschitz })
    }

    pub fn constant(value: f64) -> Result<Self> {
        Self::new(SigmaSpec::Constant { value })
    }

    pub fn spec(&self) -> &SigmaSpec {
        &self.spec
    }

    /// C_σ_lo.
    pub fn lo(&self) -> f64 {
        self.lo
    }

    /// C_σ_up.
    pub fn up(&self) -> f64 {
        self.up
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn is_constant(&self) -> bool {
        self.lipschitz == 0.0
    }

    /// σ bounded away from zero, as the moment lower bounds assume.
    pub fn in_standing_class(&self) -> bool {
        self.lo > 0.0
    }

    #[inline]
    pub fn eval(&self, v: f64) -> f64 {
        match &self.spec {
            SigmaSpec::Constant { value } => *value,
            SigmaSpec::AffineClamped { intercept, slope, lo, hi } => (intercept + slope * v).clamp(*lo, *hi),
            SigmaSpec::Table { knots } => {
                if v <= knots[0].0 {
                    return knots[0].1;
                }
                for w in knots.windows(2) {
                    if v <= w[1].0 {
                        let s = (v - w[0].0) / (w[1].0 - w[0].0);
                        return w[0].1 + s * (w[1].1 - w[0].1);
                    }
                }
                knots[knots.len() - 1].1
            }
        }
    }
}

/// Values of u(t, ·) on the lattice nodes.
#[derive(Debug, Clone)]
pub struct FieldState {
    pub grid: Arc<SphereGrid>,
    pub time: f64,
    pub values: Vec<f64>,
}

impl FieldState {
    pub fn new(grid: Arc<SphereGrid>, time: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return domain(format!("field has {} values for {} nodes", values.len(), grid.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: 0, node: i });
        }
        if !(time >= 0.0) {
            return domain(format!("field time must be >= 0, got {time}"));
        }
        Ok(Self { grid, time, values })
    }

    pub fn constant(grid: Arc<SphereGrid>, value: f64) -> Self {
        let n = grid.len();
        Self { grid, time: 0.0, values: vec![value; n] }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// (Σ w_i u_i²)^{1/2}.
    pub fn weighted_l2(&self) -> f64 {
        weighted_l2(&self.grid, &self.values)
    }
}

fn weighted_l2(grid: &SphereGrid, v: &[f64]) -> f64 {
    v.iter().zip(grid.weights()).map(|(x, w)| w * x * x).sum::<f64>().sqrt()
}

fn default_true() -> bool {
    true
}

fn default_tol() -> f64 {
    1e-12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub dt: f64,
    pub steps: usize,
    #[serde(default = "default_tol")]
    pub kernel_tol: f64,
    #[serde(default = "default_true")]
    pub clamp_negative_kernel: bool,
    /// Rescale each propagator row to sum to 1 so constants are preserved
    /// exactly despite the quadrature defect.
    #[serde(default = "default_true")]
    pub normalize_rows: bool,
    /// U with sup|u0| ≤ U, checked before simulating; None leaves it unchecked.
    #[serde(default)]
    pub initial_bound_u: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            steps: 20,
            kernel_tol: 1e-12,
            clamp_negative_kernel: true,
            normalize_rows: true,
            initial_bound_u: None,
        }
    }
}

impl SolverConfig {
    pub fn for_time(time: f64, steps: usize) -> Self {
        Self { dt: time / steps as f64, steps, ..Self::default() }
    }

    pub fn final_time(&self) -> f64 {
        self.dt * self.steps as f64
    }

    pub fn validate(&self, target_time: Option<f64>) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return domain(format!("dt must be positive, got {}", self.dt));
        }
        if self.steps == 0 {
            return domain("steps must be >= 1");
        }
        if !(self.kernel_tol > 0.0) {
            return domain("kernel_tol must be positive");
        }
        if let Some(t) = target_time {
            if (self.final_time() - t).abs() > 1e-12 * t.max(1.0) {
                return domain(format!("steps*dt = {} does not reach t = {t}", self.final_time()));
            }
        }
        Ok(())
    }
}

/// One exponential-Euler propagator P ≈ K(dt)·diag(w), optionally clamped to
/// nonnegative entries and row-normalized.
#[derive(Debug, Clone)]
pub struct Propagator {
    grid: Arc<SphereGrid>,
    time: f64,
    op: RingOperator,
    /// Symmetric kernel part, and the row scaling applied after the weights.
    sym: RingOperator,
    row_scale: (Vec<f64>, [f64; 2]),
    raw_row_defect: f64,
}

impl Propagator {
    pub fn new(grid: &Arc<SphereGrid>, time: f64, kernel_tol: f64, clamp: bool, normalize: bool) -> Result<Self> {
        let km = kernel_matrix(grid, time, kernel_tol)?;
        let sym = if clamp { km.operator().clamp_nonnegative() } else { km.operator().clone() };
        let ring_w: Vec<f64> = (0..grid.rings()).map(|a| grid.ring_weight(a)).collect();
        let mut op = sym.clone();
        op.scale_cols(&ring_w, [grid.pole_weight(); 2]);
        let row_scale = if normalize {
            let (rs, ps) = op.row_sums();
            (rs.iter().map(|s| 1.0 / s).collect(), [1.0 / ps[0], 1.0 / ps[1]])
        } else {
            (vec![1.0; grid.rings()], [1.0; 2])
        };
        op.scale_rows(&row_scale.0, row_scale.1);
        Ok(Self { grid: Arc::clone(grid), time, op, sym, row_scale, raw_row_defect: km.row_defect() })
    }

    pub fn from_config(grid: &Arc<SphereGrid>, cfg: &SolverConfig) -> Result<Self> {
        Self::new(grid, cfg.dt, cfg.kernel_tol, cfg.clamp_negative_kernel, cfg.normalize_rows)
    }

    pub fn grid(&self) -> &Arc<SphereGrid> {
        &self.grid
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn operator(&self) -> &RingOperator {
        &self.op
    }

    /// δ_row of the unclamped, unnormalized kernel matrix.
    pub fn raw_row_defect(&self) -> f64 {
        self.raw_row_defect
    }

    /// Pᵀ = diag(w)·K·D.
    pub fn transpose(&self) -> RingOperator {
        let g = &self.grid;
        let ring_w: Vec<f64> = (0..g.rings()).map(|a| g.ring_weight(a)).collect();
        let mut t = self.sym.clone();
        t.scale_rows(&ring_w, [g.pole_weight(); 2]);
        t.scale_cols(&self.row_scale.0, self.row_scale.1);
        t
    }

    pub fn apply(&self, v: &[f64], out: &mut [f64], ws: &mut Workspace) {
        self.op.apply(v, out, ws);
    }
}

/// u0 ↦ P(t)·u0 with P built at time t from the solver's kernel options.
pub fn deterministic_flow(u0: &FieldState, t: f64, cfg: &SolverConfig) -> Result<FieldState> {
    if !(t > 0.0) {
        return domain(format!("deterministic flow needs t > 0, got {t}"));
    }
    let p = Propagator::new(&u0.grid, t, cfg.kernel_tol, cfg.clamp_negative_kernel, cfg.normalize_rows)?;
    let mut out = vec![0.0; u0.values.len()];
    p.apply(&u0.values, &mut out, &mut Workspace::for_grid(&u0.grid));
    Ok(FieldState { grid: Arc::clone(&u0.grid), time: u0.time + t, values: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub max_abs: f64,
    pub l2: f64,
}

/// Scratch space for one replica.
#[derive(Debug, Clone)]
pub struct StepScratch {
    ring: Workspace,
    noise: NoiseWorkspace,
    inc: Vec<f64>,
    tmp: Vec<f64>,
}

/// Propagator, noise factor and σ bundled for repeated stepping.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub propagator: Arc<Propagator>,
    pub factor: Arc<NoiseFactor>,
    pub sigma: SigmaFunction,
}

impl Simulator {
    pub fn new(propagator: Arc<Propagator>, factor: Arc<NoiseFactor>, sigma: SigmaFunction) -> Result<Self> {
        if propagator.grid().len() != factor.grid().len() || propagator.grid().radius() != factor.grid().radius() {
            return domain("propagator and noise factor live on different lattices");
        }
        Ok(Self { propagator, factor, sigma })
    }

    pub fn dt(&self) -> f64 {
        self.propagator.time()
    }

    pub fn scratch(&self) -> StepScratch {
        let g = self.propagator.grid();
        StepScratch {
            ring: Workspace::for_grid(g),
            noise: self.factor.workspace(),
            inc: vec![0.0; g.len()],
            tmp: vec![0.0; g.len()],
        }
    }

    /// u ← P·(u + σ(u)⊙ΔW) with σ at the left endpoint.
    pub fn mild_step<R: Rng + ?Sized>(&self, u: &mut [f64], rng: &mut R, s: &mut StepScratch, step: usize) -> Result<()> {
        self.factor.sample_into(self.dt(), rng, &mut s.inc, &mut s.noise);
        self.step_with_increment(u, step, s)
    }

    /// As [`Self::mild_step`] with the increment already in the scratch buffer.
    fn step_with_increment(&self, u: &mut [f64], step: usize, s: &mut StepScratch) -> Result<()> {
        for ((t, &x), &dw) in s.tmp.iter_mut().zip(u.iter()).zip(&s.inc) {
            *t = x + self.sigma.eval(x) * dw;
        }
        self.propagator.apply(&s.tmp, u, &mut s.ring);
        if let Some(node) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step, node });
        }
        Ok(())
    }

    /// Runs `steps` steps from `u0`, recording max|u| and the weighted L² norm
    /// after each step.
    pub fn run<R: Rng + ?Sized>(
        &self,
        u0: &FieldState,
        steps: usize,
        rng: &mut R,
        s: &mut StepScratch,
    ) -> Result<(FieldState, Vec<TrajectoryPoint>)> {
        let mut u = u0.values.clone();
        let mut traj = Vec::with_capacity(steps);
        for step in 1..=steps {
            self.mild_step(&mut u, rng, s, step)?;
            traj.push(TrajectoryPoint {
                step,
                max_abs: u.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                l2: weighted_l2(&u0.grid, &u),
            });
        }
        let time = u0.time + steps as f64 * self.dt();
        Ok((FieldState { grid: Arc::clone(&u0.grid), time, values: u }, traj))
    }

    /// Final field only, without trajectory bookkeeping.
    pub fn run_final<R: Rng + ?Sized>(&self, u0: &[f64], steps: usize, rng: &mut R, s: &mut StepScratch) -> Result<Vec<f64>> {
        let mut u = u0.to_vec();
        for step in 1..=steps {
            self.mild_step(&mut u, rng, s, step)?;
        }
        Ok(u)
    }
}

/// Iterates the mild step from `u0` up to time `t = cfg.steps·cfg.dt`.
pub fn simulate<R: Rng + ?Sized>(
    u0: &FieldState,
    t: f64,
    cfg: &SolverConfig,
    sim: &Simulator,
    rng: &mut R,
) -> Result<(FieldState, Vec<TrajectoryPoint>)> {
    cfg.validate(Some(t))?;
    if (sim.dt() - cfg.dt).abs() > 1e-15 * cfg.dt {
        return domain(format!("propagator built for dt = {}, config has {}", sim.dt(), cfg.dt));
    }
    if let Some(bound) = cfg.initial_bound_u {
        if u0.max_abs() > bound {
            return domain(format!("initial datum exceeds the bound U = {bound}"));
        }
    }
    let mut s = sim.scratch();
    sim.run(u0, cfg.steps, rng, &mut s)
}

/// Every increment of one noise path, so that several iterations can be driven
/// by the same W.
#[derive(Debug, Clone)]
pub struct NoiseRealization {
    pub dt: f64,
    pub increments: Vec<Vec<f64>>,
}

impl NoiseRealization {
    pub fn sample<R: Rng + ?Sized>(factor: &NoiseFactor, dt: f64, steps: usize, rng: &mut R) -> Self {
        let mut ws = factor.workspace();
        let increments = (0..steps)
            .map(|_| {
                let mut v = vec![0.0; factor.grid().len()];
                factor.sample_into(dt, rng, &mut v, &mut ws);
                v
            })
            .collect();
        Self { dt, increments }
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }
}

/// L_σ·√(2h_up·k/α), the contraction factor of one Picard step in the
/// weighted norm.
pub fn contraction_bound(lipschitz: f64, h_up: f64, k: f64, alpha: f64) -> f64 {
    if lipschitz == 0.0 {
        0.0
    } else {
        lipschitz * (2.0 * h_up * k / alpha).sqrt()
    }
}

/// α = 8L_σ²h_up·k, for which the contraction factor is ½.
pub fn picard_alpha(lipschitz: f64, h_up: f64, k: f64) -> f64 {
    8.0 * lipschitz * lipschitz * h_up * k
}

#[derive(Debug, Clone)]
pub struct PicardResult {
    pub field: FieldState,
    /// d_n = ‖u^{(n+1)} − u^{(n)}‖ for n = 0, 1, ….
    pub differences: Vec<f64>,
    /// ρ_n = d_n / d_{n−1}, defined while d_{n−1} is above the rounding floor.
    pub ratios: Vec<f64>,
    /// First n with u^{(n+1)} = u^{(n)} up to rounding.
    pub fixed_point_at: Option<usize>,
    pub alpha: f64,
}

/// Path u^{(n+1)}_m = P^m u0 + Σ_{j<m} P^{m−j}(σ(u^{(n)}_j)⊙ΔW_j), m = 0..=M.
fn picard_map(p: &Propagator, sigma: &SigmaFunction, noise: &NoiseRealization, prev: &[Vec<f64>], ws: &mut Workspace) -> Vec<Vec<f64>> {
    let n = prev[0].len();
    let mut out = Vec::with_capacity(prev.len());
    out.push(prev[0].clone());
    let mut tmp = vec![0.0; n];
    for (m, dw) in noise.increments.iter().enumerate() {
        let cur = &out[m];
        for i in 0..n {
            tmp[i] = cur[i] + sigma.eval(prev[m][i]) * dw[i];
        }
        let mut next = vec![0.0; n];
        p.apply(&tmp, &mut next, ws);
        out.push(next);
    }
    out
}

/// sup_m e^{−α t_m} max_x |a_m(x) − b_m(x)|.
fn weighted_sup_distance(a: &[Vec<f64>], b: &[Vec<f64>], alpha: f64, dt: f64) -> f64 {
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(m, (x, y))| {
            let d = x.iter().zip(y).fold(0.0f64, |acc, (p, q)| acc.max((p - q).abs()));
            (-alpha * m as f64 * dt).exp() * d
        })
        .fold(0.0, f64::max)
}

/// Picard iteration for the discrete mild equation against a fixed noise path,
/// starting from u^{(0)} ≡ u0 at every time.
pub fn picard_solve(
    u0: &FieldState,
    p: &Propagator,
    sigma: &SigmaFunction,
    noise: &NoiseRealization,
    iterations: usize,
    alpha: f64,
) -> Result<PicardResult> {
    if iterations == 0 {
        return domain("Picard iteration needs at least one step");
    }
    if (noise.dt - p.time()).abs() > 1e-15 * p.time() {
        return domain("noise realization and propagator use different dt");
    }
    let mut ws = Workspace::for_grid(&u0.grid);
    let mut path: Vec<Vec<f64>> = vec![u0.values.clone(); noise.steps() + 1];
    let mut differences = Vec::new();
    let mut ratios = Vec::new();
    let mut fixed_point_at = None;
    for n in 0..iterations {
        let next = picard_map(p, sigma, noise, &path, &mut ws);
        let scale = next.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
        let d = weighted_sup_distance(&next, &path, alpha, noise.dt);
        // Rounding in the propagator alone moves a path by ~1e-15·scale.
        let floor = 1e-13 * scale;
        if let Some(&prev) = differences.last() {
            if prev > floor {
                ratios.push(d / prev);
            }
        }
        differences.push(d);
        path = next;
        if d <= floor {
            fixed_point_at = Some(n + 1);
            break;
        }
    }
    if fixed_point_at.is_none() {
        if let Some(&last) = ratios.last() {
            if last > 1.0 {
                return Err(Error::PicardDiverged { ratio: last, iterations });
            }
        }
    }
    let time = u0.time + noise.steps() as f64 * noise.dt;
    let values = path.pop().expect("path has at least one entry");
    Ok(PicardResult {
        field: FieldState { grid: Arc::clone(&u0.grid), time, values },
        differences,
        ratios,
        fixed_point_at,
        alpha,
    })
}

#[derive(Debug, Clone)]
pub struct TruncatedProcessSpec {
    pub beta: f64,
    pub picard_n: usize,
    pub center: SpherePoint,
    pub time: f64,
}

/// Masked propagator powers A_k = P^k ⊙ 1{θ ≤ √(βt)/R} for the truncated
/// coupling process. The ball radius is fixed at the terminal time t.
#[derive(Debug, Clone)]
pub struct TruncatedSolver {
    propagator: Arc<Propagator>,
    masked: Vec<RingOperator>,
    ball_angle: f64,
    beta: f64,
    time: f64,
}

impl TruncatedSolver {
    pub fn new(propagator: Arc<Propagator>, steps: usize, beta: f64, time: f64) -> Result<Self> {
        let radius = propagator.grid().radius();
        if !(beta > 0.0 && time > 0.0) {
            return domain(format!("truncated process needs beta, t > 0 (got {beta}, {time})"));
        }
        let ball = (beta * time).sqrt();
        if ball > std::f64::consts::PI * radius * (1.0 + 1e-12) {
            return domain(format!("ball radius sqrt(beta t) = {ball} exceeds pi R = {}", std::f64::consts::PI * radius));
        }
        let ball_angle = ball / radius;
        let masked = propagator.operator().powers(steps).into_iter().map(|a| a.mask_by_angle(ball_angle)).collect();
        Ok(Self { propagator, masked, ball_angle, beta, time })
    }

    pub fn ball_angle(&self) -> f64 {
        self.ball_angle
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// All time slices of U^{(β,n)} on the whole lattice:
    /// U^{(n)}_m = P^m u0 + Σ_{j<m} A_{m−j}(σ(U^{(n−1)}_j)⊙ΔW_j), U^{(0)} ≡ u0.
    pub fn paths(&self, u0: &[f64], sigma: &SigmaFunction, noise: &NoiseRealization, picard_n: usize) -> Result<Vec<Vec<f64>>> {
        let steps = noise.steps();
        if steps > self.masked.len() {
            return domain(format!("solver prepared for {} steps, noise has {steps}", self.masked.len()));
        }
        let n = u0.len();
        let mut ws = Workspace::for_grid(self.propagator.grid());
        // Deterministic part P^m u0 is not truncated.
        let mut free = vec![u0.to_vec()];
        for m in 0..steps {
            let mut next = vec![0.0; n];
            self.propagator.apply(&free[m], &mut next, &mut ws);
            free.push(next);
        }
        let mut prev: Vec<Vec<f64>> = vec![u0.to_vec(); steps + 1];
        let mut forcing = vec![vec![0.0; n]; steps];
        let mut buf = vec![0.0; n];
        for _ in 0..picard_n {
            for (j, f) in forcing.iter_mut().enumerate() {
                for i in 0..n {
                    f[i] = sigma.eval(prev[j][i]) * noise.increments[j][i];
                }
            }
            let mut cur = free.clone();
            for m in 1..=steps {
                for j in 0..m {
                    self.masked[m - j - 1].apply(&forcing[j], &mut buf, &mut ws);
                    for (c, b) in cur[m].iter_mut().zip(&buf) {
                        *c += b;
                    }
                }
            }
            prev = cur;
        }
        Ok(prev)
    }
}

/// U^{(β,n)}_t at the lattice node nearest the requested center.
pub fn truncated_process(
    spec: &TruncatedProcessSpec,
    solver: &TruncatedSolver,
    u0: &FieldState,
    sigma: &SigmaFunction,
    noise: &NoiseRealization,
) -> Result<f64> {
    let grid = &u0.grid;
    if (spec.beta - solver.beta).abs() > 0.0 || (spec.time - solver.time).abs() > 1e-12 * spec.time {
        return domain("truncated solver was prepared for a different (beta, t)");
    }
    let node = grid.nearest_node(&spec.center)?;
    if geodesic_angle(&grid.nodes()[node], &spec.center)? > solver.ball_angle {
        return domain("the truncation ball around the center contains no lattice node");
    }
    let paths = solver.paths(&u0.values, sigma, noise, spec.picard_n)?;
    Ok(paths[noise.steps()][node])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_grid;
    use crate::noise::{build_factor, Baseline, CovarianceKernel, KernelFamily, NoiseConstants};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{E, PI};

    fn setup(level: u32, radius: f64, dt: f64, family: KernelFamily, baseline: Baseline) -> (Arc<SphereGrid>, Arc<Propagator>, Arc<NoiseFactor>) {
        let g = Arc::new(build_grid(radius, level).unwrap());
        let p = Arc::new(Propagator::new(&g, dt, 1e-12, true, true).unwrap());
        let k = CovarianceKernel::new(family, NoiseConstants::new(0.0, 0.0), radius, baseline).unwrap();
        let f = Arc::new(build_factor(&g, &k).unwrap());
        (g, p, f)
    }

    fn askey() -> KernelFamily {
        KernelFamily::Askey { theta_c: PI / 8.0, exponent: 2.0 }
    }

    #[test]
    fn sigma_bounds_and_lipschitz() {
        let s = SigmaFunction::new(SigmaSpec::AffineClamped { intercept: 1.0, slope: 0.5, lo: 0.5, hi: 2.0 }).unwrap();
        assert_eq!((s.lo(), s.up(), s.lipschitz()), (0.5, 2.0, 0.5));
        assert_eq!(s.eval(-10.0), 0.5);
        assert_eq!(s.eval(10.0), 2.0);
        let t = SigmaFunction::new(SigmaSpec::Table { knots: vec![(-1.0, 1.0), (0.0, 2.0), (2.0, 1.0)] }).unwrap();
        assert_eq!((t.lo(), t.up(), t.lipschitz()), (1.0, 2.0, 1.0));
        assert!(SigmaFunction::new(SigmaSpec::AffineClamped { intercept: 0.0, slope: 1.0, lo: 2.0, hi: 1.0 }).is_err());
        assert!(SigmaFunction::constant(-1.0).is_err());
        assert!(!SigmaFunction::constant(0.0).unwrap().in_standing_class());
    }

    proptest! {
        #[test]
        fn sigma_respects_declared_constants(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let specs = [
                SigmaSpec::AffineClamped { intercept: 1.0, slope: -0.7, lo: 0.3, hi: 1.7 },
                SigmaSpec::Table { knots: vec![(-2.0, 0.5), (0.0, 1.5), (1.0, 1.2), (4.0, 0.8)] },
            ];
            for spec in specs {
                let s = SigmaFunction::new(spec).unwrap();
                let (x, y) = (s.eval(a), s.eval(b));
                prop_assert!(x >= s.lo() && x <= s.up());
                prop_assert!((x - y).abs() <= s.lipschitz() * (a - b).abs() * (1.0 + 1e-12) + 1e-15);
            }
        }
    }

    #[test]
    fn config_validation() {
        let cfg = SolverConfig::for_time(1.0, 20);
        assert!(cfg.validate(Some(1.0)).is_ok());
        assert!(cfg.validate(Some(1.1)).is_err());
        assert!(SolverConfig { steps: 0, ..cfg.clone() }.validate(None).is_err());
        let parsed: SolverConfig = toml::from_str("dt = 0.1\nsteps = 10\n").unwrap();
        assert!(parsed.clamp_negative_kernel && parsed.normalize_rows);
        assert!(toml::from_str::<SolverConfig>("dt = 0.1\nsteps = 10\ntypo = 1\n").is_err());
    }

    #[test]
    fn flow_preserves_constants_and_equilibrates() {
        let g = Arc::new(build_grid(2.0, 2).unwrap());
        let cfg = SolverConfig::default();
        let u = FieldState::constant(Arc::clone(&g), 3.0);
        let out = deterministic_flow(&u, 0.3, &cfg).unwrap();
        assert!(out.values.iter().all(|v| (v - 3.0).abs() < 1e-12));
        // Raw K·diag(w) preserves constants up to the row defect.
        let raw = SolverConfig { clamp_negative_kernel: false, normalize_rows: false, ..cfg.clone() };
        let d = kernel_matrix(&g, 0.3, 1e-12).unwrap().row_defect();
        let out = deterministic_flow(&u, 0.3, &raw).unwrap();
        assert!(out.values.iter().all(|v| (v - 3.0).abs() <= 3.0 * d + 1e-12));
        // Large t/R²: any datum relaxes to its weighted mean.
        let vals: Vec<f64> = g.nodes().iter().map(|p| p.colatitude().cos() + 2.0 * p.longitude().sin()).collect();
        let mean = vals.iter().zip(g.weights()).map(|(v, w)| v * w).sum::<f64>() / g.weights().iter().sum::<f64>();
        let out = deterministic_flow(&FieldState::new(Arc::clone(&g), 0.0, vals).unwrap(), 200.0, &raw).unwrap();
        assert!(out.values.iter().all(|v| (v - mean).abs() < 1e-9));
    }

    #[test]
    fn flow_of_point_mass_is_a_kernel_row() {
        let g = Arc::new(build_grid(1.0, 1).unwrap());
        let raw = SolverConfig { clamp_negative_kernel: false, normalize_rows: false, ..SolverConfig::default() };
        let i = g.ring_index(1, 3);
        let mut v = vec![0.0; g.len()];
        v[i] = 1.0;
        let out = deterministic_flow(&FieldState::new(Arc::clone(&g), 0.0, v).unwrap(), 0.2, &raw).unwrap();
        let km = kernel_matrix(&g, 0.2, 1e-12).unwrap();
        for j in 0..g.len() {
            assert_relative_eq!(out.values[j], km.entry(j, i) * g.weights()[i], max_relative = 1e-12, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_sigma_reduces_to_flow() {
        let (g, p, f) = setup(2, E * E, 0.05, askey(), Baseline::Zero);
        let sim = Simulator::new(p, f, SigmaFunction::constant(0.0).unwrap()).unwrap();
        let vals: Vec<f64> = g.nodes().iter().map(|q| q.colatitude().sin()).collect();
        let u0 = FieldState::new(Arc::clone(&g), 0.0, vals).unwrap();
        let cfg = SolverConfig::for_time(0.5, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (out, traj) = simulate(&u0, 0.5, &cfg, &sim, &mut rng).unwrap();
        assert_eq!(traj.len(), 10);
        let mut expect = u0.values.clone();
        let mut ws = Workspace::for_grid(&g);
        let mut tmp = vec![0.0; g.len()];
        for _ in 0..10 {
            sim.propagator.apply(&expect, &mut tmp, &mut ws);
            expect.copy_from_slice(&tmp);
        }
        for (a, b) in out.values.iter().zip(&expect) {
            assert_eq!(a, b);
        }
        // A constant datum stays put.
        let (out, _) = simulate(&FieldState::constant(Arc::clone(&g), 2.5), 0.5, &cfg, &sim, &mut rng).unwrap();
        assert!(out.values.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn constant_noise_gives_brownian_field() {
        let (g, p, f) = setup(1, E * E, 0.1, KernelFamily::Constant { h0: 1.0 }, Baseline::LowerBound);
        let sim = Simulator::new(p, Arc::clone(&f), SigmaFunction::constant(2.0).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = sim.scratch();
        let out = sim.run_final(&vec![0.0; g.len()], 10, &mut rng, &mut s).unwrap();
        // Same stream: the Brownian path is the sum of the rank-1 increments.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = 0.0;
        for _ in 0..10 {
            b += crate::noise::sample_increments(&f, 0.1, &mut rng).unwrap()[0];
        }
        for v in &out {
            assert_relative_eq!(*v, 2.0 * b, max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn mean_follows_heat_flow() {
        let (g, p, f) = setup(1, E * E, 0.1, KernelFamily::ExponentialGeodesic { kappa: 2.0 }, Baseline::LowerBound);
        let sim = Simulator::new(Arc::clone(&p), f, SigmaFunction::constant(1.0).unwrap()).unwrap();
        let vals: Vec<f64> = g.nodes().iter().map(|q| 3.0 * q.colatitude().cos()).collect();
        let reps = 10_000;
        let mut s = sim.scratch();
        let mut sum = vec![0.0; g.len()];
        let mut sq = vec![0.0; g.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..reps {
            let u = sim.run_final(&vals, 5, &mut rng, &mut s).unwrap();
            for i in 0..g.len() {
                sum[i] += u[i];
                sq[i] += u[i] * u[i];
            }
        }
        let mut expect = vals.clone();
        let mut ws = Workspace::for_grid(&g);
        let mut tmp = vec![0.0; g.len()];
        for _ in 0..5 {
            p.apply(&expect, &mut tmp, &mut ws);
            expect.copy_from_slice(&tmp);
        }
        let r = reps as f64;
        for i in 0..g.len() {
            let m = sum[i] / r;
            let se = ((sq[i] / r - m * m) / r).sqrt();
            assert!((m - expect[i]).abs() <= 4.0 * se, "node {i}: {m} vs {}", expect[i]);
        }
    }

    #[test]
    fn picard_fixed_point_for_constant_sigma() {
        let (g, p, f) = setup(1, E * E, 0.1, askey(), Baseline::Zero);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = NoiseRealization::sample(&f, 0.1, 5, &mut rng);
        let u0 = FieldState::constant(Arc::clone(&g), 0.0);
        let sigma = SigmaFunction::constant(1.0).unwrap();
        let res = picard_solve(&u0, &p, &sigma, &noise, 10, 1.0).unwrap();
        // u^{(1)} = u^{(2)} exactly: the second difference is zero.
        assert_eq!(res.fixed_point_at, Some(2));
        assert_eq!(res.differences[1], 0.0);
        // And u^{(1)} is the stepped solution driven by the same increments.
        let sim = Simulator::new(Arc::clone(&p), f, sigma).unwrap();
        let mut s = sim.scratch();
        let mut u = vec![0.0; g.len()];
        for (m, dw) in noise.increments.iter().enumerate() {
            s.inc.copy_from_slice(dw);
            sim.step_with_increment(&mut u, m, &mut s).unwrap();
        }
        assert_eq!(u, res.field.values);
    }

    #[test]
    fn picard_contracts_for_lipschitz_sigma() {
        let (g, p, f) = setup(2, E * E, 0.05, askey(), Baseline::Zero);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let noise = NoiseRealization::sample(&f, 0.05, 20, &mut rng);
        let u0 = FieldState::constant(Arc::clone(&g), 0.0);
        let sigma = SigmaFunction::new(SigmaSpec::AffineClamped { intercept: 1.0, slope: 0.5, lo: 0.5, hi: 1.5 }).unwrap();
        let alpha = picard_alpha(0.5, 1.0, 2.0);
        let res = picard_solve(&u0, &p, &sigma, &noise, 40, alpha).unwrap();
        assert!(res.fixed_point_at.is_some(), "{:?}", res.differences);
        let bound = contraction_bound(0.5, 1.0, 2.0, alpha);
        assert_relative_eq!(bound, 0.5);
        assert!(res.ratios.iter().take(5).any(|&r| r < bound), "{:?}", res.ratios);
        // Stepping with the converged iterate's left-endpoint σ reproduces it.
        let sim = Simulator::new(Arc::clone(&p), f, sigma).unwrap();
        let mut s = sim.scratch();
        let mut u = vec![0.0; g.len()];
        for (m, dw) in noise.increments.iter().enumerate() {
            s.inc.copy_from_slice(dw);
            sim.step_with_increment(&mut u, m, &mut s).unwrap();
        }
        let diff = u.iter().zip(&res.field.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-11, "{diff}");
    }

    #[test]
    fn truncated_process_limits() {
        let r = E * E;
        let (g, p, f) = setup(2, r, 0.1, askey(), Baseline::Zero);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise = NoiseRealization::sample(&f, 0.1, 5, &mut rng);
        let vals: Vec<f64> = g.nodes().iter().map(|q| q.colatitude().cos()).collect();
        let u0 = FieldState::new(Arc::clone(&g), 0.0, vals).unwrap();
        let sigma = SigmaFunction::new(SigmaSpec::AffineClamped { intercept: 1.0, slope: 0.4, lo: 0.5, hi: 1.5 }).unwrap();
        let center = g.nodes()[g.ring_index(5, 7)];
        let t = 0.5;

        // Ball = sphere: Picard value at the center.
        let beta_full = (PI * r).powi(2) / t;
        let full = TruncatedSolver::new(Arc::clone(&p), 5, beta_full, t).unwrap();
        let spec = TruncatedProcessSpec { beta: beta_full, picard_n: 3, center, time: t };
        let v = truncated_process(&spec, &full, &u0, &sigma, &noise).unwrap();
        let pic = picard_solve(&u0, &p, &sigma, &noise, 3, 1.0).unwrap();
        let i = g.nearest_node(&center).unwrap();
        assert_relative_eq!(v, pic.field.values[i], max_relative = 1e-12);

        // σ ≡ 0: deterministic flow at the center.
        let zero = SigmaFunction::constant(0.0).unwrap();
        let small = TruncatedSolver::new(Arc::clone(&p), 5, 0.5, t).unwrap();
        let spec = TruncatedProcessSpec { beta: 0.5, picard_n: 2, center, time: t };
        let v = truncated_process(&spec, &small, &u0, &zero, &noise).unwrap();
        let mut expect = u0.values.clone();
        let mut ws = Workspace::for_grid(&g);
        let mut tmp = vec![0.0; g.len()];
        for _ in 0..5 {
            p.apply(&expect, &mut tmp, &mut ws);
            expect.copy_from_slice(&tmp);
        }
        assert_relative_eq!(v, expect[i], max_relative = 1e-12);

        // A ball too large for the sphere is rejected; a tiny ball off-node is empty.
        assert!(TruncatedSolver::new(Arc::clone(&p), 5, 2.0 * beta_full, t).is_err());
        let tiny = TruncatedSolver::new(Arc::clone(&p), 5, 1e-8, t).unwrap();
        let off = center.travel(0.05, 0.3);
        let spec = TruncatedProcessSpec { beta: 1e-8, picard_n: 1, center: off, time: t };
        assert!(truncated_process(&spec, &tiny, &u0, &sigma, &noise).is_err());
    }

    #[test]
    fn non_finite_state_aborts() {
        let (g, p, f) = setup(1, E * E, 0.1, askey(), Baseline::Zero);
        let sim = Simulator::new(p, f, SigmaFunction::constant(1.0).unwrap()).unwrap();
        let mut s = sim.scratch();
        let mut u = vec![0.0; g.len()];
        u[3] = f64::NAN;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(sim.mild_step(&mut u, &mut rng, &mut s, 7), Err(Error::NonFinite { step: 7, .. })));
    }
}
