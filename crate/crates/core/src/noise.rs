//! Spatial covariance kernels h_R, their factorization on lattices, and
//! white-in-time noise increments.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::{geodesic_angle, SphereGrid, SpherePoint};
use crate::ring::RingOperator;

/// Exponents of the bounds h_lo(R) = (log R)^{C_lo/2}, h_up(R) = (log R)^{C_up/2}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConstants {
    pub c_h_lo: f64,
    pub c_h_up: f64,
}

/// −2 < C_up < 2 and C_up/2 − 1 < C_lo ≤ C_up.
pub fn validate_constants(c: NoiseConstants) -> bool {
    c.c_h_up > -2.0 && c.c_h_up < 2.0 && c.c_h_lo > c.c_h_up / 2.0 - 1.0 && c.c_h_lo <= c.c_h_up
}

pub const CONSTANTS_WINDOW: &str = "-2 < C_h_up < 2 and C_h_up/2 - 1 < C_h_lo <= C_h_up";

impl NoiseConstants {
    pub fn new(c_h_lo: f64, c_h_up: f64) -> Self {
        Self { c_h_lo, c_h_up }
    }

    pub fn h_lo(&self, radius: f64) -> f64 {
        radius.ln().powf(self.c_h_lo / 2.0)
    }

    pub fn h_up(&self, radius: f64) -> f64 {
        radius.ln().powf(self.c_h_up / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelFamily {
    Constant { h0: f64 },
    ExponentialGeodesic { kappa: f64 },
    TruncatedLinear { theta_c: f64 },
    /// Truncated power (1 − θ/θ_c)_+^exponent.
    Askey { theta_c: f64, exponent: f64 },
    /// Piecewise-linear h(θ) through (θ, h) knots, constant beyond the ends.
    Table { knots: Vec<(f64, f64)> },
}

/// Value the shape interpolates down to far from the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// h_lo(R): the kernel stays inside [h_lo, h_up].
    #[default]
    LowerBound,
    /// 0: compactly supported kernel, below h_lo away from the diagonal.
    Zero,
}

#[derive(Debug, Clone)]
pub struct CovarianceKernel {
    family: KernelFamily,
    constants: NoiseConstants,
    radius: f64,
    baseline: Baseline,
    h_lo: f64,
    h_up: f64,
}

impl CovarianceKernel {
    pub fn new(family: KernelFamily, constants: NoiseConstants, radius: f64, baseline: Baseline) -> Result<Self> {
        if !validate_constants(constants) {
            return domain(format!(
                "noise constants (C_h_lo = {}, C_h_up = {}) violate {CONSTANTS_WINDOW}",
                constants.c_h_lo, constants.c_h_up
            ));
        }
        if !(radius > 1.0) {
            return domain(format!("covariance kernels need R > 1 so that log R > 0, got {radius}"));
        }
        let (h_lo, h_up) = (constants.h_lo(radius), constants.h_up(radius));
        let out_of_bounds = |detail: String| Err(Error::KernelOutOfBounds { lo: h_lo, hi: h_up, detail });
        let tol = 1e-12 * h_up;
        match &family {
            KernelFamily::Constant { h0 } => {
                if !(*h0 >= h_lo - tol && *h0 <= h_up + tol) {
                    return out_of_bounds(format!("constant h0 = {h0}"));
                }
            }
            KernelFamily::ExponentialGeodesic { kappa } => {
                if !(*kappa >= 0.0 && kappa.is_finite()) {
                    return domain(format!("kappa must be >= 0, got {kappa}"));
                }
            }
            KernelFamily::TruncatedLinear { theta_c } => {
                if !(*theta_c > 0.0 && *theta_c <= PI) {
                    return domain(format!("theta_c must lie in (0, pi], got {theta_c}"));
                }
            }
            KernelFamily::Askey { theta_c, exponent } => {
                if !(*theta_c > 0.0 && *theta_c <= PI) {
                    return domain(format!("theta_c must lie in (0, pi], got {theta_c}"));
                }
                if !(*exponent >= 1.5) {
                    return domain(format!("Askey exponent must be >= 1.5, got {exponent}"));
                }
            }
            KernelFamily::Table { knots } => {
                if knots.is_empty() {
                    return domain("table kernel needs at least one knot");
                }
                for w in knots.windows(2) {
                    if !(w[1].0 > w[0].0) {
                        return domain("table knots must have strictly increasing angles");
                    }
                }
                for &(th, h) in knots {
                    if !(0.0..=PI).contains(&th) {
                        return domain(format!("table knot angle {th} outside [0, pi]"));
                    }
                    if !(h >= h_lo - tol && h <= h_up + tol) {
                        return out_of_bounds(format!("table value {h} at angle {th}"));
                    }
                }
                if baseline == Baseline::Zero {
                    return domain("the zero baseline applies to shaped families, not tables");
                }
            }
        }
        if baseline == Baseline::Zero && matches!(family, KernelFamily::Constant { .. }) {
            return domain("the zero baseline applies to shaped families, not constants");
        }
        Ok(Self { family, constants, radius, baseline, h_lo, h_up })
    }

    pub fn family(&self) -> &KernelFamily {
        &self.family
    }

    pub fn constants(&self) -> NoiseConstants {
        self.constants
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn baseline(&self) -> Baseline {
        self.baseline
    }

    pub fn h_lo(&self) -> f64 {
        self.h_lo
    }

    pub fn h_up(&self) -> f64 {
        self.h_up
    }

    /// Infimum of h over the sphere: h_lo, or 0 for the zero baseline.
    pub fn floor(&self) -> f64 {
        match self.baseline {
            Baseline::LowerBound => self.h_lo,
            Baseline::Zero => 0.0,
        }
    }

    /// Angular radius beyond which h vanishes, if any.
    pub fn support_angle(&self) -> Option<f64> {
        if self.baseline != Baseline::Zero {
            return None;
        }
        match self.family {
            KernelFamily::TruncatedLinear { theta_c } | KernelFamily::Askey { theta_c, .. } => Some(theta_c),
            _ => None,
        }
    }

    /// True when h is the same for every pair of points.
    pub fn is_constant(&self) -> bool {
        match &self.family {
            KernelFamily::Constant { .. } => true,
            KernelFamily::Table { knots } => knots.iter().all(|k| k.1 == knots[0].1),
            KernelFamily::ExponentialGeodesic { kappa } if *kappa == 0.0 => true,
            _ => self.baseline == Baseline::LowerBound && self.h_lo == self.h_up,
        }
    }

    /// h as a function of the angle between the two points.
    pub fn eval_angle(&self, theta: f64) -> f64 {
        let base = self.floor();
        let span = self.h_up - base;
        match &self.family {
            KernelFamily::Constant { h0 } => *h0,
            KernelFamily::ExponentialGeodesic { kappa } => base + span * (-kappa * theta).exp(),
            KernelFamily::TruncatedLinear { theta_c } => base + span * (1.0 - theta / theta_c).max(0.0),
            KernelFamily::Askey { theta_c, exponent } => base + span * (1.0 - theta / theta_c).max(0.0).powf(*exponent),
            KernelFamily::Table { knots } => interpolate(knots, theta),
        }
    }
}

fn interpolate(knots: &[(f64, f64)], x: f64) -> f64 {
    if x <= knots[0].0 {
        return knots[0].1;
    }
    for w in knots.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x <= x1 {
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        }
    }
    knots[knots.len() - 1].1
}

/// h_R(x, y).
pub fn hr_eval(kernel: &CovarianceKernel, x: &SpherePoint, y: &SpherePoint) -> Result<f64> {
    if (x.radius() - kernel.radius).abs() > 1e-12 * kernel.radius {
        return Err(Error::RadiusMismatch(x.radius(), kernel.radius));
    }
    Ok(kernel.eval_angle(geodesic_angle(x, y)?))
}

/// Eigenvalues below −CLIP_WINDOW·λ_max reject the kernel; those in
/// [−CLIP_WINDOW·λ_max, 0) are set to zero.
pub const CLIP_WINDOW: f64 = 1e-8;
/// Eigenvalues at most this multiple of λ_max are dropped from the factor.
const RANK_CUTOFF: f64 = 1e-13;

/// One Fourier block of the factor: `rows × rank`, column-major.
#[derive(Debug, Clone)]
struct FactorBlock {
    rows: usize,
    rank: usize,
    data: Vec<f64>,
}

impl FactorBlock {
    fn apply(&self, z: &[f64], out: &mut [f64]) {
        out[..self.rows].iter_mut().for_each(|x| *x = 0.0);
        for (k, &zk) in z.iter().enumerate().take(self.rank) {
            let col = &self.data[k * self.rows..(k + 1) * self.rows];
            for (o, c) in out.iter_mut().zip(col) {
                *o += c * zk;
            }
        }
    }

    fn gram(&self) -> Vec<f64> {
        let n = self.rows;
        let mut g = vec![0.0; n * n];
        for k in 0..self.rank {
            let col = &self.data[k * n..(k + 1) * n];
            for i in 0..n {
                for j in 0..n {
                    g[i * n + j] += col[i] * col[j];
                }
            }
        }
        g
    }
}

/// A factor F with F·Fᵀ = H for H_ij = h(x_i, x_j), stored blockwise in the
/// real Fourier basis of each ring (see [`crate::ring`]).
#[derive(Clone)]
pub struct NoiseFactor {
    grid: Arc<SphereGrid>,
    covariance: RingOperator,
    block0: FactorBlock,
    modes: Vec<FactorBlock>,
    lambda_max: f64,
    lambda_min: f64,
    clip_magnitude: f64,
    reconstruction_error: f64,
    inv: Arc<dyn Fft<f64>>,
}

fn eigen_factor(
    matrix: Vec<f64>,
    n: usize,
    eigenvalues: &mut Vec<f64>,
) -> (Vec<f64>, Vec<f64>) {
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut m = DMatrix::from_row_slice(n, n, &matrix);
    // Remove rounding asymmetry before the symmetric solver.
    let mt = m.transpose();
    m = (m + mt) * 0.5;
    let eig = SymmetricEigen::new(m);
    eigenvalues.extend(eig.eigenvalues.iter().copied());
    (eig.eigenvalues.as_slice().to_vec(), eig.eigenvectors.as_slice().to_vec())
}

/// Eigendecomposes H blockwise, clips small negative eigenvalues and keeps
/// F = U·√Λ for the positive part.
pub fn build_factor(grid: &Arc<SphereGrid>, kernel: &CovarianceKernel) -> Result<NoiseFactor> {
    if (grid.radius() - kernel.radius()).abs() > 1e-12 * kernel.radius() {
        return Err(Error::RadiusMismatch(grid.radius(), kernel.radius()));
    }
    let h = RingOperator::from_angle_fn(grid, |theta| kernel.eval_angle(theta));
    factor_operator(grid, h)
}

pub(crate) fn factor_operator(grid: &Arc<SphereGrid>, h: RingOperator) -> Result<NoiseFactor> {
    let (r, m) = (grid.rings(), grid.per_ring());
    let half = m / 2;
    let n0 = r + 2;
    let sqrt_m = (m as f64).sqrt();
    // Orthonormal m = 0 basis: ring averages scaled by 1/√M, pole indicators.
    let s = |i: usize| if i < r { 1.0 / sqrt_m } else { 1.0 };
    let b0 = h.block0();
    let g0: Vec<f64> = (0..n0 * n0).map(|k| s(k / n0) * b0[k] / s(k % n0)).collect();

    let mut all = Vec::new();
    let mut decomps = Vec::with_capacity(half + 1);
    decomps.push(eigen_factor(g0, n0, &mut all));
    for k in 1..=half {
        decomps.push(eigen_factor(h.mode_block(k).to_vec(), r, &mut all));
    }
    let lambda_max = all.iter().copied().fold(0.0f64, f64::max);
    let lambda_min = all.iter().copied().fold(f64::INFINITY, f64::min);
    if lambda_min < -CLIP_WINDOW * lambda_max {
        return Err(Error::NotPositiveSemidefinite { eigenvalue: lambda_min, lambda_max });
    }
    let clip_magnitude = if lambda_min < 0.0 { -lambda_min } else { 0.0 };

    let keep = |vals: &[f64], vecs: &[f64], rows: usize| -> FactorBlock {
        let mut data = Vec::new();
        let mut rank = 0;
        for (k, &lam) in vals.iter().enumerate() {
            if lam > RANK_CUTOFF * lambda_max {
                let sq = lam.sqrt();
                data.extend(vecs[k * rows..(k + 1) * rows].iter().map(|x| x * sq));
                rank += 1;
            }
        }
        FactorBlock { rows, rank, data }
    };
    let block0 = keep(&decomps[0].0, &decomps[0].1, n0);
    let modes: Vec<FactorBlock> = decomps[1..].iter().map(|(v, u)| keep(v, u, r)).collect();

    // Reconstruction FFᵀ in physical form.
    let g = block0.gram();
    let rb0: Vec<f64> = (0..n0 * n0).map(|k| g[k] * s(k % n0) / s(k / n0)).collect();
    let mut rmodes = Vec::with_capacity(half * r * r);
    for blk in &modes {
        rmodes.extend(blk.gram());
    }
    let recon = RingOperator::from_spectral(r, m, rb0, rmodes);
    let hmax = h.max_abs_entry();
    let reconstruction_error = if hmax > 0.0 { recon.max_abs_diff(&h) / hmax } else { 0.0 };

    let inv = FftPlanner::new().plan_fft_inverse(m);
    Ok(NoiseFactor {
        grid: Arc::clone(grid),
        covariance: h,
        block0,
        modes,
        lambda_max,
        lambda_min,
        clip_magnitude,
        reconstruction_error,
        inv,
    })
}

impl std::fmt::Debug for NoiseFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NoiseFactor")
            .field("nodes", &self.grid.len())
            .field("rank", &self.rank())
            .field("lambda_max", &self.lambda_max)
            .field("clip_magnitude", &self.clip_magnitude)
            .field("reconstruction_error", &self.reconstruction_error)
            .finish()
    }
}

/// Scratch buffers for [`NoiseFactor::sample_into`].
#[derive(Debug, Clone)]
pub struct NoiseWorkspace {
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
    z: Vec<f64>,
    c: Vec<f64>,
    s: Vec<f64>,
}

impl NoiseFactor {
    pub fn grid(&self) -> &Arc<SphereGrid> {
        &self.grid
    }

    pub fn covariance(&self) -> &RingOperator {
        &self.covariance
    }

    pub fn clip_magnitude(&self) -> f64 {
        self.clip_magnitude
    }

    /// max |FFᵀ − H| / max |H|.
    pub fn reconstruction_error(&self) -> f64 {
        self.reconstruction_error
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    /// Total number of standard normals consumed per draw.
    pub fn rank(&self) -> usize {
        let half = self.grid.per_ring() / 2;
        self.block0.rank
            + self
                .modes
                .iter()
                .enumerate()
                .map(|(k, b)| if k + 1 == half { b.rank } else { 2 * b.rank })
                .sum::<usize>()
    }

    pub fn workspace(&self) -> NoiseWorkspace {
        let (r, m) = (self.grid.rings(), self.grid.per_ring());
        NoiseWorkspace {
            buf: vec![Complex::new(0.0, 0.0); r * m],
            scratch: vec![Complex::new(0.0, 0.0); self.inv.get_inplace_scratch_len()],
            z: vec![0.0; r + 2],
            c: vec![0.0; r + 2],
            s: vec![0.0; r + 2],
        }
    }

    /// Writes F·z·√dt into `out` with z drawn from `rng`, block by block in
    /// a fixed order (wavenumber 0, then cosine and sine parts of m = 1, …).
    pub fn sample_into<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R, out: &mut [f64], ws: &mut NoiseWorkspace) {
        let (r, m) = (self.grid.rings(), self.grid.per_ring());
        let half = m / 2;
        let n = self.grid.len();
        assert_eq!(out.len(), n);
        let sdt = dt.sqrt();
        let sqrt_m = (m as f64).sqrt();
        let sqrt_half_m = (0.5 * m as f64).sqrt();
        let NoiseWorkspace { buf, scratch, z, c, s } = ws;
        buf.iter_mut().for_each(|x| *x = Complex::new(0.0, 0.0));

        let fill = |z: &mut [f64], rank: usize, rng: &mut R| {
            for x in z.iter_mut().take(rank) {
                *x = StandardNormal.sample(rng);
            }
        };

        fill(z, self.block0.rank, rng);
        self.block0.apply(z, c);
        for a in 0..r {
            buf[a * m] = Complex::new(sqrt_m * c[a], 0.0);
        }
        out[0] = c[r] * sdt;
        out[n - 1] = c[r + 1] * sdt;

        for (k, blk) in self.modes.iter().enumerate() {
            let wn = k + 1;
            if blk.rank == 0 {
                continue;
            }
            fill(z, blk.rank, rng);
            blk.apply(z, c);
            if wn == half {
                for a in 0..r {
                    buf[a * m + wn] = Complex::new(sqrt_m * c[a], 0.0);
                }
            } else {
                fill(z, blk.rank, rng);
                blk.apply(z, s);
                for a in 0..r {
                    let x = Complex::new(sqrt_half_m * c[a], -sqrt_half_m * s[a]);
                    buf[a * m + wn] = x;
                    buf[a * m + m - wn] = x.conj();
                }
            }
        }
        if r > 0 {
            self.inv.process_with_scratch(buf, scratch);
        }
        let scale = sdt / m as f64;
        for (o, b) in out[1..n - 1].iter_mut().zip(buf.iter()) {
            *o = b.re * scale;
        }
    }
}

/// One increment vector ΔW with Cov(ΔW_i, ΔW_j) = h(x_i, x_j)·dt.
pub fn sample_increments<R: Rng + ?Sized>(factor: &NoiseFactor, dt: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return domain(format!("increment length must be positive, got {dt}"));
    }
    let mut out = vec![0.0; factor.grid.len()];
    let mut ws = factor.workspace();
    factor.sample_into(dt, rng, &mut out, &mut ws);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_grid;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn e(x: f64) -> f64 {
        x.exp()
    }

    #[test]
    fn constants_window() {
        assert!(validate_constants(NoiseConstants::new(0.0, 0.0)));
        assert!(!validate_constants(NoiseConstants::new(-1.0, 2.0)));
        assert!(!validate_constants(NoiseConstants::new(1.0 / 2.0 - 1.0, 1.0)));
        assert!(validate_constants(NoiseConstants::new(1.0 / 2.0 - 1.0 + 1e-9, 1.0)));
        assert!(validate_constants(NoiseConstants::new(1.0, 1.0)));
        assert!(!validate_constants(NoiseConstants::new(1.1, 1.0)));
        assert!(!validate_constants(NoiseConstants::new(-2.5, -2.0)));
    }

    #[test]
    fn family_examples() {
        let c = NoiseConstants::new(-0.25, 1.0);
        let r = e(3.0);
        let x = SpherePoint::new(1.0, 2.0, r).unwrap();
        let k = CovarianceKernel::new(KernelFamily::Constant { h0: 1.0 }, c, r, Baseline::LowerBound).unwrap();
        assert_eq!(hr_eval(&k, &x, &x).unwrap(), 1.0);
        let k = CovarianceKernel::new(KernelFamily::ExponentialGeodesic { kappa: 2.0 }, c, r, Baseline::LowerBound).unwrap();
        assert_relative_eq!(hr_eval(&k, &x, &x).unwrap(), 3f64.sqrt());
        let k = CovarianceKernel::new(KernelFamily::TruncatedLinear { theta_c: 0.3 }, c, r, Baseline::LowerBound).unwrap();
        let y = x.travel(0.5, 1.0);
        assert_relative_eq!(hr_eval(&k, &x, &y).unwrap(), 3f64.powf(-0.125));
        // h0 outside the bounds is a construction error.
        assert!(matches!(
            CovarianceKernel::new(KernelFamily::Constant { h0: 5.0 }, c, r, Baseline::LowerBound),
            Err(Error::KernelOutOfBounds { .. })
        ));
        assert!(CovarianceKernel::new(KernelFamily::TruncatedLinear { theta_c: 4.0 }, c, r, Baseline::LowerBound).is_err());
        assert!(CovarianceKernel::new(KernelFamily::Constant { h0: 1.0 }, c, 0.5, Baseline::LowerBound).is_err());
    }

    #[test]
    fn bound_sandwich_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = e(4.0);
        let c = NoiseConstants::new(-0.3, 0.8);
        let fams = [
            KernelFamily::ExponentialGeodesic { kappa: 3.0 },
            KernelFamily::TruncatedLinear { theta_c: 0.4 },
            KernelFamily::Askey { theta_c: 0.4, exponent: 2.0 },
            KernelFamily::Table { knots: vec![(0.0, 1.5), (1.0, 1.2), (PI, c.h_lo(r))] },
        ];
        for f in fams {
            let k = CovarianceKernel::new(f, c, r, Baseline::LowerBound).unwrap();
            for _ in 0..10_000 {
                let p = SpherePoint::new(rng.random_range(0.0..PI), rng.random_range(0.0..6.3), r).unwrap();
                let q = SpherePoint::new(rng.random_range(0.0..PI), rng.random_range(0.0..6.3), r).unwrap();
                let h = hr_eval(&k, &p, &q).unwrap();
                assert!(h >= k.h_lo() && h <= k.h_up());
                assert_eq!(h.to_bits(), hr_eval(&k, &q, &p).unwrap().to_bits());
            }
        }
    }

    #[test]
    fn constant_kernel_rank_one() {
        let g = Arc::new(build_grid(e(2.0), 2).unwrap());
        let k = CovarianceKernel::new(KernelFamily::Constant { h0: 1.0 }, NoiseConstants::new(0.0, 0.0), e(2.0), Baseline::LowerBound).unwrap();
        let f = build_factor(&g, &k).unwrap();
        assert_eq!(f.rank(), 1);
        assert!(f.reconstruction_error() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = sample_increments(&f, 0.25, &mut rng).unwrap();
        for x in &w {
            assert!((x - w[0]).abs() < 1e-12);
        }
    }

    /// Eigenvalues of the blocks, with the multiplicities of the real Fourier
    /// basis, against a dense eigensolver on H.
    #[test]
    fn block_spectrum_matches_dense() {
        let r = e(2.0);
        let g = Arc::new(build_grid(r, 2).unwrap());
        let k = CovarianceKernel::new(
            KernelFamily::ExponentialGeodesic { kappa: 2.0 },
            NoiseConstants::new(-0.5, 0.5),
            r,
            Baseline::LowerBound,
        )
        .unwrap();
        let f = build_factor(&g, &k).unwrap();
        assert!(f.reconstruction_error() < 1e-8);
        let n = g.len();
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                dense[(i, j)] = hr_eval(&k, &g.nodes()[i], &g.nodes()[j]).unwrap();
            }
        }
        let mut ev: Vec<f64> = SymmetricEigen::new(dense).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert!(ev[0] >= -1e-10 * ev[n - 1]);
        assert_relative_eq!(ev[n - 1], f.lambda_max(), max_relative = 1e-10);
        assert!((ev[0] - f.lambda_min()).abs() < 1e-10 * ev[n - 1]);
    }

    #[test]
    fn tent_kernel_rejected_askey_accepted() {
        let r = e(2.0);
        let g = Arc::new(build_grid(r, 2).unwrap());
        let c = NoiseConstants::new(0.0, 0.0);
        let tent = CovarianceKernel::new(KernelFamily::TruncatedLinear { theta_c: PI / 8.0 }, c, r, Baseline::Zero).unwrap();
        assert!(matches!(build_factor(&g, &tent), Err(Error::NotPositiveSemidefinite { .. })));
        let askey = CovarianceKernel::new(KernelFamily::Askey { theta_c: PI / 8.0, exponent: 2.0 }, c, r, Baseline::Zero).unwrap();
        let f = build_factor(&g, &askey).unwrap();
        assert!(f.reconstruction_error() < 1e-8);
    }

    #[test]
    fn indefinite_table_rejected() {
        // h_lo = 1, h_up = 2 at R = e⁴ with C = (0, 1); on the two-pole grid H = [[1,2],[2,1]].
        let r = e(4.0);
        let k = CovarianceKernel::new(
            KernelFamily::Table { knots: vec![(0.0, 1.0), (PI, 2.0)] },
            NoiseConstants::new(0.0, 1.0),
            r,
            Baseline::LowerBound,
        )
        .unwrap();
        let g = Arc::new(build_grid(r, 0).unwrap());
        match build_factor(&g, &k) {
            Err(Error::NotPositiveSemidefinite { eigenvalue, .. }) => assert_relative_eq!(eigenvalue, -1.0, epsilon = 1e-12),
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn empirical_covariance() {
        let r = e(2.0);
        let g = Arc::new(build_grid(r, 1).unwrap());
        let k = CovarianceKernel::new(
            KernelFamily::ExponentialGeodesic { kappa: 1.5 },
            NoiseConstants::new(-0.5, 0.5),
            r,
            Baseline::LowerBound,
        )
        .unwrap();
        let f = build_factor(&g, &k).unwrap();
        let n = g.len();
        let draws = 100_000;
        let dt = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ws = f.workspace();
        let mut x = vec![0.0; n];
        let mut s1 = vec![0.0; n];
        let mut s2 = vec![0.0; n * n];
        let mut s4 = vec![0.0; n * n];
        let (mut m3, mut m4) = (0.0, 0.0);
        for _ in 0..draws {
            f.sample_into(dt, &mut rng, &mut x, &mut ws);
            for i in 0..n {
                s1[i] += x[i];
                for j in 0..n {
                    let p = x[i] * x[j];
                    s2[i * n + j] += p;
                    s4[i * n + j] += p * p;
                }
            }
            let z = x[7] / (k.h_up() * dt).sqrt();
            m3 += z.powi(3);
            m4 += z.powi(4);
        }
        let d = draws as f64;
        for i in 0..n {
            for j in 0..n {
                let mean = s2[i * n + j] / d;
                let var = s4[i * n + j] / d - mean * mean;
                let se = (var / d).sqrt();
                let expect = dt * hr_eval(&k, &g.nodes()[i], &g.nodes()[j]).unwrap();
                assert!((mean - expect).abs() <= 4.0 * se, "({i},{j}) {mean} vs {expect} ± {se}");
            }
        }
        // Gaussianity of one coordinate: skewness and excess kurtosis within 5σ.
        let skew = m3 / d;
        let kurt = m4 / d - 3.0;
        assert!(skew.abs() < 5.0 * (6.0 / d).sqrt());
        assert!(kurt.abs() < 5.0 * (24.0 / d).sqrt());
    }

    #[test]
    fn increments_shrink_with_dt() {
        let r = e(2.0);
        let g = Arc::new(build_grid(r, 1).unwrap());
        let k = CovarianceKernel::new(KernelFamily::ExponentialGeodesic { kappa: 1.0 }, NoiseConstants::new(0.0, 0.0), r, Baseline::LowerBound).unwrap();
        let f = build_factor(&g, &k).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let big = sample_increments(&f, 1.0, &mut a).unwrap();
        let small = sample_increments(&f, 1e-6, &mut b).unwrap();
        for (x, y) in big.iter().zip(&small) {
            assert_relative_eq!(*y, x * 1e-3, max_relative = 1e-12, epsilon = 1e-300);
        }
        assert!(sample_increments(&f, 0.0, &mut a).is_err());
    }

    proptest! {
        #[test]
        fn window_matches_definition(lo in -3.0f64..3.0, up in -3.0f64..3.0) {
            let ok = validate_constants(NoiseConstants::new(lo, up));
            prop_assert_eq!(ok, -2.0 < up && up < 2.0 && up / 2.0 - 1.0 < lo && lo <= up);
        }
    }
}
