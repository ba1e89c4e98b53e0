//! Linear operators on lattice functions that commute with longitude
//! rotation by 2π/4^{n+1}.
//!
//! Every isotropic kernel matrix on G_{R,n} has this symmetry, as do its
//! products with ring-constant diagonal matrices (weights, row scalings).
//! Such an operator is stored once in physical form (entries as a function
//! of the ring pair and the longitude lag) and once in Fourier form (one
//! real block per longitude wavenumber m, with the poles attached to the
//! m = 0 block). Application costs one FFT per ring plus small dense
//! block products.

use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::geometry::{angle_between, SphereGrid};

#[derive(Clone)]
pub struct RingOperator {
    rings: usize,
    per_ring: usize,
    /// Entry between ring a (lon j) and ring b (lon j+d), d = 0..=M/2, at
    /// `(a * rings + b) * (M/2 + 1) + d`. Lags are symmetric: d ≡ M − d.
    lags: Vec<f64>,
    /// `ring_to_pole[p][a]`: entry (row = any node of ring a, column = pole p).
    ring_to_pole: [Vec<f64>; 2],
    /// `pole_to_ring[p][a]`: entry (row = pole p, column = any node of ring a).
    pole_to_ring: [Vec<f64>; 2],
    pole_pole: [[f64; 2]; 2],
    /// Wavenumber-0 block on (ring sums, north, south), size (rings+2)².
    block0: Vec<f64>,
    /// Blocks for m = 1..=M/2, each rings², row-major, concatenated.
    modes: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for RingOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RingOperator")
            .field("rings", &self.rings)
            .field("per_ring", &self.per_ring)
            .finish_non_exhaustive()
    }
}

/// Scratch buffers for [`RingOperator::apply`]; one per thread.
#[derive(Debug, Clone)]
pub struct Workspace {
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
    xr: Vec<f64>,
    xi: Vec<f64>,
}

impl Workspace {
    pub fn new(rings: usize, per_ring: usize) -> Self {
        let (fwd, inv) = plans(per_ring);
        let scratch = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        Self {
            buf: vec![Complex::new(0.0, 0.0); rings * per_ring],
            scratch: vec![Complex::new(0.0, 0.0); scratch],
            xr: vec![0.0; rings + 2],
            xi: vec![0.0; rings + 2],
        }
    }

    pub fn for_grid(grid: &SphereGrid) -> Self {
        Self::new(grid.rings(), grid.per_ring())
    }
}

fn plans(per_ring: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(per_ring), planner.plan_fft_inverse(per_ring))
}

enum Node {
    Pole(usize),
    Ring(usize, usize),
}

impl RingOperator {
    fn half(&self) -> usize {
        self.per_ring / 2
    }

    fn lag_index(&self, a: usize, b: usize, d: usize) -> usize {
        (a * self.rings + b) * (self.half() + 1) + d
    }

    pub fn rings(&self) -> usize {
        self.rings
    }

    pub fn per_ring(&self) -> usize {
        self.per_ring
    }

    pub fn len(&self) -> usize {
        self.rings * self.per_ring + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Operator with entries `f(θ)` where θ is the angle between the two
    /// nodes. Kernel evaluations run in parallel over rings.
    pub fn from_angle_fn<F>(grid: &SphereGrid, f: F) -> Self
    where
        F: Fn(f64) -> f64 + Sync,
    {
        use rayon::prelude::*;
        let (rings, per_ring) = (grid.rings(), grid.per_ring());
        let half = per_ring / 2;
        let colat: Vec<f64> = (0..rings).map(|a| grid.ring_colatitude(a)).collect();
        let lag: Vec<f64> = (0..=half).map(|d| 2.0 * std::f64::consts::PI * d as f64 / per_ring as f64).collect();

        let upper: Vec<Vec<f64>> = (0..rings)
            .into_par_iter()
            .map(|a| {
                let mut row = Vec::with_capacity((rings - a) * (half + 1));
                for &cb in &colat[a..] {
                    for &dl in &lag {
                        row.push(f(angle_between(colat[a], cb, dl)));
                    }
                }
                row
            })
            .collect();

        let mut lags = vec![0.0; rings * rings * (half + 1)];
        for (a, row) in upper.iter().enumerate() {
            for (k, chunk) in row.chunks(half + 1).enumerate() {
                let b = a + k;
                let ab = (a * rings + b) * (half + 1);
                let ba = (b * rings + a) * (half + 1);
                lags[ab..ab + half + 1].copy_from_slice(chunk);
                lags[ba..ba + half + 1].copy_from_slice(chunk);
            }
        }
        let north: Vec<f64> = colat.par_iter().map(|&c| f(c)).collect();
        let south: Vec<f64> = colat.par_iter().map(|&c| f(std::f64::consts::PI - c)).collect();
        let (f0, fpi) = (f(0.0), f(std::f64::consts::PI));
        Self::from_physical(
            rings,
            per_ring,
            lags,
            [north.clone(), south.clone()],
            [north, south],
            [[f0, fpi], [fpi, f0]],
        )
    }

    pub fn identity(rings: usize, per_ring: usize) -> Self {
        let half = per_ring / 2;
        let mut lags = vec![0.0; rings * rings * (half + 1)];
        for a in 0..rings {
            lags[(a * rings + a) * (half + 1)] = 1.0;
        }
        Self::from_physical(
            rings,
            per_ring,
            lags,
            [vec![0.0; rings], vec![0.0; rings]],
            [vec![0.0; rings], vec![0.0; rings]],
            [[1.0, 0.0], [0.0, 1.0]],
        )
    }

    fn from_physical(
        rings: usize,
        per_ring: usize,
        lags: Vec<f64>,
        ring_to_pole: [Vec<f64>; 2],
        pole_to_ring: [Vec<f64>; 2],
        pole_pole: [[f64; 2]; 2],
    ) -> Self {
        let (fwd, inv) = plans(per_ring);
        let mut op = Self {
            rings,
            per_ring,
            lags,
            ring_to_pole,
            pole_to_ring,
            pole_pole,
            block0: Vec::new(),
            modes: Vec::new(),
            fwd,
            inv,
        };
        op.refresh_spectral();
        op
    }

    /// Builds an operator from its Fourier blocks.
    pub fn from_spectral(rings: usize, per_ring: usize, block0: Vec<f64>, modes: Vec<f64>) -> Self {
        assert_eq!(block0.len(), (rings + 2) * (rings + 2));
        assert_eq!(modes.len(), per_ring / 2 * rings * rings);
        let (fwd, inv) = plans(per_ring);
        let mut op = Self {
            rings,
            per_ring,
            lags: Vec::new(),
            ring_to_pole: [Vec::new(), Vec::new()],
            pole_to_ring: [Vec::new(), Vec::new()],
            pole_pole: [[0.0; 2]; 2],
            block0,
            modes,
            fwd,
            inv,
        };
        op.refresh_physical();
        op
    }

    fn refresh_spectral(&mut self) {
        let (r, m, half) = (self.rings, self.per_ring, self.half());
        let n0 = r + 2;
        let mut block0 = vec![0.0; n0 * n0];
        let mut modes = vec![0.0; half * r * r];
        let mut seq = vec![Complex::new(0.0, 0.0); m];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fwd.get_inplace_scratch_len()];
        for a in 0..r {
            for b in 0..r {
                let base = self.lag_index(a, b, 0);
                for (d, s) in seq.iter_mut().enumerate() {
                    *s = Complex::new(self.lags[base + d.min(m - d)], 0.0);
                }
                self.fwd.process_with_scratch(&mut seq, &mut scratch);
                block0[a * n0 + b] = seq[0].re;
                for k in 1..=half {
                    modes[(k - 1) * r * r + a * r + b] = seq[k].re;
                }
            }
        }
        for p in 0..2 {
            for a in 0..r {
                block0[a * n0 + r + p] = m as f64 * self.ring_to_pole[p][a];
                block0[(r + p) * n0 + a] = self.pole_to_ring[p][a];
            }
            for q in 0..2 {
                block0[(r + p) * n0 + r + q] = self.pole_pole[p][q];
            }
        }
        self.block0 = block0;
        self.modes = modes;
    }

    fn refresh_physical(&mut self) {
        let (r, m, half) = (self.rings, self.per_ring, self.half());
        let n0 = r + 2;
        let mut lags = vec![0.0; r * r * (half + 1)];
        let mut seq = vec![Complex::new(0.0, 0.0); m];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fwd.get_inplace_scratch_len()];
        let inv_m = 1.0 / m as f64;
        for a in 0..r {
            for b in 0..r {
                for (k, s) in seq.iter_mut().enumerate() {
                    let kk = k.min(m - k);
                    let v = if kk == 0 {
                        self.block0[a * n0 + b]
                    } else {
                        self.modes[(kk - 1) * r * r + a * r + b]
                    };
                    *s = Complex::new(v, 0.0);
                }
                self.fwd.process_with_scratch(&mut seq, &mut scratch);
                let base = (a * r + b) * (half + 1);
                for d in 0..=half {
                    lags[base + d] = seq[d].re * inv_m;
                }
            }
        }
        let mut r2p = [vec![0.0; r], vec![0.0; r]];
        let mut p2r = [vec![0.0; r], vec![0.0; r]];
        let mut pp = [[0.0; 2]; 2];
        for p in 0..2 {
            for a in 0..r {
                r2p[p][a] = self.block0[a * n0 + r + p] * inv_m;
                p2r[p][a] = self.block0[(r + p) * n0 + a];
            }
            for q in 0..2 {
                pp[p][q] = self.block0[(r + p) * n0 + r + q];
            }
        }
        self.lags = lags;
        self.ring_to_pole = r2p;
        self.pole_to_ring = p2r;
        self.pole_pole = pp;
    }

    /// Wavenumber-0 block, row-major (rings+2)², acting on
    /// (Σ_j v_{a,j} for each ring a, v_north, v_south).
    pub fn block0(&self) -> &[f64] {
        &self.block0
    }

    /// Block for wavenumber m ∈ 1..=M/2, row-major rings².
    pub fn mode_block(&self, m: usize) -> &[f64] {
        let rr = self.rings * self.rings;
        &self.modes[(m - 1) * rr..m * rr]
    }

    fn decode(&self, i: usize) -> Node {
        if i == 0 {
            Node::Pole(0)
        } else if i == self.len() - 1 {
            Node::Pole(1)
        } else {
            Node::Ring((i - 1) / self.per_ring, (i - 1) % self.per_ring)
        }
    }

    /// Entry (i, j) in the lattice node ordering.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match (self.decode(i), self.decode(j)) {
            (Node::Pole(p), Node::Pole(q)) => self.pole_pole[p][q],
            (Node::Pole(p), Node::Ring(b, _)) => self.pole_to_ring[p][b],
            (Node::Ring(a, _), Node::Pole(q)) => self.ring_to_pole[q][a],
            (Node::Ring(a, ja), Node::Ring(b, jb)) => {
                let d = (jb + self.per_ring - ja) % self.per_ring;
                self.lags[self.lag_index(a, b, d.min(self.per_ring - d))]
            }
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.len();
        (0..n).map(|i| (0..n).map(|j| self.entry(i, j)).collect()).collect()
    }

    /// out = self · v.
    pub fn apply(&self, v: &[f64], out: &mut [f64], ws: &mut Workspace) {
        let (r, m, half) = (self.rings, self.per_ring, self.half());
        let n = self.len();
        assert_eq!(v.len(), n);
        assert_eq!(out.len(), n);
        let n0 = r + 2;
        let buf = &mut ws.buf;
        for (b, x) in buf.iter_mut().zip(&v[1..n - 1]) {
            *b = Complex::new(*x, 0.0);
        }
        if r > 0 {
            self.fwd.process_with_scratch(buf, &mut ws.scratch);
        }

        // Wavenumber 0 together with the poles.
        for a in 0..r {
            ws.xr[a] = buf[a * m].re;
        }
        ws.xr[r] = v[0];
        ws.xr[r + 1] = v[n - 1];
        for a in 0..n0 {
            let row = &self.block0[a * n0..(a + 1) * n0];
            let y: f64 = row.iter().zip(&ws.xr[..n0]).map(|(c, x)| c * x).sum();
            if a < r {
                buf[a * m] = Complex::new(y, 0.0);
            } else if a == r {
                out[0] = y;
            } else {
                out[n - 1] = y;
            }
        }

        for k in 1..=half {
            for b in 0..r {
                let z = buf[b * m + k];
                ws.xr[b] = z.re;
                ws.xi[b] = z.im;
            }
            let block = self.mode_block(k);
            for a in 0..r {
                let row = &block[a * r..(a + 1) * r];
                let (mut yr, mut yi) = (0.0, 0.0);
                for ((c, xr), xi) in row.iter().zip(&ws.xr[..r]).zip(&ws.xi[..r]) {
                    yr += c * xr;
                    yi += c * xi;
                }
                buf[a * m + k] = Complex::new(yr, yi);
                if k != m - k {
                    buf[a * m + m - k] = Complex::new(yr, -yi);
                }
            }
        }

        if r > 0 {
            self.inv.process_with_scratch(buf, &mut ws.scratch);
        }
        let inv_m = 1.0 / m as f64;
        for (o, b) in out[1..n - 1].iter_mut().zip(buf.iter()) {
            *o = b.re * inv_m;
        }
    }

    /// self ∘ other.
    pub fn compose(&self, other: &RingOperator) -> RingOperator {
        assert_eq!((self.rings, self.per_ring), (other.rings, other.per_ring));
        let r = self.rings;
        let block0 = matmul(&self.block0, &other.block0, r + 2);
        let mut modes = vec![0.0; self.modes.len()];
        let rr = r * r;
        for k in 0..self.half() {
            let c = matmul(&self.modes[k * rr..(k + 1) * rr], &other.modes[k * rr..(k + 1) * rr], r);
            modes[k * rr..(k + 1) * rr].copy_from_slice(&c);
        }
        RingOperator::from_spectral(r, self.per_ring, block0, modes)
    }

    /// self + a·other.
    pub fn add_scaled(&self, a: f64, other: &RingOperator) -> RingOperator {
        assert_eq!((self.rings, self.per_ring), (other.rings, other.per_ring));
        let block0 = self.block0.iter().zip(&other.block0).map(|(x, y)| x + a * y).collect();
        let modes = self.modes.iter().zip(&other.modes).map(|(x, y)| x + a * y).collect();
        RingOperator::from_spectral(self.rings, self.per_ring, block0, modes)
    }

    /// [A, A², …, A^k].
    pub fn powers(&self, k: usize) -> Vec<RingOperator> {
        let mut out: Vec<RingOperator> = Vec::with_capacity(k);
        for i in 0..k {
            let next = if i == 0 { self.clone() } else { out[i - 1].compose(self) };
            out.push(next);
        }
        out
    }

    /// diag(ring, poles) · self, with one factor per ring.
    pub fn scale_rows(&mut self, ring: &[f64], poles: [f64; 2]) {
        let (r, h1, n0) = (self.rings, self.half() + 1, self.rings + 2);
        for a in 0..r {
            for b in 0..r {
                let base = (a * r + b) * h1;
                self.lags[base..base + h1].iter_mut().for_each(|x| *x *= ring[a]);
            }
            for p in 0..2 {
                self.ring_to_pole[p][a] *= ring[a];
                self.pole_to_ring[p][a] *= poles[p];
            }
        }
        for p in 0..2 {
            for q in 0..2 {
                self.pole_pole[p][q] *= poles[p];
            }
        }
        for i in 0..n0 {
            let s = if i < r { ring[i] } else { poles[i - r] };
            self.block0[i * n0..(i + 1) * n0].iter_mut().for_each(|x| *x *= s);
        }
        for k in 0..self.half() {
            for a in 0..r {
                let base = k * r * r + a * r;
                self.modes[base..base + r].iter_mut().for_each(|x| *x *= ring[a]);
            }
        }
    }

    /// self · diag(ring, poles).
    pub fn scale_cols(&mut self, ring: &[f64], poles: [f64; 2]) {
        let (r, h1, n0) = (self.rings, self.half() + 1, self.rings + 2);
        for a in 0..r {
            for b in 0..r {
                let base = (a * r + b) * h1;
                self.lags[base..base + h1].iter_mut().for_each(|x| *x *= ring[b]);
            }
            for p in 0..2 {
                self.ring_to_pole[p][a] *= poles[p];
                self.pole_to_ring[p][a] *= ring[a];
            }
        }
        for p in 0..2 {
            for q in 0..2 {
                self.pole_pole[p][q] *= poles[q];
            }
        }
        for i in 0..n0 {
            for j in 0..n0 {
                let s = if j < r { ring[j] } else { poles[j - r] };
                self.block0[i * n0 + j] *= s;
            }
        }
        for k in 0..self.half() {
            for a in 0..r {
                for b in 0..r {
                    self.modes[k * r * r + a * r + b] *= ring[b];
                }
            }
        }
    }

    /// Row sums, one per ring and per pole.
    pub fn row_sums(&self) -> (Vec<f64>, [f64; 2]) {
        let mut ws = Workspace::new(self.rings, self.per_ring);
        let ones = vec![1.0; self.len()];
        let mut out = vec![0.0; self.len()];
        self.apply(&ones, &mut out, &mut ws);
        let ring = (0..self.rings).map(|a| out[1 + a * self.per_ring]).collect();
        (ring, [out[0], out[self.len() - 1]])
    }

    /// Replaces negative entries by 0.
    pub fn clamp_nonnegative(&self) -> RingOperator {
        let mut op = self.clone();
        op.map_physical(|_, x| x.max(0.0));
        op
    }

    /// Zeroes every entry between nodes further apart than `max_angle`.
    pub fn mask_by_angle(&self, max_angle: f64) -> RingOperator {
        let mut op = self.clone();
        op.map_physical(|theta, x| if theta <= max_angle { x } else { 0.0 });
        op
    }

    /// Applies `f(angle, value)` to every physical entry and refreshes the
    /// Fourier blocks.
    fn map_physical<F: Fn(f64, f64) -> f64>(&mut self, f: F) {
        use std::f64::consts::PI;
        let (r, m, h1) = (self.rings, self.per_ring, self.half() + 1);
        let step = PI / (r + 1) as f64;
        let colat = |a: usize| (a + 1) as f64 * step;
        for a in 0..r {
            for b in 0..r {
                for d in 0..h1 {
                    let i = (a * r + b) * h1 + d;
                    let theta = angle_between(colat(a), colat(b), 2.0 * PI * d as f64 / m as f64);
                    self.lags[i] = f(theta, self.lags[i]);
                }
            }
            for p in 0..2 {
                let theta = if p == 0 { colat(a) } else { PI - colat(a) };
                self.ring_to_pole[p][a] = f(theta, self.ring_to_pole[p][a]);
                self.pole_to_ring[p][a] = f(theta, self.pole_to_ring[p][a]);
            }
        }
        for p in 0..2 {
            for q in 0..2 {
                let theta = if p == q { 0.0 } else { PI };
                self.pole_pole[p][q] = f(theta, self.pole_pole[p][q]);
            }
        }
        self.refresh_spectral();
    }

    /// Largest absolute difference between physical entries of two operators
    /// on the same lattice.
    pub fn max_abs_diff(&self, other: &RingOperator) -> f64 {
        let mut d: f64 = 0.0;
        for (x, y) in self.lags.iter().zip(&other.lags) {
            d = d.max((x - y).abs());
        }
        for p in 0..2 {
            for (x, y) in self.ring_to_pole[p].iter().zip(&other.ring_to_pole[p]) {
                d = d.max((x - y).abs());
            }
            for (x, y) in self.pole_to_ring[p].iter().zip(&other.pole_to_ring[p]) {
                d = d.max((x - y).abs());
            }
            for q in 0..2 {
                d = d.max((self.pole_pole[p][q] - other.pole_pole[p][q]).abs());
            }
        }
        d
    }

    pub fn max_abs_entry(&self) -> f64 {
        let mut d: f64 = 0.0;
        for x in self.lags.iter().chain(self.ring_to_pole.iter().flatten()).chain(self.pole_to_ring.iter().flatten()) {
            d = d.max(x.abs());
        }
        for p in 0..2 {
            for q in 0..2 {
                d = d.max(self.pole_pole[p][q].abs());
            }
        }
        d
    }

    /// Smallest physical entry.
    pub fn min_entry(&self) -> f64 {
        let mut d = f64::INFINITY;
        for x in self.lags.iter().chain(self.ring_to_pole.iter().flatten()).chain(self.pole_to_ring.iter().flatten()) {
            d = d.min(*x);
        }
        for p in 0..2 {
            for q in 0..2 {
                d = d.min(self.pole_pole[p][q]);
            }
        }
        d
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * n..(k + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
    c
}
