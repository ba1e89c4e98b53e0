//! Points on S_R², geodesic angles, the lattice G_{R,n} with quadrature
//! weights, and geodesic balls.

use std::f64::consts::PI;
use std::io::Write;

use crate::error::{domain, Error, Result};

const RADIUS_RTOL: f64 = 1e-12;

/// A point on the sphere of radius `radius`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpherePoint {
    colatitude: f64,
    longitude: f64,
    radius: f64,
    unit: [f64; 3],
}

impl SpherePoint {
    /// Builds a point, normalizing the longitude to [0, 2π). At the poles the
    /// longitude is canonicalized to 0.
    pub fn new(colatitude: f64, longitude: f64, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return domain(format!("radius must be positive, got {radius}"));
        }
        if !(0.0..=PI).contains(&colatitude) {
            return domain(format!("colatitude {colatitude} outside [0, pi]"));
        }
        if !longitude.is_finite() {
            return domain("longitude must be finite");
        }
        let mut lon = longitude.rem_euclid(2.0 * PI);
        if lon >= 2.0 * PI {
            lon = 0.0;
        }
        if colatitude == 0.0 || colatitude == PI {
            lon = 0.0;
        }
        let (sc, cc) = colatitude.sin_cos();
        let (sl, cl) = lon.sin_cos();
        Ok(Self {
            colatitude,
            longitude: lon,
            radius,
            unit: [sc * cl, sc * sl, cc],
        })
    }

    pub fn north_pole(radius: f64) -> Result<Self> {
        Self::new(0.0, 0.0, radius)
    }

    pub fn colatitude(&self) -> f64 {
        self.colatitude
    }

    pub fn longitude(&self) -> f64 {
        self.longitude
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Unit vector (x, y, z) of the point.
    pub fn unit_vector(&self) -> [f64; 3] {
        self.unit
    }

    fn from_unit(v: [f64; 3], radius: f64) -> Self {
        let colat = (v[0] * v[0] + v[1] * v[1]).sqrt().atan2(v[2]);
        let lon = v[1].atan2(v[0]);
        // The constructor only fails on invalid input, which acos/atan2 cannot produce.
        Self::new(colat, lon, radius).expect("valid unit vector")
    }

    /// Moves this point along the great circle leaving it at azimuth
    /// `azimuth` (measured from the direction of decreasing colatitude,
    /// i.e. towards the north pole, turning eastward) through angle `angle`.
    pub fn travel(&self, angle: f64, azimuth: f64) -> SpherePoint {
        let p = self.unit;
        // Local frame: north tangent and east tangent at p.
        let (north, east) = tangent_frame(p);
        let (sa, ca) = azimuth.sin_cos();
        let dir = [
            ca * north[0] + sa * east[0],
            ca * north[1] + sa * east[1],
            ca * north[2] + sa * east[2],
        ];
        let (s, c) = angle.sin_cos();
        let q = [c * p[0] + s * dir[0], c * p[1] + s * dir[1], c * p[2] + s * dir[2]];
        Self::from_unit(q, self.radius)
    }
}

fn tangent_frame(p: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    // At the poles pick the frame of longitude 0.
    let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
    if rho < 1e-15 {
        let sign = if p[2] > 0.0 { 1.0 } else { -1.0 };
        return ([-sign, 0.0, 0.0], [0.0, 1.0, 0.0]);
    }
    let east = [-p[1] / rho, p[0] / rho, 0.0];
    let north = [-p[2] * p[0] / rho, -p[2] * p[1] / rho, rho];
    (north, east)
}

/// Angle θ ∈ [0, π] between two points.
///
/// Equal to acos of the clamped law-of-cosines value, but computed as
/// atan2(|u×v|, u·v) so it stays accurate near θ = 0 and θ = π where acos
/// loses about √ε.
pub fn geodesic_angle(p: &SpherePoint, q: &SpherePoint) -> Result<f64> {
    if (p.radius - q.radius).abs() > RADIUS_RTOL * p.radius.max(q.radius) {
        return Err(Error::RadiusMismatch(p.radius, q.radius));
    }
    let (a, b) = (p.unit, q.unit);
    let cross = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let s = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    Ok(s.atan2(a[0] * b[0] + a[1] * b[1] + a[2] * b[2]))
}

/// Angle between points at colatitudes `c1`, `c2` separated by longitude `dl`,
/// via sin²(θ/2) = sin²((c1−c2)/2) + sin c1 sin c2 sin²(dl/2) and
/// cos²(θ/2) = cos²((c1+c2)/2) + sin c1 sin c2 cos²(dl/2).
pub(crate) fn angle_between(c1: f64, c2: f64, dl: f64) -> f64 {
    let ss = c1.sin() * c2.sin();
    let h = (0.5 * (c1 - c2)).sin().powi(2) + ss * (0.5 * dl).sin().powi(2);
    let k = (0.5 * (c1 + c2)).cos().powi(2) + ss * (0.5 * dl).cos().powi(2);
    2.0 * h.sqrt().atan2(k.sqrt())
}

/// Area of a geodesic ball of radius `r` on S_R²: 2πR²(1 − cos(r/R)).
pub fn ball_measure(radius: f64, r: f64) -> Result<f64> {
    if !(radius > 0.0) {
        return domain(format!("radius must be positive, got {radius}"));
    }
    if !(0.0..=PI * radius * (1.0 + 1e-15)).contains(&r) {
        return domain(format!("ball radius {r} outside [0, pi R]"));
    }
    Ok(2.0 * PI * radius * radius * (1.0 - (r / radius).min(PI).cos()))
}

#[derive(Debug, Clone, Copy)]
pub struct GeodesicBall {
    pub center: SpherePoint,
    pub geodesic_radius: f64,
}

impl GeodesicBall {
    pub fn new(center: SpherePoint, geodesic_radius: f64) -> Result<Self> {
        if !(0.0..=PI * center.radius * (1.0 + 1e-15)).contains(&geodesic_radius) {
            return domain(format!("ball radius {geodesic_radius} outside [0, pi R]"));
        }
        Ok(Self { center, geodesic_radius })
    }

    pub fn angular_radius(&self) -> f64 {
        (self.geodesic_radius / self.center.radius).min(PI)
    }

    pub fn contains(&self, p: &SpherePoint) -> Result<bool> {
        Ok(geodesic_angle(&self.center, p)? <= self.angular_radius())
    }

    pub fn measure(&self) -> f64 {
        ball_measure(self.center.radius, self.geodesic_radius.min(PI * self.center.radius))
            .expect("radius validated at construction")
    }
}

/// Position of a node within the ring-major lattice layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    NorthPole,
    /// Interior ring `ring` (0-based, colatitude (ring+1)·Δ) at longitude index `lon`.
    Ring { ring: usize, lon: usize },
    SouthPole,
}

/// The lattice G_{R,n}: colatitudes i₁π4^{−n}, longitudes 2i₂π4^{−(n+1)},
/// with the duplicated pole points merged into one node each.
///
/// Node order: north pole, then rings from north to south (each ring in
/// increasing longitude), then the south pole.
#[derive(Debug, Clone)]
pub struct SphereGrid {
    radius: f64,
    level: u32,
    rings: usize,
    per_ring: usize,
    nodes: Vec<SpherePoint>,
    weights: Vec<f64>,
    ring_weights: Vec<f64>,
    pole_weight: f64,
}

impl SphereGrid {
    /// Number of lattice nodes at level `n` after pole deduplication.
    pub fn node_count(level: u32) -> usize {
        let rings = 4usize.pow(level) - 1;
        rings * 4usize.pow(level + 1) + 2
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of interior rings, 4^n − 1.
    pub fn rings(&self) -> usize {
        self.rings
    }

    /// Longitudes per ring, 4^{n+1}.
    pub fn per_ring(&self) -> usize {
        self.per_ring
    }

    /// Colatitude spacing π·4^{−n}.
    pub fn colatitude_step(&self) -> f64 {
        PI / 4f64.powi(self.level as i32)
    }

    pub fn ring_colatitude(&self, ring: usize) -> f64 {
        (ring + 1) as f64 * self.colatitude_step()
    }

    pub fn nodes(&self) -> &[SpherePoint] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight shared by every node of ring `ring`.
    pub fn ring_weight(&self, ring: usize) -> f64 {
        self.ring_weights[ring]
    }

    pub fn pole_weight(&self) -> f64 {
        self.pole_weight
    }

    pub fn north_index(&self) -> usize {
        0
    }

    pub fn south_index(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn ring_index(&self, ring: usize, lon: usize) -> usize {
        1 + ring * self.per_ring + lon
    }

    pub fn kind(&self, index: usize) -> NodeKind {
        if index == 0 {
            NodeKind::NorthPole
        } else if index == self.nodes.len() - 1 {
            NodeKind::SouthPole
        } else {
            let k = index - 1;
            NodeKind::Ring { ring: k / self.per_ring, lon: k % self.per_ring }
        }
    }

    /// Index of the node closest to `p`.
    pub fn nearest_node(&self, p: &SpherePoint) -> Result<usize> {
        let mut best = (0, f64::INFINITY);
        for (i, q) in self.nodes.iter().enumerate() {
            let a = geodesic_angle(p, q)?;
            if a < best.1 {
                best = (i, a);
            }
        }
        Ok(best.0)
    }

    /// Writes the grid as CSV with columns (index, colatitude, longitude, weight).
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "index,colatitude,longitude,weight")?;
        for (i, (p, w)) in self.nodes.iter().zip(&self.weights).enumerate() {
            writeln!(out, "{i},{:.17e},{:.17e},{:.17e}", p.colatitude, p.longitude, w)?;
        }
        Ok(())
    }
}

/// Builds G_{R,n}. Ring nodes carry the exact area of their latitude band
/// divided evenly over the ring; each pole carries its polar cap of angular
/// radius Δ/2. The weights therefore sum to 4πR² up to rounding.
pub fn build_grid(radius: f64, level: u32) -> Result<SphereGrid> {
    if !(radius > 0.0) || !radius.is_finite() {
        return domain(format!("radius must be positive, got {radius}"));
    }
    if level > 6 {
        return domain(format!("grid level {level} too large"));
    }
    let rings = 4usize.pow(level) - 1;
    let per_ring = 4usize.pow(level + 1);
    let step = PI / 4f64.powi(level as i32);
    let area = |c0: f64, c1: f64| 2.0 * PI * radius * radius * (c0.cos() - c1.cos());

    let pole_weight = area(0.0, 0.5 * step);
    let ring_weights: Vec<f64> = (0..rings)
        .map(|a| {
            let c = (a + 1) as f64 * step;
            area(c - 0.5 * step, c + 0.5 * step) / per_ring as f64
        })
        .collect();

    let mut nodes = Vec::with_capacity(rings * per_ring + 2);
    let mut weights = Vec::with_capacity(rings * per_ring + 2);
    nodes.push(SpherePoint::new(0.0, 0.0, radius)?);
    weights.push(pole_weight);
    for (a, &w) in ring_weights.iter().enumerate() {
        let c = (a + 1) as f64 * step;
        for j in 0..per_ring {
            nodes.push(SpherePoint::new(c, 2.0 * PI * j as f64 / per_ring as f64, radius)?);
            weights.push(w);
        }
    }
    nodes.push(SpherePoint::new(PI, 0.0, radius)?);
    weights.push(pole_weight);

    Ok(SphereGrid { radius, level, rings, per_ring, nodes, weights, ring_weights, pole_weight })
}

/// Certified nearest-node angle for G_{R,n}: every point of the sphere has a
/// lattice node within the returned angle.
///
/// The lattice is invariant under longitude shifts by 2π/4^{n+1}, under
/// longitude reflection and under reflection through the equator, so the
/// fundamental cell colatitude ∈ [0, π/2], longitude ∈ [0, π/4^{n+1}] is
/// swept on a 16×16-per-cell sample mesh. The maximum sampled distance plus
/// the sample mesh half-diagonal bounds the true supremum.
///
/// Panics if the certified bound exceeds π·4^{−n}, which would mean the
/// lattice is not what the construction claims.
pub fn mesh_angle_bound(level: u32) -> f64 {
    let step = PI / 4f64.powi(level as i32);
    let lon_step = 2.0 * PI / 4f64.powi(level as i32 + 1);
    let last_ring = 4usize.pow(level); // index of the south pole in colatitude steps
    let sub = 16usize;
    let dc = step / sub as f64;
    let dl = lon_step / sub as f64;
    let n_colat = (last_ring / 2).max(1) * sub;
    let half_cells = sub / 2;

    let dist = |c: f64, l: f64, a: usize| -> f64 {
        // Node on colatitude index a (0 and last_ring are poles) at longitude 0.
        let ca = a as f64 * step;
        let cos = c.cos() * ca.cos() + c.sin() * ca.sin() * l.cos();
        cos.clamp(-1.0, 1.0).acos()
    };

    let mut worst: f64 = 0.0;
    for ic in 0..=n_colat {
        let c = (ic as f64 * dc).min(0.5 * PI);
        let a0 = (c / step).floor() as usize;
        for il in 0..=half_cells {
            let l = il as f64 * dl;
            let mut best = f64::INFINITY;
            for a in a0.saturating_sub(1)..=(a0 + 2).min(last_ring) {
                best = best.min(dist(c, l, a));
            }
            worst = worst.max(best);
        }
    }
    let bound = worst + 0.5 * (dc * dc + dl * dl).sqrt();
    assert!(
        bound <= step * (1.0 + 1e-12),
        "mesh bound {bound} exceeds pi*4^-n = {step}"
    );
    bound
}
