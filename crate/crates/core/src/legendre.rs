//! Legendre polynomials by upward three-term recurrence.

use crate::error::{domain, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LegendreTable {
    pub argument: f64,
    pub values: Vec<f64>,
}

impl LegendreTable {
    pub fn max_degree(&self) -> usize {
        self.values.len() - 1
    }
}

/// P_0(x), …, P_L(x) via (l+1)P_{l+1} = (2l+1)xP_l − lP_{l−1}.
pub fn legendre_all(x: f64, max_degree: usize) -> Result<LegendreTable> {
    if !(-1.0..=1.0).contains(&x) {
        return domain(format!("Legendre argument {x} outside [-1, 1]"));
    }
    let mut values = Vec::with_capacity(max_degree + 1);
    values.push(1.0);
    if max_degree >= 1 {
        values.push(x);
    }
    for l in 1..max_degree {
        let lf = l as f64;
        let next = ((2.0 * lf + 1.0) * x * values[l] - lf * values[l - 1]) / (lf + 1.0);
        values.push(next);
    }
    Ok(LegendreTable { argument: x, values })
}

/// Σ_{l≤L} c_l P_l(x) without storing the table.
pub(crate) fn legendre_sum(coeffs: &[f64], x: f64) -> f64 {
    let mut acc = 0.0;
    let (mut p_prev, mut p) = (1.0, x);
    if let Some(&c0) = coeffs.first() {
        acc += c0;
    }
    if let Some(&c1) = coeffs.get(1) {
        acc += c1 * x;
    }
    for (l, &c) in coeffs.iter().enumerate().skip(2) {
        let lf = (l - 1) as f64;
        let next = ((2.0 * lf + 1.0) * x * p - lf * p_prev) / (lf + 1.0);
        p_prev = p;
        p = next;
        acc += c * p;
    }
    acc
}

/// Checks sup |P_l'| ≤ l(l+1)/2 for every l ≤ L using centred finite
/// differences at `samples` interior points (one-sided at the ends).
pub fn legendre_derivative_bound_check(max_degree: usize, samples: usize) -> bool {
    let samples = samples.max(2);
    let h = 1e-6;
    let eval = |x: f64| legendre_all(x.clamp(-1.0, 1.0), max_degree).expect("argument clamped").values;
    for i in 0..samples {
        // Include the endpoints, where the bound is attained.
        let x = -1.0 + 2.0 * i as f64 / (samples - 1) as f64;
        let (lo, hi) = ((x - h).max(-1.0), (x + h).min(1.0));
        let (a, b) = (eval(lo), eval(hi));
        for l in 1..=max_degree {
            let slope = (b[l] - a[l]) / (hi - lo);
            let bound = (l * (l + 1)) as f64 / 2.0;
            if slope.abs() > bound * (1.0 + 1e-6) + 1e-6 * bound * bound {
                return false;
            }
        }
    }
    true
}
