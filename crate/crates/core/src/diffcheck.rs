//! Central-difference gradient verification.

use serde::{Deserialize, Serialize};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Floor on the finite-difference norm in the relative error.
pub const REL_EPS: f64 = 1e-8;
/// Coordinate cap for expensive end-to-end checks.
pub const MAX_SAMPLED_COORDS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_error: f64,
    /// False when `f(x +- h e_i)` was not finite.
    pub finite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub coords: Vec<CoordinateCheck>,
    /// `|g_analytic - g_fd| / max(|g_fd|, eps)` over the checked coordinates.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub non_finite: usize,
    /// Instances skipped upstream (e.g. unconverged controller solves).
    pub skipped: usize,
}

/// Relative error `|a - b| / max(|b|, eps)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(REL_EPS)
}

/// Central differences of `f` at `x0` for every coordinate.
pub fn central_difference<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], h: f64) -> Vec<f64> {
    let idx: Vec<usize> = (0..x0.len()).collect();
    central_difference_at(f, x0, h, &idx)
}

pub fn central_difference_at<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], h: f64, coords: &[usize]) -> Vec<f64> {
    let mut x = x0.to_vec();
    coords
        .iter()
        .map(|&i| {
            x[i] = x0[i] + h;
            let fp = f(&x);
            x[i] = x0[i] - h;
            let fm = f(&x);
            x[i] = x0[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Compares `grad_fn(x0)` against central differences of `f` on `coords`
/// (all coordinates when `None`).
pub fn check<F, G>(f: F, grad_fn: G, x0: &[f64], h: f64, tolerance: f64, coords: Option<&[usize]>) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let all: Vec<usize> = (0..x0.len()).collect();
    let coords = coords.unwrap_or(&all);
    let analytic = grad_fn(x0);
    let numeric = central_difference_at(&f, x0, h, coords);
    let mut out = Vec::with_capacity(coords.len());
    let mut a_sel = Vec::new();
    let mut n_sel = Vec::new();
    let mut non_finite = 0;
    for (&i, &n) in coords.iter().zip(&numeric) {
        let a = analytic[i];
        let finite = n.is_finite();
        if finite {
            a_sel.push(a);
            n_sel.push(n);
        } else {
            non_finite += 1;
        }
        out.push(CoordinateCheck { index: i, analytic: a, numeric: n, abs_error: (a - n).abs(), finite });
    }
    let rel = relative_error(&a_sel, &n_sel);
    let max_abs = out.iter().filter(|c| c.finite).map(|c| c.abs_error).fold(0.0, f64::max);
    GradCheckReport {
        coords: out,
        relative_error: rel,
        max_abs_error: max_abs,
        tolerance,
        passed: rel < tolerance && non_finite == 0,
        non_finite,
        skipped: 0,
    }
}

/// Deterministic subset of at most `max` coordinates out of `n`.
pub fn sample_coords(n: usize, max: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    if n <= max {
        return idx;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(max);
    idx.sort_unstable();
    idx
}
