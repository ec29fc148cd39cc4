//! Gauss rules on the reference segment `[0, 1]` and the reference triangle.
//!
//! Triangle rules come from the collapsed-coordinate map
//! `(t, y) -> ((1 - y) t, y)`: Gauss-Legendre in `t` times Gauss-Jacobi with
//! weight `(1 - y)` in `y`, which is exact to any requested degree. Rules are
//! built once per degree and shared.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Highest total degree served by [`triangle_rule`].
pub const MAX_TRIANGLE_DEGREE: usize = 63;
/// Highest degree served by [`segment_rule`].
pub const MAX_SEGMENT_DEGREE: usize = 127;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule<P> {
    pub points: Vec<P>,
    pub weights: Vec<f64>,
    pub exactness_degree: usize,
}

pub type TriangleRule = QuadratureRule<[f64; 2]>;
pub type SegmentRule = QuadratureRule<f64>;

impl<P> QuadratureRule<P> {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Nodes and weights of the `n`-point Gauss-Jacobi rule on `[-1, 1]` for the
/// weight `(1 - s)^alpha (1 + s)^beta` (Golub-Welsch).
fn gauss_jacobi(n: usize, alpha: f64, beta: f64) -> (Vec<f64>, Vec<f64>) {
    let ab = alpha + beta;
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let k = i as f64;
        let diag = if i == 0 {
            (beta - alpha) / (ab + 2.0)
        } else {
            (beta * beta - alpha * alpha) / ((2.0 * k + ab) * (2.0 * k + ab + 2.0))
        };
        jacobi[(i, i)] = diag;
        if i + 1 < n {
            let k = k + 1.0;
            let num = 4.0 * k * (k + alpha) * (k + beta) * (k + ab);
            let den = (2.0 * k + ab).powi(2) * (2.0 * k + ab + 1.0) * (2.0 * k + ab - 1.0);
            let off = (num / den).sqrt();
            jacobi[(i, i + 1)] = off;
            jacobi[(i + 1, i)] = off;
        }
    }
    let mu0 = 2f64.powf(ab + 1.0) * gamma_int(alpha + 1.0) * gamma_int(beta + 1.0) / gamma_int(ab + 2.0);
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], mu0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut nodes, weights): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    for x in &mut nodes {
        *x = newton_polish(n, alpha, beta, *x);
    }
    (nodes, weights)
}

/// Gamma function for the small non-negative integers used here.
fn gamma_int(x: f64) -> f64 {
    let n = x.round() as u32;
    debug_assert!((x - f64::from(n)).abs() < 1e-12 && n >= 1);
    (1..n).map(f64::from).product()
}

/// Refines a Jacobi root with a few Newton steps on the three-term recurrence.
fn newton_polish(n: usize, alpha: f64, beta: f64, mut x: f64) -> f64 {
    for _ in 0..3 {
        let (p, dp) = jacobi_with_derivative(n, alpha, beta, x);
        if dp == 0.0 {
            break;
        }
        let step = p / dp;
        x -= step;
        if step.abs() < 1e-16 {
            break;
        }
    }
    x
}

/// Jacobi polynomial `P_n^{(alpha, beta)}(x)` and its derivative.
pub(crate) fn jacobi_with_derivative(n: usize, alpha: f64, beta: f64, x: f64) -> (f64, f64) {
    let (p, _) = jacobi_values(n, alpha, beta, x);
    if n == 0 {
        return (p, 0.0);
    }
    let (q, _) = jacobi_values(n - 1, alpha + 1.0, beta + 1.0, x);
    let dp = 0.5 * (n as f64 + alpha + beta + 1.0) * q;
    (p, dp)
}

/// Returns `(P_n, P_{n-1})` of the Jacobi family at `x`.
fn jacobi_values(n: usize, alpha: f64, beta: f64, x: f64) -> (f64, f64) {
    let mut p_prev = 1.0;
    if n == 0 {
        return (1.0, 0.0);
    }
    let mut p = 0.5 * (alpha - beta + (alpha + beta + 2.0) * x);
    for k in 1..n {
        let k = k as f64;
        let ab = alpha + beta;
        let a1 = 2.0 * (k + 1.0) * (k + ab + 1.0) * (2.0 * k + ab);
        let a2 = (2.0 * k + ab + 1.0) * (alpha * alpha - beta * beta);
        let a3 = (2.0 * k + ab) * (2.0 * k + ab + 1.0) * (2.0 * k + ab + 2.0);
        let a4 = 2.0 * (k + alpha) * (k + beta) * (2.0 * k + ab + 2.0);
        let next = ((a2 + a3 * x) * p - a4 * p_prev) / a1;
        p_prev = p;
        p = next;
    }
    (p, p_prev)
}

fn build_segment(degree: usize) -> SegmentRule {
    let n = degree / 2 + 1;
    let (s, w) = gauss_jacobi(n, 0.0, 0.0);
    QuadratureRule {
        points: s.iter().map(|x| 0.5 * (x + 1.0)).collect(),
        weights: w.iter().map(|w| 0.5 * w).collect(),
        exactness_degree: 2 * n - 1,
    }
}

fn build_triangle(degree: usize) -> TriangleRule {
    let n = degree / 2 + 1;
    let (t, wt) = gauss_jacobi(n, 0.0, 0.0);
    let (y, wy) = gauss_jacobi(n, 1.0, 0.0);
    let mut points = Vec::with_capacity(n * n);
    let mut weights = Vec::with_capacity(n * n);
    for (yj, wyj) in y.iter().zip(&wy) {
        let yy = 0.5 * (yj + 1.0);
        for (ti, wti) in t.iter().zip(&wt) {
            let tt = 0.5 * (ti + 1.0);
            points.push([(1.0 - yy) * tt, yy]);
            // dt = ds/2, (1 - y) dy = (1 - s)/2 * ds/2
            weights.push(0.5 * wti * 0.25 * wyj);
        }
    }
    QuadratureRule {
        points,
        weights,
        exactness_degree: 2 * n - 1,
    }
}

/// Gauss-Legendre rule on `[0, 1]` exact for polynomials of `degree`.
pub fn segment_rule(degree: usize) -> Result<Arc<SegmentRule>> {
    static CACHE: [OnceLock<Arc<SegmentRule>>; MAX_SEGMENT_DEGREE + 1] =
        [const { OnceLock::new() }; MAX_SEGMENT_DEGREE + 1];
    let slot = CACHE.get(degree).ok_or(Error::QuadratureDegree {
        degree,
        max: MAX_SEGMENT_DEGREE,
    })?;
    Ok(slot.get_or_init(|| Arc::new(build_segment(degree))).clone())
}

/// Rule on the reference triangle exact for total degree `degree`.
pub fn triangle_rule(degree: usize) -> Result<Arc<TriangleRule>> {
    static CACHE: [OnceLock<Arc<TriangleRule>>; MAX_TRIANGLE_DEGREE + 1] =
        [const { OnceLock::new() }; MAX_TRIANGLE_DEGREE + 1];
    let slot = CACHE.get(degree).ok_or(Error::QuadratureDegree {
        degree,
        max: MAX_TRIANGLE_DEGREE,
    })?;
    Ok(slot.get_or_init(|| Arc::new(build_triangle(degree))).clone())
}
