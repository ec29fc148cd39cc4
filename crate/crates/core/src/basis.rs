//! Orthonormal Dubiner bases on the reference triangle, orthonormal Legendre
//! bases on faces, and the element-wise extra Raviart-Thomas functions.
//!
//! Scalar modes are normalized so that `(1/|K|) ∫_K q_i q_j = δ_ij` and are
//! ordered by total degree, so the last `k + 1` modes are exactly the ones of
//! degree `k`. The vector basis of `[P_k]^2` interleaves components:
//! index `2 i + r` is `q_i e_r`. The `k + 1` extra functions completing
//! `RT_k` are `x q_j` for the degree-`k` modes, orthonormalized per element.

use nalgebra::{DMatrix, Matrix2};

use crate::error::{Error, Result};
use crate::mesh::{reference_face_point, AffineMap, Mesh, Point};
use crate::quadrature::{segment_rule, triangle_rule, SegmentRule, TriangleRule};

/// `dim P_k` on the triangle.
pub fn num_modes(k: usize) -> usize {
    (k + 1) * (k + 2) / 2
}

/// `dim P_k` on a face, which is also the number of extra RT functions.
pub fn num_face_modes(k: usize) -> usize {
    k + 1
}

/// `dim RT_k = 2 m + m'`.
pub fn num_rt_functions(k: usize) -> usize {
    2 * num_modes(k) + num_face_modes(k)
}

/// `(p, q)` Jacobi indices of each mode, graded by total degree `p + q`
/// and then by `q`.
pub fn dubiner_modes(k: usize) -> Vec<(usize, usize)> {
    let mut modes = Vec::with_capacity(num_modes(k));
    for n in 0..=k {
        for q in 0..=n {
            modes.push((n - q, q));
        }
    }
    modes
}

/// Legendre-type values scaled by `(1 - y)^p` and their gradients,
/// for `p = 0..=k`.
fn collapsed_legendre(k: usize, x: f64, y: f64) -> (Vec<f64>, Vec<[f64; 2]>) {
    let a = 2.0 * x - 1.0 + y;
    let b = 1.0 - y;
    let mut v = vec![0.0; k + 1];
    let mut g = vec![[0.0; 2]; k + 1];
    v[0] = 1.0;
    if k >= 1 {
        v[1] = a;
        g[1] = [2.0, 1.0];
    }
    for p in 1..k {
        let pf = p as f64;
        let c1 = 2.0 * pf + 1.0;
        let c2 = pf * b * b;
        v[p + 1] = (c1 * a * v[p] - c2 * v[p - 1]) / (pf + 1.0);
        g[p + 1] = [
            (c1 * (2.0 * v[p] + a * g[p][0]) - c2 * g[p - 1][0]) / (pf + 1.0),
            (c1 * (v[p] + a * g[p][1]) - pf * (-2.0 * b * v[p - 1] + b * b * g[p - 1][1])) / (pf + 1.0),
        ];
    }
    (v, g)
}

/// `P_q^{(alpha, 0)}(2y - 1)` and its `y`-derivative for `q = 0..=n`.
fn jacobi_family(n: usize, alpha: f64, y: f64) -> (Vec<f64>, Vec<f64>) {
    let s = 2.0 * y - 1.0;
    let mut v = vec![0.0; n + 1];
    let mut d = vec![0.0; n + 1];
    v[0] = 1.0;
    if n >= 1 {
        v[1] = 0.5 * (alpha + (alpha + 2.0) * s);
        d[1] = 0.5 * (alpha + 2.0);
    }
    for q in 1..n {
        let k = q as f64;
        let a1 = 2.0 * (k + 1.0) * (k + alpha + 1.0) * (2.0 * k + alpha);
        let a2 = (2.0 * k + alpha + 1.0) * alpha * alpha;
        let a3 = (2.0 * k + alpha) * (2.0 * k + alpha + 1.0) * (2.0 * k + alpha + 2.0);
        let a4 = 2.0 * (k + alpha) * k * (2.0 * k + alpha + 2.0);
        v[q + 1] = ((a2 + a3 * s) * v[q] - a4 * v[q - 1]) / a1;
        d[q + 1] = (a3 * v[q] + (a2 + a3 * s) * d[q] - a4 * d[q - 1]) / a1;
    }
    // chain rule for s = 2y - 1
    d.iter_mut().for_each(|x| *x *= 2.0);
    (v, d)
}

fn eval_point(k: usize, modes: &[(usize, usize)], x: f64, y: f64, values: &mut [f64], grads: Option<&mut [[f64; 2]]>) {
    let (lv, lg) = collapsed_legendre(k, x, y);
    let families: Vec<(Vec<f64>, Vec<f64>)> = (0..=k).map(|p| jacobi_family(k - p, 2.0 * p as f64 + 1.0, y)).collect();
    let mut grads = grads;
    for (i, &(p, q)) in modes.iter().enumerate() {
        let c = ((2 * p + 1) as f64 * (p + q + 1) as f64).sqrt();
        let (jv, jd) = (&families[p].0[q], &families[p].1[q]);
        values[i] = c * lv[p] * jv;
        if let Some(g) = grads.as_deref_mut() {
            g[i] = [c * lg[p][0] * jv, c * (lg[p][1] * jv + lv[p] * jd)];
        }
    }
}

/// Values of the reference Dubiner modes, `[m x npts]`.
pub fn dubiner_eval(k: usize, points: &[[f64; 2]]) -> DMatrix<f64> {
    let modes = dubiner_modes(k);
    let m = modes.len();
    let mut out = DMatrix::zeros(m, points.len());
    let mut buf = vec![0.0; m];
    for (j, p) in points.iter().enumerate() {
        eval_point(k, &modes, p[0], p[1], &mut buf, None);
        out.column_mut(j).copy_from_slice(&buf);
    }
    out
}

/// Reference gradients of the Dubiner modes: `[d/dx, d/dy]`, each `[m x npts]`.
pub fn dubiner_grad(k: usize, points: &[[f64; 2]]) -> [DMatrix<f64>; 2] {
    let modes = dubiner_modes(k);
    let m = modes.len();
    let mut gx = DMatrix::zeros(m, points.len());
    let mut gy = DMatrix::zeros(m, points.len());
    let mut buf = vec![0.0; m];
    let mut gbuf = vec![[0.0; 2]; m];
    for (j, p) in points.iter().enumerate() {
        eval_point(k, &modes, p[0], p[1], &mut buf, Some(&mut gbuf));
        for i in 0..m {
            gx[(i, j)] = gbuf[i][0];
            gy[(i, j)] = gbuf[i][1];
        }
    }
    [gx, gy]
}

/// Orthonormal face functions `sqrt(2r+1) P_r(2s-1)`, `[m' x npts]`.
pub fn face_basis_eval(k: usize, s: &[f64]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(k + 1, s.len());
    for (j, &sj) in s.iter().enumerate() {
        let (v, _) = jacobi_family(k, 0.0, sj);
        for r in 0..=k {
            out[(r, j)] = ((2 * r + 1) as f64).sqrt() * v[r];
        }
    }
    out
}

/// `D̂[i, 2 i' + r] = (1/|K̂|) ∫ q̂_i ∂_r q̂_{i'}` over the reference triangle,
/// restricted to the `m - m'` modes of degree below `k`.
///
/// Normalizing by `|K̂|` makes the element block a pure Jacobian recombination
/// of these columns (times `|K|`).
pub fn reference_divergence_matrix(k: usize) -> Result<DMatrix<f64>> {
    let rule = triangle_rule(2 * k + 1)?;
    Ok(divergence_from_tabulation(
        k,
        &rule,
        &dubiner_eval(k, &rule.points),
        &dubiner_grad(k, &rule.points),
    ))
}

fn divergence_from_tabulation(
    k: usize,
    rule: &TriangleRule,
    values: &DMatrix<f64>,
    grads: &[DMatrix<f64>; 2],
) -> DMatrix<f64> {
    let m = num_modes(k);
    let rows = m - num_face_modes(k);
    let mut d = DMatrix::zeros(rows, 2 * m);
    for i in 0..rows {
        for ip in 0..m {
            for r in 0..2 {
                let mut acc = 0.0;
                for (g, w) in rule.weights.iter().enumerate() {
                    acc += w * values[(i, g)] * grads[r][(ip, g)];
                }
                d[(i, 2 * ip + r)] = acc * 2.0;
            }
        }
    }
    d
}

/// Everything computed once per degree on the reference element.
#[derive(Debug, Clone)]
pub struct ReferenceBasis {
    pub k: usize,
    pub m: usize,
    pub m_face: usize,
    pub vol_rule: std::sync::Arc<TriangleRule>,
    pub face_rule: std::sync::Arc<SegmentRule>,
    /// `q̂_i` at volume nodes, `[nv x m]`.
    pub vol_values: DMatrix<f64>,
    /// Reference gradients at volume nodes, each `[nv x m]`.
    pub vol_grads: [DMatrix<f64>; 2],
    /// `2 ŵ_g q̂_i(g)`, i.e. values weighted for the `(1/|K|)∫` product.
    pub vol_weighted: DMatrix<f64>,
    /// `q̂_i` at the face nodes of local face `j` for sign `-1` / `+1`, `[m x nf]`.
    pub face_values: [[DMatrix<f64>; 2]; 3],
    /// `ψ_r` at face nodes, `[m' x nf]`.
    pub face_psi: DMatrix<f64>,
    /// `ψ_r(s_g) w_g`, `[m' x nf]`.
    pub face_psi_weighted: DMatrix<f64>,
    pub div_ref: DMatrix<f64>,
}

impl ReferenceBasis {
    /// Builds the reference tabulations with volume and face rules of
    /// exactness `2k + 3`.
    pub fn new(k: usize) -> Result<Self> {
        let m = num_modes(k);
        let m_face = num_face_modes(k);
        let vol_rule = triangle_rule(2 * k + 3)?;
        let face_rule = segment_rule(2 * k + 3)?;
        let vol_values = dubiner_eval(k, &vol_rule.points).transpose();
        let [gx, gy] = dubiner_grad(k, &vol_rule.points);
        let vol_grads = [gx.transpose(), gy.transpose()];
        let mut vol_weighted = vol_values.clone();
        for (g, w) in vol_rule.weights.iter().enumerate() {
            vol_weighted.row_mut(g).scale_mut(2.0 * w);
        }
        let face_values = std::array::from_fn(|j| {
            [-1i8, 1].map(|sign| {
                let pts: Vec<[f64; 2]> = face_rule
                    .points
                    .iter()
                    .map(|&s| reference_face_point(j, sign, s))
                    .collect();
                dubiner_eval(k, &pts)
            })
        });
        let face_psi = face_basis_eval(k, &face_rule.points);
        let mut face_psi_weighted = face_psi.clone();
        for (g, w) in face_rule.weights.iter().enumerate() {
            face_psi_weighted.column_mut(g).scale_mut(*w);
        }
        let div_ref = {
            let values = vol_values.transpose();
            let grads = [vol_grads[0].transpose(), vol_grads[1].transpose()];
            divergence_from_tabulation(k, &vol_rule, &values, &grads)
        };
        Ok(Self {
            k,
            m,
            m_face,
            vol_rule,
            face_rule,
            vol_values,
            vol_grads,
            vol_weighted,
            face_values,
            face_psi,
            face_psi_weighted,
            div_ref,
        })
    }

    pub fn num_vol_nodes(&self) -> usize {
        self.vol_rule.len()
    }

    pub fn num_face_nodes(&self) -> usize {
        self.face_rule.len()
    }

    /// `q̂` values at the face nodes of local face `j` seen with `sign`.
    pub fn face_values(&self, j: usize, sign: i8) -> &DMatrix<f64> {
        &self.face_values[j][usize::from(sign > 0)]
    }

    /// Index of the first degree-`k` mode.
    pub fn top_degree_start(&self) -> usize {
        self.m - self.m_face
    }
}

/// Geometric data for one element, sampled at the reference nodes.
#[derive(Debug, Clone)]
pub struct ElementGeometry {
    pub elem: usize,
    pub map: AffineMap,
    pub faces: [usize; 3],
    pub signs: [i8; 3],
    pub face_lengths: [f64; 3],
    pub normals: [Point; 3],
    /// Physical coordinates of the volume nodes.
    pub vol_points: Vec<Point>,
    /// Physical coordinates of the face nodes, per local face.
    pub face_points: [Vec<Point>; 3],
}

impl ElementGeometry {
    pub fn new(mesh: &Mesh, elem: usize, reference: &ReferenceBasis) -> Result<Self> {
        let map = mesh.affine_map(elem)?;
        let lf = mesh.elem_faces[elem];
        let vol_points = reference.vol_rule.points.iter().map(|p| map.apply(*p)).collect();
        let face_points = std::array::from_fn(|j| {
            reference
                .face_rule
                .points
                .iter()
                .map(|&s| map.apply(reference_face_point(j, lf[j].sign, s)))
                .collect()
        });
        Ok(Self {
            elem,
            map,
            faces: lf.map(|f| f.face),
            signs: lf.map(|f| f.sign),
            face_lengths: lf.map(|f| mesh.faces[f.face].length),
            normals: std::array::from_fn(|j| mesh.outward_normal(elem, j)),
            vol_points,
            face_points,
        })
    }

    pub fn measure(&self) -> f64 {
        self.map.measure
    }

    pub fn inv_transpose(&self) -> Matrix2<f64> {
        self.map.inv_transpose()
    }
}

/// The `m'` extra RT functions of one element.
#[derive(Debug, Clone)]
pub struct ElementExtraBasis {
    pub elem: usize,
    /// Row `s` expresses `φ_{2m+s}` in terms of `[q_0 e_0, q_0 e_1, ..., q_{m-1} e_1,
    /// x q_{m-m'}, ..., x q_{m-1}]`, shape `[m' x (2m + m')]`.
    pub coefficients: DMatrix<f64>,
    /// Components at volume nodes, each `[m' x nv]`.
    pub vol_values: [DMatrix<f64>; 2],
    /// Outward normal component at the face nodes of each local face, `[m' x nf]`.
    pub face_normal_values: [DMatrix<f64>; 3],
}

const COLLAPSE_TOLERANCE: f64 = 1e-10;

/// Runs Algorithm-1 style modified Gram-Schmidt (two passes) on the candidates
/// `x q_j`, `j` over the degree-`k` modes, against `q_i e_r` and each other.
pub fn build_extra_basis(geom: &ElementGeometry, reference: &ReferenceBasis) -> Result<ElementExtraBasis> {
    let m = reference.m;
    let mp = reference.m_face;
    let dm = 2 * m;
    let nv = reference.num_vol_nodes();
    let top = reference.top_degree_start();
    let two_w: Vec<f64> = reference.vol_rule.weights.iter().map(|w| 2.0 * w).collect();

    let mut coefficients = DMatrix::<f64>::zeros(mp, dm + mp);
    // column u holds extra function u at the volume nodes
    let mut vx = DMatrix::<f64>::zeros(nv, mp);
    let mut vy = DMatrix::<f64>::zeros(nv, mp);
    let mut cur_x = vec![0.0; nv];
    let mut cur_y = vec![0.0; nv];
    let mut record = vec![0.0; dm + mp];

    for s in 0..mp {
        let j = top + s;
        let qj = reference.vol_values.column(j);
        for g in 0..nv {
            cur_x[g] = geom.vol_points[g].x * qj[g];
            cur_y[g] = geom.vol_points[g].y * qj[g];
        }
        record.iter_mut().for_each(|r| *r = 0.0);
        record[dm + s] = 1.0;
        let initial = weighted_norm(&cur_x, &cur_y, &two_w);

        for _pass in 0..2 {
            for i in 0..m {
                let wq = reference.vol_weighted.column(i);
                let wq = wq.as_slice();
                let q = reference.vol_values.column(i);
                let q = q.as_slice();
                let cx = dot(&cur_x, wq);
                axpy(&mut cur_x, -cx, q);
                let cy = dot(&cur_y, wq);
                axpy(&mut cur_y, -cy, q);
                record[2 * i] -= cx;
                record[2 * i + 1] -= cy;
            }
            for u in 0..s {
                let ux = vx.column(u);
                let uy = vy.column(u);
                let (ux, uy) = (ux.as_slice(), uy.as_slice());
                let c: f64 = (0..nv).map(|g| two_w[g] * (cur_x[g] * ux[g] + cur_y[g] * uy[g])).sum();
                axpy(&mut cur_x, -c, ux);
                axpy(&mut cur_y, -c, uy);
                for t in 0..dm + mp {
                    record[t] -= c * coefficients[(u, t)];
                }
            }
        }

        let norm = weighted_norm(&cur_x, &cur_y, &two_w);
        if !(norm > COLLAPSE_TOLERANCE * initial) {
            return Err(Error::GramSchmidtCollapse {
                elem: geom.elem,
                index: s,
                norm,
            });
        }
        for g in 0..nv {
            vx[(g, s)] = cur_x[g] / norm;
            vy[(g, s)] = cur_y[g] / norm;
        }
        for t in 0..dm + mp {
            coefficients[(s, t)] = record[t] / norm;
        }
    }
    let (vx, vy) = (vx.transpose(), vy.transpose());

    let face_normal_values = std::array::from_fn(|j| extra_normal_values(geom, reference, &coefficients, j));
    Ok(ElementExtraBasis {
        elem: geom.elem,
        coefficients,
        vol_values: [vx, vy],
        face_normal_values,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn weighted_norm(x: &[f64], y: &[f64], w: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .zip(w)
        .map(|((a, b), w)| w * (a * a + b * b))
        .sum::<f64>()
        .sqrt()
}

/// `φ_{2m+s} · n` at the nodes of local face `j`, from the coefficient record.
fn extra_normal_values(
    geom: &ElementGeometry,
    reference: &ReferenceBasis,
    coeffs: &DMatrix<f64>,
    j: usize,
) -> DMatrix<f64> {
    let m = reference.m;
    let mp = reference.m_face;
    let n = geom.normals[j];
    let qf = reference.face_values(j, geom.signs[j]);
    let poly = DMatrix::from_fn(mp, m, |s, i| coeffs[(s, 2 * i)] * n.x + coeffs[(s, 2 * i + 1)] * n.y);
    let top = reference.top_degree_start();
    let nf = qf.ncols();
    let cand = DMatrix::from_fn(mp, nf, |u, g| geom.face_points[j][g].dot(&n) * qf[(top + u, g)]);
    let cand_coeffs = coeffs.columns(2 * m, mp);
    poly * qf + cand_coeffs * cand
}

impl ElementExtraBasis {
    /// Divergence of each extra function at the volume nodes, `[m' x nv]`,
    /// using `∇·(x q) = 2 q + x·∇q` on the candidates.
    pub fn divergence_values(&self, geom: &ElementGeometry, reference: &ReferenceBasis) -> DMatrix<f64> {
        extra_divergence_values(&self.coefficients, geom, reference)
    }

    /// Evaluates the extra functions at arbitrary points, given the reference
    /// Dubiner values there (`[m x npts]`) and the physical coordinates.
    pub fn eval_at(&self, m: usize, q_values: &DMatrix<f64>, points: &[Point]) -> [DMatrix<f64>; 2] {
        eval_extra(&self.coefficients, m, q_values, points)
    }
}

/// Divergence of the extra functions at the volume nodes from their
/// coefficient record.
pub fn extra_divergence_values(
    coefficients: &DMatrix<f64>,
    geom: &ElementGeometry,
    reference: &ReferenceBasis,
) -> DMatrix<f64> {
    let m = reference.m;
    let mp = reference.m_face;
    let nv = reference.num_vol_nodes();
    let top = reference.top_degree_start();
    let jit = geom.inv_transpose();
    // physical gradients, [nv x m]
    let gx = &reference.vol_grads[0] * jit[(0, 0)] + &reference.vol_grads[1] * jit[(0, 1)];
    let gy = &reference.vol_grads[0] * jit[(1, 0)] + &reference.vol_grads[1] * jit[(1, 1)];
    let rx = DMatrix::from_fn(mp, m, |s, i| coefficients[(s, 2 * i)]);
    let ry = DMatrix::from_fn(mp, m, |s, i| coefficients[(s, 2 * i + 1)]);
    let cand_div = DMatrix::from_fn(mp, nv, |u, g| {
        let i = top + u;
        let x = geom.vol_points[g];
        2.0 * reference.vol_values[(g, i)] + x.x * gx[(g, i)] + x.y * gy[(g, i)]
    });
    rx * gx.transpose() + ry * gy.transpose() + coefficients.columns(2 * m, mp) * cand_div
}

/// Extra functions from their coefficient record alone, see
/// [`ElementExtraBasis::eval_at`].
pub fn eval_extra(
    coefficients: &DMatrix<f64>,
    m: usize,
    q_values: &DMatrix<f64>,
    points: &[Point],
) -> [DMatrix<f64>; 2] {
    let mp = coefficients.nrows();
    let top = m - mp;
    let rx = DMatrix::from_fn(mp, m, |s, i| coefficients[(s, 2 * i)]);
    let ry = DMatrix::from_fn(mp, m, |s, i| coefficients[(s, 2 * i + 1)]);
    let cc = coefficients.columns(2 * m, mp);
    let np = points.len();
    let cand_x = DMatrix::from_fn(mp, np, |u, g| points[g].x * q_values[(top + u, g)]);
    let cand_y = DMatrix::from_fn(mp, np, |u, g| points[g].y * q_values[(top + u, g)]);
    [rx * q_values + cc * cand_x, ry * q_values + cc * cand_y]
}
