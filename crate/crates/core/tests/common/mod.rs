//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use hrt::basis::{
    build_extra_basis, dubiner_eval, dubiner_grad, eval_extra, extra_divergence_values, face_basis_eval, num_modes,
    ElementGeometry, ReferenceBasis,
};
use hrt::local::{divergence_matrix, lifting_matrix, VariantId};
use hrt::mesh::{Mesh, Point};
use hrt::quadrature::{segment_rule, triangle_rule};
use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type ScalarFn<'a> = &'a (dyn Fn(Point) -> f64 + Sync);

/// Single-element meshes with random vertices in the unit square.
pub fn random_triangles(seed: u64, count: usize) -> Vec<Mesh> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<Point> = (0..3)
            .map(|_| Vector2::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
            .collect();
        let cross = (v[1] - v[0]).perp(&(v[2] - v[0]));
        if cross.abs() < 0.04 {
            continue;
        }
        if cross < 0.0 {
            v.swap(1, 2);
        }
        out.push(Mesh::from_triangles(v, vec![[0, 1, 2]]).unwrap());
    }
    out
}

/// Both components of all `n` RT functions of `elem` at reference points,
/// each `[n x np]`, plus the physical points.
pub fn rt_values(
    mesh: &Mesh,
    elem: usize,
    k: usize,
    coefficients: &DMatrix<f64>,
    pts: &[[f64; 2]],
) -> [DMatrix<f64>; 2] {
    let map = mesh.affine_map(elem).unwrap();
    let phys: Vec<Point> = pts.iter().map(|p| map.apply(*p)).collect();
    let q = dubiner_eval(k, pts);
    let m = num_modes(k);
    let n = 2 * m + k + 1;
    let [ex, ey] = eval_extra(coefficients, m, &q, &phys);
    let mut vx = DMatrix::zeros(n, pts.len());
    let mut vy = DMatrix::zeros(n, pts.len());
    for i in 0..m {
        vx.row_mut(2 * i).copy_from(&q.row(i));
        vy.row_mut(2 * i + 1).copy_from(&q.row(i));
    }
    vx.rows_mut(2 * m, k + 1).copy_from(&ex);
    vy.rows_mut(2 * m, k + 1).copy_from(&ey);
    [vx, vy]
}

fn extra_coefficients(mesh: &Mesh, elem: usize, reference: &ReferenceBasis) -> (ElementGeometry, DMatrix<f64>) {
    let geom = ElementGeometry::new(mesh, elem, reference).unwrap();
    let extra = build_extra_basis(&geom, reference).unwrap();
    (geom, extra.coefficients)
}

/// `max |G/|K| − I|` for the full RT basis, Gram matrix by a fresh rule.
pub fn gram_defect(mesh: &Mesh, reference: &ReferenceBasis) -> f64 {
    let k = reference.k;
    let (geom, coeffs) = extra_coefficients(mesh, 0, reference);
    let rule = triangle_rule(2 * k + 4).unwrap();
    let [vx, vy] = rt_values(mesh, 0, k, &coeffs, &rule.points);
    let n = vx.nrows();
    let mut g = DMatrix::zeros(n, n);
    for (p, w) in rule.weights.iter().enumerate() {
        let wd = w * geom.map.det;
        for i in 0..n {
            for j in 0..n {
                g[(i, j)] += wd * (vx[(i, p)] * vx[(j, p)] + vy[(i, p)] * vy[(j, p)]);
            }
        }
    }
    (g / geom.measure() - DMatrix::identity(n, n)).amax()
}

/// `max |(φ_s, ∇w)_K| / |K|` over `V_s` and the Dubiner basis of `W`.
pub fn gradient_orthogonality_defect(mesh: &Mesh, reference: &ReferenceBasis, variant: VariantId) -> f64 {
    let k = reference.k;
    let (geom, coeffs) = extra_coefficients(mesh, 0, reference);
    let rule = triangle_rule(2 * k + 4).unwrap();
    let [vx, vy] = rt_values(mesh, 0, k, &coeffs, &rule.points);
    let [gx, gy] = dubiner_grad(k, &rule.points);
    let jit = geom.inv_transpose();
    let n = vx.nrows();
    let ns = variant.n_s(k);
    let mut worst = 0.0f64;
    for s in n - ns..n {
        for i in 0..num_modes(k) {
            let mut acc = 0.0;
            for (p, w) in rule.weights.iter().enumerate() {
                let dx = jit[(0, 0)] * gx[(i, p)] + jit[(0, 1)] * gy[(i, p)];
                let dy = jit[(1, 0)] * gx[(i, p)] + jit[(1, 1)] * gy[(i, p)];
                acc += w * geom.map.det * (vx[(s, p)] * dx + vy[(s, p)] * dy);
            }
            worst = worst.max(acc.abs() / geom.measure());
        }
    }
    worst
}

/// Relative difference between the recombined `D¹` block and `∫ q_i ∂_j q_i'`
/// integrated directly with physical gradients.
pub fn divergence_oracle_defect(mesh: &Mesh, reference: &ReferenceBasis) -> f64 {
    let k = reference.k;
    let geom = ElementGeometry::new(mesh, 0, reference).unwrap();
    let d = divergence_matrix(VariantId::Stab1, &geom, reference, None).unwrap();
    let rule = triangle_rule(2 * k + 2).unwrap();
    let q = dubiner_eval(k, &rule.points);
    let [gx, gy] = dubiner_grad(k, &rule.points);
    let jit = geom.inv_transpose();
    let m = num_modes(k);
    let mut oracle = DMatrix::zeros(m, 2 * m);
    for (p, w) in rule.weights.iter().enumerate() {
        let wd = w * geom.map.det;
        for ip in 0..m {
            let dx = jit[(0, 0)] * gx[(ip, p)] + jit[(0, 1)] * gy[(ip, p)];
            let dy = jit[(1, 0)] * gx[(ip, p)] + jit[(1, 1)] * gy[(ip, p)];
            for i in 0..m {
                oracle[(i, 2 * ip)] += wd * q[(i, p)] * dx;
                oracle[(i, 2 * ip + 1)] += wd * q[(i, p)] * dy;
            }
        }
    }
    (d - &oracle).amax() / oracle.amax()
}

/// `max |(L(μ), φ_s)_K − ⟨μ, φ_s·n⟩_{∂K}|` for random `μ`, both sides by
/// direct quadrature of the basis functions.
pub fn lifting_defect(mesh: &Mesh, reference: &ReferenceBasis, variant: VariantId, seed: u64) -> f64 {
    let k = reference.k;
    let mp = k + 1;
    let (geom, coeffs) = extra_coefficients(mesh, 0, reference);
    let extra = build_extra_basis(&geom, reference).unwrap();
    let ls = lifting_matrix(variant, &geom, reference, &extra).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = DVector::from_fn(3 * mp, |_, _| rng.gen_range(-1.0..1.0));
    let lifted = &ls * &mu;
    let n = 2 * num_modes(k) + mp;
    let ns = variant.n_s(k);
    let first = n - ns;

    let rule = triangle_rule(2 * k + 4).unwrap();
    let [vx, vy] = rt_values(mesh, 0, k, &coeffs, &rule.points);
    let seg = segment_rule(2 * k + 4).unwrap();
    let psi = face_basis_eval(k, &seg.points);
    let mut worst = 0.0f64;
    for s in 0..ns {
        let mut lhs = 0.0;
        for (p, w) in rule.weights.iter().enumerate() {
            let (mut lx, mut ly) = (0.0, 0.0);
            for t in 0..ns {
                lx += lifted[t] * vx[(first + t, p)];
                ly += lifted[t] * vy[(first + t, p)];
            }
            lhs += w * geom.map.det * (lx * vx[(first + s, p)] + ly * vy[(first + s, p)]);
        }
        let mut rhs = 0.0;
        for j in 0..3 {
            let pts: Vec<[f64; 2]> = seg.points.iter().map(|&t| mesh.face_reference_point(0, j, t)).collect();
            let [fx, fy] = rt_values(mesh, 0, k, &coeffs, &pts);
            let nrm = mesh.outward_normal(0, j);
            let len = mesh.faces[mesh.elem_faces[0][j].face].length;
            for (g, w) in seg.weights.iter().enumerate() {
                let muv: f64 = (0..mp).map(|r| mu[j * mp + r] * psi[(r, g)]).sum();
                rhs += len * w * muv * (fx[(first + s, g)] * nrm.x + fy[(first + s, g)] * nrm.y);
            }
        }
        worst = worst.max((lhs - rhs).abs());
    }
    worst
}

#[derive(Debug, Clone)]
pub struct MonolithicSolution {
    pub u: Vec<DVector<f64>>,
    pub q: Vec<DVector<f64>>,
    pub face_values: Vec<f64>,
}

/// Un-condensed mixed hybrid system over `(q, u)` per element and `û` on
/// interior faces, assembled and solved densely.
pub fn monolithic_solve(mesh: &Mesh, k: usize, f: ScalarFn, g: ScalarFn) -> MonolithicSolution {
    let reference = ReferenceBasis::new(k).unwrap();
    let m = num_modes(k);
    let mp = k + 1;
    let n = 2 * m + mp;
    let ne = mesh.num_elements();
    let block = n + m;

    // Dirichlet face projection
    let seg_d = segment_rule(2 * k + 6).unwrap();
    let psi_d = face_basis_eval(k, &seg_d.points);
    let mut face_values = vec![0.0; mesh.num_faces() * mp];
    let mut free_index = vec![None; mesh.num_faces()];
    let mut nfree = 0;
    for (fi, face) in mesh.faces.iter().enumerate() {
        if face.is_dirichlet {
            for (p, (&s, &w)) in seg_d.points.iter().zip(&seg_d.weights).enumerate() {
                let val = g(mesh.face_point(fi, s));
                for r in 0..mp {
                    face_values[fi * mp + r] += w * psi_d[(r, p)] * val;
                }
            }
        } else {
            free_index[fi] = Some(nfree);
            nfree += 1;
        }
    }

    let size = ne * block + nfree * mp;
    let mut a = DMatrix::<f64>::zeros(size, size);
    let mut rhs = DVector::<f64>::zeros(size);
    let mass_rule = triangle_rule(2 * k + 4).unwrap();
    let seg = segment_rule(2 * k + 4).unwrap();
    let psi = face_basis_eval(k, &seg.points);

    for e in 0..ne {
        let geom = ElementGeometry::new(mesh, e, &reference).unwrap();
        let extra = build_extra_basis(&geom, &reference).unwrap();
        let det = geom.map.det;
        let q0 = e * block;
        let u0 = q0 + n;

        let [vx, vy] = rt_values(mesh, e, k, &extra.coefficients, &mass_rule.points);
        for (p, w) in mass_rule.weights.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    a[(q0 + i, q0 + j)] += w * det * (vx[(i, p)] * vx[(j, p)] + vy[(i, p)] * vy[(j, p)]);
                }
            }
        }

        // divergence of every φ at the solver's volume nodes
        let jit = geom.inv_transpose();
        let nv = reference.num_vol_nodes();
        let mut div = DMatrix::zeros(n, nv);
        for i in 0..m {
            for p in 0..nv {
                let (gx, gy) = (reference.vol_grads[0][(p, i)], reference.vol_grads[1][(p, i)]);
                div[(2 * i, p)] = jit[(0, 0)] * gx + jit[(0, 1)] * gy;
                div[(2 * i + 1, p)] = jit[(1, 0)] * gx + jit[(1, 1)] * gy;
            }
        }
        div.rows_mut(2 * m, mp)
            .copy_from(&extra_divergence_values(&extra.coefficients, &geom, &reference));
        for (p, w) in reference.vol_rule.weights.iter().enumerate() {
            let fx = f(geom.vol_points[p]);
            for l in 0..m {
                let ql = reference.vol_values[(p, l)];
                rhs[u0 + l] += w * det * fx * ql;
                for j in 0..n {
                    let dlj = w * det * ql * div[(j, p)];
                    a[(q0 + j, u0 + l)] -= dlj;
                    a[(u0 + l, q0 + j)] += dlj;
                }
            }
        }

        for j in 0..3 {
            let fi = mesh.elem_faces[e][j].face;
            let pts: Vec<[f64; 2]> = seg.points.iter().map(|&t| mesh.face_reference_point(e, j, t)).collect();
            let [fx, fy] = rt_values(mesh, e, k, &extra.coefficients, &pts);
            let nrm = mesh.outward_normal(e, j);
            let len = mesh.faces[fi].length;
            let mut c = DMatrix::<f64>::zeros(n, mp);
            for (p, w) in seg.weights.iter().enumerate() {
                for i in 0..n {
                    let phin = fx[(i, p)] * nrm.x + fy[(i, p)] * nrm.y;
                    for r in 0..mp {
                        c[(i, r)] += len * w * psi[(r, p)] * phin;
                    }
                }
            }
            match free_index[fi] {
                Some(b) => {
                    let h0 = ne * block + b * mp;
                    for i in 0..n {
                        for r in 0..mp {
                            a[(q0 + i, h0 + r)] += c[(i, r)];
                            a[(h0 + r, q0 + i)] += c[(i, r)];
                        }
                    }
                }
                None => {
                    for i in 0..n {
                        for r in 0..mp {
                            rhs[q0 + i] -= c[(i, r)] * face_values[fi * mp + r];
                        }
                    }
                }
            }
        }
    }

    let x = a.lu().solve(&rhs).expect("monolithic system is singular");
    let u = (0..ne).map(|e| x.rows(e * block + n, m).into_owned()).collect();
    let q = (0..ne).map(|e| x.rows(e * block, n).into_owned()).collect();
    for (fi, b) in free_index.iter().enumerate() {
        if let Some(b) = b {
            for r in 0..mp {
                face_values[fi * mp + r] = x[ne * block + b * mp + r];
            }
        }
    }
    MonolithicSolution { u, q, face_values }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}
