//! Recovery of `u_h` and the full RT flux from face values, error norms and
//! flux consistency checks.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::{
    dubiner_eval, eval_extra, extra_divergence_values, face_basis_eval, ElementGeometry, ReferenceBasis,
};
use crate::error::Result;
use crate::local::{divergence_matrix, ElementMaps, VariantId};
use crate::mesh::{Mesh, Point};
use crate::quadrature::{segment_rule, triangle_rule};

/// `u = sin(2πx) sin(2πy)`.
pub fn sine_solution(x: Point) -> f64 {
    (2.0 * PI * x.x).sin() * (2.0 * PI * x.y).sin()
}

/// `q = −∇u` for [`sine_solution`].
pub fn sine_flux(x: Point) -> [f64; 2] {
    let (sx, cx) = (2.0 * PI * x.x).sin_cos();
    let (sy, cy) = (2.0 * PI * x.y).sin_cos();
    [-2.0 * PI * cx * sy, -2.0 * PI * sx * cy]
}

/// `f = −Δu = 8π² sin(2πx) sin(2πy)`.
pub fn sine_source(x: Point) -> f64 {
    8.0 * PI * PI * sine_solution(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementSolution {
    pub u: DVector<f64>,
    pub q_a: DVector<f64>,
    /// Lifted jump in `V_s` coordinates; empty for the usual variant.
    pub q_s: DVector<f64>,
    /// `q_a ⊕ q_s` in the full `φ` basis.
    pub q: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub variant: VariantId,
    pub k: usize,
    /// Face values over all faces.
    pub face_values: Vec<f64>,
    pub elements: Vec<ElementSolution>,
}

/// Face values of the three local faces of `elem`, `[3m']`.
pub fn element_face_values(mesh: &Mesh, elem: usize, face_values: &[f64], modes: usize) -> DVector<f64> {
    DVector::from_iterator(
        3 * modes,
        mesh.elem_faces[elem]
            .iter()
            .flat_map(|lf| face_values[lf.face * modes..(lf.face + 1) * modes].iter().copied()),
    )
}

/// `u = Uμ û + U^f`, `q_a = Qμ û + Q^f`.
pub fn recover_element(maps: &ElementMaps, uhat: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    (&maps.umu * uhat + &maps.uf, &maps.qmu * uhat + &maps.qf)
}

/// `q_s = L^s (B u − û)`; empty for the usual variant.
pub fn lift_flux_correction(maps: &ElementMaps, u: &DVector<f64>, uhat: &DVector<f64>) -> DVector<f64> {
    if !maps.variant.has_stabilization() {
        return DVector::zeros(0);
    }
    &maps.ls * (&maps.b * u - uhat)
}

pub fn recover(mesh: &Mesh, k: usize, maps: &[ElementMaps], face_values: Vec<f64>, serial: bool) -> Solution {
    let variant = maps.first().map_or(VariantId::Usual, |m| m.variant);
    let one = |mp: &ElementMaps| {
        let uhat = element_face_values(mesh, mp.elem, &face_values, k + 1);
        let (u, q_a) = recover_element(mp, &uhat);
        let q_s = lift_flux_correction(mp, &u, &uhat);
        let mut q = DVector::zeros(q_a.len() + q_s.len());
        q.rows_mut(0, q_a.len()).copy_from(&q_a);
        q.rows_mut(q_a.len(), q_s.len()).copy_from(&q_s);
        ElementSolution { u, q_a, q_s, q }
    };
    let elements = if serial {
        maps.iter().map(one).collect()
    } else {
        maps.par_iter().map(one).collect()
    };
    Solution {
        variant,
        k,
        face_values,
        elements,
    }
}

/// `u_h` and both flux components at reference points of one element.
pub fn evaluate_element(
    mesh: &Mesh,
    k: usize,
    maps: &ElementMaps,
    sol: &ElementSolution,
    ref_points: &[[f64; 2]],
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let map = mesh.affine_map(maps.elem)?;
    let phys: Vec<Point> = ref_points.iter().map(|p| map.apply(*p)).collect();
    let q = dubiner_eval(k, ref_points);
    Ok(evaluate_with_values(k, maps, sol, &q, &phys))
}

fn evaluate_with_values(
    k: usize,
    maps: &ElementMaps,
    sol: &ElementSolution,
    q: &DMatrix<f64>,
    phys: &[Point],
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let m = q.nrows();
    let u = q.tr_mul(&sol.u);
    let cx = DVector::from_fn(m, |i, _| sol.q[2 * i]);
    let cy = DVector::from_fn(m, |i, _| sol.q[2 * i + 1]);
    let mut qx = q.tr_mul(&cx);
    let mut qy = q.tr_mul(&cy);
    let ce = sol.q.rows(2 * m, k + 1);
    let [ex, ey] = eval_extra(&maps.extra_coefficients, m, q, phys);
    qx += ex.tr_mul(&ce);
    qy += ey.tr_mul(&ce);
    (u, qx, qy)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    pub err_u: f64,
    pub err_q: f64,
    pub norm_u: f64,
    pub norm_q: f64,
}

/// L2 errors against exact `u` and `q` with the degree `2k+6` rule.
pub fn l2_errors(
    mesh: &Mesh,
    maps: &[ElementMaps],
    solution: &Solution,
    exact_u: &(dyn Fn(Point) -> f64 + Sync),
    exact_q: &(dyn Fn(Point) -> [f64; 2] + Sync),
    serial: bool,
) -> Result<ErrorReport> {
    let k = solution.k;
    let rule = triangle_rule(2 * k + 6)?;
    let q = dubiner_eval(k, &rule.points);
    let one = |(mp, sol): (&ElementMaps, &ElementSolution)| -> Result<[f64; 4]> {
        let map = mesh.affine_map(mp.elem)?;
        let phys: Vec<Point> = rule.points.iter().map(|p| map.apply(*p)).collect();
        let (u, qx, qy) = evaluate_with_values(k, mp, sol, &q, &phys);
        let mut acc = [0.0; 4];
        for (g, x) in phys.iter().enumerate() {
            let w = rule.weights[g] * map.det;
            let qe = exact_q(*x);
            acc[0] += w * (u[g] - exact_u(*x)).powi(2);
            acc[1] += w * ((qx[g] - qe[0]).powi(2) + (qy[g] - qe[1]).powi(2));
            acc[2] += w * u[g] * u[g];
            acc[3] += w * (qx[g] * qx[g] + qy[g] * qy[g]);
        }
        Ok(acc)
    };
    let parts: Vec<Result<[f64; 4]>> = if serial {
        maps.iter().zip(&solution.elements).map(one).collect()
    } else {
        maps.par_iter().zip(&solution.elements).map(one).collect()
    };
    let mut tot = [0.0; 4];
    for p in parts {
        let p = p?;
        for i in 0..4 {
            tot[i] += p[i];
        }
    }
    Ok(ErrorReport {
        err_u: tot[0].sqrt(),
        err_q: tot[1].sqrt(),
        norm_u: tot[2].sqrt(),
        norm_q: tot[3].sqrt(),
    })
}

/// Largest `|∫_F ψ_r (q⁺·n⁺ + q⁻·n⁻)|` over interior faces and modes.
pub fn normal_jump_residual(mesh: &Mesh, maps: &[ElementMaps], solution: &Solution) -> Result<f64> {
    let k = solution.k;
    let rule = segment_rule(2 * k + 6)?;
    let psi = face_basis_eval(k, &rule.points);
    let mut worst = 0.0f64;
    for (fi, face) in mesh.faces.iter().enumerate() {
        if face.elements.len() != 2 {
            continue;
        }
        let mut moments = vec![0.0; k + 1];
        for &e in &face.elements {
            let j = mesh.elem_faces[e]
                .iter()
                .position(|lf| lf.face == fi)
                .expect("face adjacency");
            let n = mesh.outward_normal(e, j);
            let pts: Vec<[f64; 2]> = rule
                .points
                .iter()
                .map(|&s| mesh.face_reference_point(e, j, s))
                .collect();
            let (_, qx, qy) = evaluate_element(mesh, k, &maps[e], &solution.elements[e], &pts)?;
            for (g, w) in rule.weights.iter().enumerate() {
                let qn = qx[g] * n.x + qy[g] * n.y;
                for (r, mom) in moments.iter_mut().enumerate() {
                    *mom += face.length * w * psi[(r, g)] * qn;
                }
            }
        }
        worst = moments.iter().fold(worst, |a, b| a.max(b.abs()));
    }
    Ok(worst)
}

/// Largest `|∫_K (∇·q_h) q_i − |K| (P f)_i|` over elements and modes.
pub fn conservation_residual(
    mesh: &Mesh,
    reference: &ReferenceBasis,
    maps: &[ElementMaps],
    solution: &Solution,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for (mp, sol) in maps.iter().zip(&solution.elements) {
        let geom = ElementGeometry::new(mesh, mp.elem, reference)?;
        let div = extra_divergence_values(&mp.extra_coefficients, &geom, reference);
        let d = divergence_matrix(VariantId::Usual, &geom, reference, Some(&div))?;
        let r = d * &sol.q - &mp.pf * mp.measure;
        worst = worst.max(r.amax());
    }
    Ok(worst)
}

/// Locates the element containing `x` and its reference coordinates.
pub fn locate(mesh: &Mesh, x: Point) -> Result<Option<(usize, [f64; 2])>> {
    const TOL: f64 = 1e-12;
    for e in 0..mesh.num_elements() {
        let map = mesh.affine_map(e)?;
        let r = map.inv_jacobian * (x - map.translation);
        if r.x >= -TOL && r.y >= -TOL && r.x + r.y <= 1.0 + TOL {
            return Ok(Some((e, [r.x, r.y])));
        }
    }
    Ok(None)
}

/// `(x, y, u, q1, q2)` on a uniform `(n+1) x (n+1)` grid over the unit square.
pub fn sample_grid(mesh: &Mesh, maps: &[ElementMaps], solution: &Solution, n: usize) -> Result<Vec<[f64; 5]>> {
    let mut rows = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            let x = Point::new(i as f64 / n as f64, j as f64 / n as f64);
            if let Some((e, r)) = locate(mesh, x)? {
                let (u, qx, qy) = evaluate_element(mesh, solution.k, &maps[e], &solution.elements[e], &[r])?;
                rows.push([x.x, x.y, u[0], qx[0], qy[0]]);
            }
        }
    }
    Ok(rows)
}

pub fn write_samples_csv(w: &mut impl Write, rows: &[[f64; 5]]) -> Result<()> {
    writeln!(w, "x,y,u,q1,q2")?;
    for r in rows {
        writeln!(w, "{},{},{:.12e},{:.12e},{:.12e}", r[0], r[1], r[2], r[3], r[4])?;
    }
    Ok(())
}
