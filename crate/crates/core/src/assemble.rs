//! Element matrices, global face-dof system and its solution.

use std::fmt;
use std::io::Write;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::face_basis_eval;
use crate::error::{Error, Result};
use crate::local::{ElementMaps, VariantId};
use crate::mesh::{Mesh, Point};
use crate::quadrature::segment_rule;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ElementOptions {
    /// Adds the lifted-jump Gram term to the Stab-1 element matrix. The
    /// Stab-1 jump lifting vanishes for `μ` in the range of `Uμ`, so both
    /// settings give the same matrix up to round-off.
    pub stab1_jump_term: bool,
}

impl ElementOptions {
    pub fn uses_jump_term(&self, variant: VariantId) -> bool {
        match variant {
            VariantId::Usual => false,
            VariantId::Stab1 => self.stab1_jump_term,
            VariantId::Stab2 => true,
        }
    }
}

/// `A = |K| Qμᵀ Qμ (+ |K| Jᵀ J)`, `b = |K| Uμᵀ P f`, with
/// `J = L^s (B Uμ − I)`.
pub fn element_matrix_vector(sys: &ElementMaps, options: ElementOptions) -> (DMatrix<f64>, DVector<f64>) {
    let mut a = sys.qmu.tr_mul(&sys.qmu) * sys.measure;
    if options.uses_jump_term(sys.variant) {
        let mut bu = &sys.b * &sys.umu;
        for i in 0..bu.nrows() {
            bu[(i, i)] -= 1.0;
        }
        let jump = &sys.ls * bu;
        a += jump.tr_mul(&jump) * sys.measure;
    }
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }
    let b = sys.umu.tr_mul(&sys.pf) * sys.measure;
    (a, b)
}

/// Numbering of face dofs. Dirichlet faces carry no global column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DofMap {
    pub modes_per_face: usize,
    face_block: Vec<Option<usize>>,
    num_free_faces: usize,
}

impl DofMap {
    pub fn new(mesh: &Mesh, k: usize) -> Self {
        let mut next = 0;
        let face_block = mesh
            .faces
            .iter()
            .map(|f| {
                if f.is_dirichlet {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect();
        DofMap {
            modes_per_face: k + 1,
            face_block,
            num_free_faces: next,
        }
    }

    pub fn num_free(&self) -> usize {
        self.num_free_faces * self.modes_per_face
    }

    pub fn num_faces(&self) -> usize {
        self.face_block.len()
    }

    /// Global column of `(face, mode)`, or `None` on a Dirichlet face.
    pub fn global(&self, face: usize, mode: usize) -> Option<usize> {
        self.face_block[face].map(|b| b * self.modes_per_face + mode)
    }

    /// Index into the full face vector of length `num_faces * m'`.
    pub fn full_index(&self, face: usize, mode: usize) -> usize {
        face * self.modes_per_face + mode
    }
}

/// L2 projection of `g` onto each Dirichlet face's `ψ` space, stored in a
/// vector over all faces (zero on interior faces).
pub fn dirichlet_face_values(mesh: &Mesh, k: usize, g: &(dyn Fn(Point) -> f64 + Sync)) -> Result<Vec<f64>> {
    let mp = k + 1;
    let rule = segment_rule(2 * k + 6)?;
    let psi = face_basis_eval(k, &rule.points);
    let mut out = vec![0.0; mesh.num_faces() * mp];
    for (fi, face) in mesh.faces.iter().enumerate() {
        if !face.is_dirichlet {
            continue;
        }
        for (g_idx, (&s, &w)) in rule.points.iter().zip(&rule.weights).enumerate() {
            let val = g(mesh.face_point(fi, s));
            for r in 0..mp {
                out[fi * mp + r] += w * psi[(r, g_idx)] * val;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GlobalSystem {
    pub dofs: DofMap,
    /// Lower triangle of `A`.
    pub matrix: SparseColMat<usize, f64>,
    pub rhs: Vec<f64>,
    /// Face values over all faces; Dirichlet entries fixed, others zero.
    pub dirichlet: Vec<f64>,
}

impl GlobalSystem {
    pub fn size(&self) -> usize {
        self.rhs.len()
    }

    pub fn nnz_lower(&self) -> usize {
        self.matrix.as_ref().val().len()
    }

    /// `y = A x` from the stored lower triangle.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let a = self.matrix.as_ref();
        let col_ptr = a.symbolic().col_ptr();
        let row_idx = a.symbolic().row_idx();
        let val = a.val();
        let mut y = vec![0.0; x.len()];
        for j in 0..x.len() {
            for p in col_ptr[j]..col_ptr[j + 1] {
                let i = row_idx[p];
                y[i] += val[p] * x[j];
                if i != j {
                    y[j] += val[p] * x[i];
                }
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.size();
        let a = self.matrix.as_ref();
        let col_ptr = a.symbolic().col_ptr();
        let row_idx = a.symbolic().row_idx();
        let val = a.val();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            for p in col_ptr[j]..col_ptr[j + 1] {
                out[(row_idx[p], j)] = val[p];
                out[(j, row_idx[p])] = val[p];
            }
        }
        out
    }

    pub fn relative_residual(&self, x: &[f64]) -> f64 {
        let ax = self.apply(x);
        let r: f64 = ax
            .iter()
            .zip(&self.rhs)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let nb: f64 = self.rhs.iter().map(|b| b * b).sum::<f64>().sqrt();
        if nb == 0.0 {
            r
        } else {
            r / nb
        }
    }

    /// Writes the lower triangle in Matrix Market `symmetric` format.
    pub fn write_matrix_market(&self, w: &mut impl Write) -> Result<()> {
        let a = self.matrix.as_ref();
        let col_ptr = a.symbolic().col_ptr();
        let row_idx = a.symbolic().row_idx();
        let val = a.val();
        writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
        writeln!(w, "{} {} {}", self.size(), self.size(), val.len())?;
        for j in 0..self.size() {
            for p in col_ptr[j]..col_ptr[j + 1] {
                writeln!(w, "{} {} {:.17e}", row_idx[p] + 1, j + 1, val[p])?;
            }
        }
        Ok(())
    }

    pub fn write_rhs(&self, w: &mut impl Write) -> Result<()> {
        for b in &self.rhs {
            writeln!(w, "{b:.17e}")?;
        }
        Ok(())
    }

    /// Expands free dofs to a vector over all faces.
    pub fn expand(&self, free: &[f64]) -> Vec<f64> {
        let mut full = self.dirichlet.clone();
        let mp = self.dofs.modes_per_face;
        for f in 0..self.dofs.num_faces() {
            for r in 0..mp {
                if let Some(g) = self.dofs.global(f, r) {
                    full[f * mp + r] = free[g];
                }
            }
        }
        full
    }
}

fn local_face_indices(mesh: &Mesh, elem: usize, dofs: &DofMap) -> Vec<(usize, Option<usize>)> {
    let mp = dofs.modes_per_face;
    let mut out = Vec::with_capacity(3 * mp);
    for lf in &mesh.elem_faces[elem] {
        for r in 0..mp {
            out.push((dofs.full_index(lf.face, r), dofs.global(lf.face, r)));
        }
    }
    out
}

/// Element matrices for all local systems, in element order.
pub fn element_contributions(
    locals: &[ElementMaps],
    options: ElementOptions,
    serial: bool,
) -> Vec<(DMatrix<f64>, DVector<f64>)> {
    if serial {
        locals.iter().map(|s| element_matrix_vector(s, options)).collect()
    } else {
        locals.par_iter().map(|s| element_matrix_vector(s, options)).collect()
    }
}

/// Assembles the condensed global system from element contributions given in
/// element order. `dirichlet` holds face values over all faces.
pub fn assemble_global(
    mesh: &Mesh,
    k: usize,
    contributions: &[(DMatrix<f64>, DVector<f64>)],
    dirichlet: Vec<f64>,
) -> Result<GlobalSystem> {
    let dofs = DofMap::new(mesh, k);
    let mp = k + 1;
    if contributions.len() != mesh.num_elements() {
        return Err(Error::InvalidMesh(format!(
            "{} element contributions for {} elements",
            contributions.len(),
            mesh.num_elements()
        )));
    }
    if dirichlet.len() != mesh.num_faces() * mp {
        return Err(Error::Config("Dirichlet vector length mismatch".into()));
    }
    let n = dofs.num_free();
    let mut rhs = vec![0.0; n];
    let mut triplets = Vec::with_capacity(contributions.len() * 9 * mp * mp / 2 + n);
    for (elem, (a, b)) in contributions.iter().enumerate() {
        let idx = local_face_indices(mesh, elem, &dofs);
        if a.nrows() != idx.len() {
            return Err(Error::DofCollision {
                face: mesh.elem_faces[elem][0].face,
                mode: a.nrows(),
            });
        }
        for (i, &(_, gi)) in idx.iter().enumerate() {
            let Some(gi) = gi else { continue };
            rhs[gi] += b[i];
            for (j, &(fj, gj)) in idx.iter().enumerate() {
                match gj {
                    Some(gj) if gi >= gj => triplets.push(Triplet::new(gi, gj, a[(i, j)])),
                    Some(_) => {}
                    None => rhs[gi] -= a[(i, j)] * dirichlet[fj],
                }
            }
        }
    }
    let matrix = SparseColMat::try_new_from_triplets(n, n, &triplets)
        .map_err(|e| Error::GlobalFactorization(format!("sparse assembly failed: {e:?}")))?;
    Ok(GlobalSystem {
        dofs,
        matrix,
        rhs,
        dirichlet,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverBackend {
    SparseCholesky,
    ConjugateGradient,
}

impl fmt::Display for SolverBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverBackend::SparseCholesky => "sparse-cholesky-amd",
            SolverBackend::ConjugateGradient => "jacobi-cg",
        })
    }
}

#[derive(Debug, Clone)]
pub struct GlobalSolution {
    /// Face values over all faces, Dirichlet values included.
    pub face_values: Vec<f64>,
    pub free: Vec<f64>,
    pub backend: SolverBackend,
    pub relative_residual: f64,
}

/// Solves `A û = b`, preferring sparse Cholesky and falling back to
/// Jacobi-preconditioned CG if the factorization breaks down.
pub fn solve_global(system: &GlobalSystem) -> Result<GlobalSolution> {
    let n = system.size();
    let (free, backend) = if n == 0 {
        (vec![], SolverBackend::SparseCholesky)
    } else {
        match system.matrix.as_ref().sp_cholesky(Side::Lower) {
            Ok(llt) => {
                let mut x = Mat::from_fn(n, 1, |i, _| system.rhs[i]);
                llt.solve_in_place(x.as_mut());
                ((0..n).map(|i| x[(i, 0)]).collect(), SolverBackend::SparseCholesky)
            }
            Err(_) => (
                conjugate_gradient(system, 1e-12, 10 * n + 100)?,
                SolverBackend::ConjugateGradient,
            ),
        }
    };
    let relative_residual = system.relative_residual(&free);
    if !relative_residual.is_finite() || relative_residual > 1e-10 {
        return Err(Error::GlobalFactorization(format!(
            "relative residual {relative_residual:e}"
        )));
    }
    Ok(GlobalSolution {
        face_values: system.expand(&free),
        free,
        backend,
        relative_residual,
    })
}

/// Jacobi-preconditioned conjugate gradients.
pub fn conjugate_gradient(system: &GlobalSystem, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = system.size();
    let a = system.matrix.as_ref();
    let col_ptr = a.symbolic().col_ptr();
    let row_idx = a.symbolic().row_idx();
    let mut diag = vec![0.0; n];
    for j in 0..n {
        for p in col_ptr[j]..col_ptr[j + 1] {
            if row_idx[p] == j {
                diag[j] = a.val()[p];
            }
        }
    }
    if diag.iter().any(|&d| d <= 0.0) {
        return Err(Error::GlobalFactorization("non-positive diagonal".into()));
    }
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let bnorm = dot(&system.rhs, &system.rhs).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = system.rhs.clone();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for _ in 0..max_iter {
        let ap = system.apply(&p);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= tol * bnorm {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::GlobalFactorization(format!(
        "CG did not converge in {max_iter} iterations"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::ReferenceBasis;
    use crate::local::{build_local_system, LocalPhaseTimes, LocalSystem};
    use crate::mesh::build_uniform_mesh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine_rhs(x: Point) -> f64 {
        let pi = std::f64::consts::PI;
        8.0 * pi * pi * (2.0 * pi * x.x).sin() * (2.0 * pi * x.y).sin()
    }

    fn locals(mesh: &Mesh, k: usize, v: VariantId, f: &(dyn Fn(Point) -> f64 + Sync)) -> Vec<LocalSystem> {
        let reference = ReferenceBasis::new(k).unwrap();
        let mut t = LocalPhaseTimes::default();
        (0..mesh.num_elements())
            .map(|e| build_local_system(v, mesh, e, &reference, f, &mut t).unwrap())
            .collect()
    }

    fn system(mesh: &Mesh, k: usize, v: VariantId, f: &(dyn Fn(Point) -> f64 + Sync)) -> GlobalSystem {
        let ls: Vec<ElementMaps> = locals(mesh, k, v, f).into_iter().map(LocalSystem::into_maps).collect();
        let contrib = element_contributions(&ls, ElementOptions::default(), true);
        assemble_global(mesh, k, &contrib, vec![0.0; mesh.num_faces() * (k + 1)]).unwrap()
    }

    #[test]
    fn two_element_mesh_gives_scalar_system() {
        let mesh = build_uniform_mesh(1).unwrap();
        for v in VariantId::ALL {
            let sys = system(&mesh, 0, v, &sine_rhs);
            assert_eq!(sys.size(), 1);
            let a = sys.to_dense()[(0, 0)];
            assert!(a > 0.0);
            let sol = solve_global(&sys).unwrap();
            assert!((sol.free[0] - sys.rhs[0] / a).abs() <= 1e-14 * (sys.rhs[0] / a).abs().max(1e-300));
        }
    }

    #[test]
    fn sixteen_mesh_k2_size() {
        let mesh = build_uniform_mesh(16).unwrap();
        let sys = system(&mesh, 2, VariantId::Stab1, &sine_rhs);
        assert_eq!(sys.size(), 736 * 3);
        assert_eq!(sys.dofs.num_faces(), 800);
    }

    #[test]
    fn element_matrix_symmetric_and_constant_in_kernel() {
        let mesh = build_uniform_mesh(2).unwrap();
        for k in [1, 3] {
            for v in VariantId::ALL {
                for sys in locals(&mesh, k, v, &|_| 0.0).into_iter().map(LocalSystem::into_maps) {
                    let (a, _) = element_matrix_vector(&sys, ElementOptions::default());
                    assert_eq!(a, a.transpose());
                    let mut mu = DVector::zeros(3 * (k + 1));
                    for j in 0..3 {
                        mu[j * (k + 1)] = 1.7;
                    }
                    let qm = &sys.qmu * &mu;
                    let mut e = sys.measure * qm.norm_squared();
                    if v.has_stabilization() {
                        let jump = &sys.ls * (&sys.b * (&sys.umu * &mu) - &mu);
                        e += sys.measure * jump.norm_squared();
                    }
                    assert!(e <= 1e-20, "{v} k={k}: {e}");
                    let e_mat = (mu.transpose() * &a * &mu)[0];
                    assert!(e_mat.abs() <= 1e-13 * a.amax(), "{v} k={k}: {e_mat}");
                }
            }
        }
    }

    #[test]
    fn cross_variant_element_energy() {
        let mesh = build_uniform_mesh(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for k in [1, 2, 4] {
            let all: Vec<Vec<LocalSystem>> = VariantId::ALL.iter().map(|&v| locals(&mesh, k, v, &|_| 0.0)).collect();
            for e in [0, 7, 13] {
                let mu = DVector::from_fn(3 * (k + 1), |_, _| rng.gen_range(-1.0..1.0));
                let energies: Vec<f64> = all
                    .iter()
                    .map(|ls| {
                        let (a, _) = element_matrix_vector(&ls[e].maps(), ElementOptions::default());
                        (mu.transpose() * a * &mu)[0]
                    })
                    .collect();
                for en in &energies[1..] {
                    assert!(
                        (en - energies[0]).abs() <= 1e-9 * energies[0].abs(),
                        "k={k}: {energies:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn stab1_jump_term_is_inert() {
        let mesh = build_uniform_mesh(3).unwrap();
        for k in [1, 3, 5] {
            for sys in locals(&mesh, k, VariantId::Stab1, &|_| 0.0)
                .into_iter()
                .map(LocalSystem::into_maps)
            {
                let mut bu = &sys.b * &sys.umu;
                for i in 0..bu.nrows() {
                    bu[(i, i)] -= 1.0;
                }
                assert!((&sys.ls * bu).amax() <= 1e-12 * sys.ls.amax());
                let (with, _) = element_matrix_vector(&sys, ElementOptions { stab1_jump_term: true });
                let (without, _) = element_matrix_vector(&sys, ElementOptions { stab1_jump_term: false });
                assert!((with - &without).amax() <= 1e-14 * without.amax());
            }
        }
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let mesh = build_uniform_mesh(4).unwrap();
        let sys = system(&mesh, 2, VariantId::Stab2, &|_| 0.0);
        assert!(sys.rhs.iter().all(|&b| b == 0.0));
        let sol = solve_global(&sys).unwrap();
        assert!(sol.free.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sparse_solve_matches_dense_oracle() {
        let mesh = build_uniform_mesh(16).unwrap();
        let sys = system(&mesh, 1, VariantId::Usual, &sine_rhs);
        let sol = solve_global(&sys).unwrap();
        assert_eq!(sol.backend, SolverBackend::SparseCholesky);
        assert!(sol.relative_residual <= 1e-10);
        let dense = sys
            .to_dense()
            .cholesky()
            .unwrap()
            .solve(&DVector::from_vec(sys.rhs.clone()));
        let scale = dense.amax();
        for (a, b) in sol.free.iter().zip(dense.iter()) {
            assert!((a - b).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn cg_fallback_agrees_with_cholesky() {
        let mesh = build_uniform_mesh(4).unwrap();
        let sys = system(&mesh, 2, VariantId::Stab1, &sine_rhs);
        let direct = solve_global(&sys).unwrap();
        let cg = conjugate_gradient(&sys, 1e-13, 10_000).unwrap();
        let scale = direct.free.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (a, b) in direct.free.iter().zip(&cg) {
            assert!((a - b).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn sparsity_only_between_neighbouring_faces() {
        let mesh = build_uniform_mesh(3).unwrap();
        let k = 1;
        let sys = system(&mesh, k, VariantId::Stab2, &sine_rhs);
        let dense = sys.to_dense();
        let mut face_of = vec![0; sys.size()];
        for f in 0..mesh.num_faces() {
            for r in 0..=k {
                if let Some(g) = sys.dofs.global(f, r) {
                    face_of[g] = f;
                }
            }
        }
        for i in 0..sys.size() {
            for j in 0..sys.size() {
                let (fi, fj) = (&mesh.faces[face_of[i]], &mesh.faces[face_of[j]]);
                let share = fi.elements.iter().any(|e| fj.elements.contains(e));
                if !share {
                    assert_eq!(dense[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn dirichlet_projection_of_linear_data() {
        let mesh = build_uniform_mesh(2).unwrap();
        let k = 2;
        let vals = dirichlet_face_values(&mesh, k, &|x| 1.0 + 2.0 * x.x - x.y).unwrap();
        let rule = segment_rule(8).unwrap();
        let psi = face_basis_eval(k, &rule.points);
        for (fi, f) in mesh.faces.iter().enumerate() {
            if !f.is_dirichlet {
                assert!(vals[fi * 3..fi * 3 + 3].iter().all(|&v| v == 0.0));
                continue;
            }
            for (g, &s) in rule.points.iter().enumerate() {
                let x = mesh.face_point(fi, s);
                let rebuilt: f64 = (0..3).map(|r| vals[fi * 3 + r] * psi[(r, g)]).sum();
                assert!((rebuilt - (1.0 + 2.0 * x.x - x.y)).abs() < 1e-13);
            }
        }
        let zero = dirichlet_face_values(&mesh, k, &|_| 0.0).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matrix_market_export_round_trip() {
        let mesh = build_uniform_mesh(2).unwrap();
        let sys = system(&mesh, 1, VariantId::Usual, &sine_rhs);
        let mut buf = Vec::new();
        sys.write_matrix_market(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines
            .next()
            .unwrap()
            .starts_with("%%MatrixMarket matrix coordinate real symmetric"));
        let header: Vec<usize> = lines
            .next()
            .unwrap()
            .split_whitespace()
            .map(|t| t.parse().unwrap())
            .collect();
        assert_eq!(header, vec![sys.size(), sys.size(), sys.nnz_lower()]);
        let mut dense = DMatrix::zeros(sys.size(), sys.size());
        for line in lines {
            let t: Vec<&str> = line.split_whitespace().collect();
            let (i, j): (usize, usize) = (t[0].parse().unwrap(), t[1].parse().unwrap());
            assert!(i >= j);
            let v: f64 = t[2].parse().unwrap();
            dense[(i - 1, j - 1)] = v;
            dense[(j - 1, i - 1)] = v;
        }
        assert_eq!(dense, sys.to_dense());
        let mut rhs = Vec::new();
        sys.write_rhs(&mut rhs).unwrap();
        assert_eq!(String::from_utf8(rhs).unwrap().lines().count(), sys.size());
    }
}
