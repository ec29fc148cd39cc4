//! Element matrices and statically condensed local solves for the three
//! hybridized RT variants.
//!
//! All matrices hold raw integrals (`∫_K`, `∫_F`), with the basis normalized
//! so the flux mass matrix is `|K| I`. Eliminating the flux block gives the
//! local Laplacian `L = D Dᵀ / |K| + M^s`, which is factored once by dense
//! Cholesky and reused for the source problem.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::basis::{build_extra_basis, ElementExtraBasis, ElementGeometry, ReferenceBasis};
use crate::error::{Error, Result};
use crate::mesh::{Mesh, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VariantId {
    /// `V_s = {0}`, `V_a = RT_k`.
    Usual,
    /// `V_s` = the extra RT functions, `V_a = [P_k]^2`.
    Stab1,
    /// `V_s` = the extra RT functions plus the degree-`k` part of `[P_k]^2`,
    /// `V_a = [P_{k-1}]^2`.
    Stab2,
}

impl VariantId {
    pub const ALL: [VariantId; 3] = [VariantId::Usual, VariantId::Stab1, VariantId::Stab2];

    pub fn label(self) -> &'static str {
        match self {
            VariantId::Usual => "Usual-HRT",
            VariantId::Stab1 => "Stab-1-HRT",
            VariantId::Stab2 => "Stab-2-HRT",
        }
    }

    /// Number of flux functions kept in the local problem (`dim V_a`).
    pub fn n_a(self, k: usize) -> usize {
        let m = (k + 1) * (k + 2) / 2;
        match self {
            VariantId::Usual => 2 * m + k + 1,
            VariantId::Stab1 => 2 * m,
            VariantId::Stab2 => 2 * (m - (k + 1)),
        }
    }

    /// `dim V_s`.
    pub fn n_s(self, k: usize) -> usize {
        match self {
            VariantId::Usual => 0,
            VariantId::Stab1 => k + 1,
            VariantId::Stab2 => 3 * (k + 1),
        }
    }

    pub fn has_stabilization(self) -> bool {
        self != VariantId::Usual
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for VariantId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "usual" | "usualhrt" => Ok(VariantId::Usual),
            "stab1" | "stab1hrt" => Ok(VariantId::Stab1),
            "stab2" | "stab2hrt" => Ok(VariantId::Stab2),
            _ => Err(Error::Config(format!("unknown variant '{s}'"))),
        }
    }
}

/// Wall-clock time spent in each per-element phase.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LocalPhaseTimes {
    pub extra_basis: Duration,
    pub extra_divergence: Duration,
    pub local_matrix: Duration,
}

impl LocalPhaseTimes {
    pub fn total(&self) -> Duration {
        self.extra_basis + self.extra_divergence + self.local_matrix
    }
}

impl std::ops::AddAssign for LocalPhaseTimes {
    fn add_assign(&mut self, rhs: Self) {
        self.extra_basis += rhs.extra_basis;
        self.extra_divergence += rhs.extra_divergence;
        self.local_matrix += rhs.local_matrix;
    }
}

/// Per-element matrices and solution maps.
#[derive(Debug, Clone)]
pub struct LocalSystem {
    pub variant: VariantId,
    pub elem: usize,
    pub measure: f64,
    /// `∫_K q_i ∇·φ_j` over `V_a`, `[m x n_a]`.
    pub d: DMatrix<f64>,
    /// `∫_{F_j} ψ_r φ_i·n`, `[n_a x 3m']`.
    pub bq: DMatrix<f64>,
    /// Lifting coefficients, `[n_s x 3m']`.
    pub ls: DMatrix<f64>,
    /// Face projection of traces, `[3m' x m]`.
    pub b: DMatrix<f64>,
    pub ms: DMatrix<f64>,
    pub bu: DMatrix<f64>,
    /// Lower Cholesky factor of `L`.
    pub laplacian_factor: DMatrix<f64>,
    pub umu: DMatrix<f64>,
    pub qmu: DMatrix<f64>,
    pub uf: DVector<f64>,
    pub qf: DVector<f64>,
    pub pf: DVector<f64>,
    pub extra: ElementExtraBasis,
}

/// The part of a [`LocalSystem`] kept after the local phase: solution maps,
/// lifting data and the extra-basis coefficient record.
#[derive(Debug, Clone)]
pub struct ElementMaps {
    pub variant: VariantId,
    pub elem: usize,
    pub measure: f64,
    pub ls: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub umu: DMatrix<f64>,
    pub qmu: DMatrix<f64>,
    pub uf: DVector<f64>,
    pub qf: DVector<f64>,
    pub pf: DVector<f64>,
    pub extra_coefficients: DMatrix<f64>,
}

/// Column block `[D̂-recombination]` for `[P_k]^2`: column `2 i' + j'` is
/// `|K| Σ_r (J^{-T})_{j' r} D̂[:, 2 i' + r]`, padded with zero rows for the
/// degree-`k` test functions.
fn polynomial_divergence(geom: &ElementGeometry, reference: &ReferenceBasis) -> DMatrix<f64> {
    let m = reference.m;
    let jit = geom.inv_transpose();
    let measure = geom.measure();
    let rows = reference.div_ref.nrows();
    let mut d = DMatrix::zeros(m, 2 * m);
    for ip in 0..m {
        for jp in 0..2 {
            for i in 0..rows {
                d[(i, 2 * ip + jp)] = measure
                    * (jit[(jp, 0)] * reference.div_ref[(i, 2 * ip)]
                        + jit[(jp, 1)] * reference.div_ref[(i, 2 * ip + 1)]);
            }
        }
    }
    d
}

/// `∫_K q_i ∇·φ_{2m+s}` by quadrature from the extra-basis divergence values.
pub fn extra_divergence_block(
    geom: &ElementGeometry,
    reference: &ReferenceBasis,
    divergence: &DMatrix<f64>,
) -> DMatrix<f64> {
    // vol_weighted = 2 ŵ q̂ and ∫_K = |K| (1/|K̂|) Σ ŵ
    (reference.vol_weighted.transpose() * divergence.transpose()) * geom.measure()
}

/// Divergence matrix over `V_a`. `extra_divergence` is required for
/// [`VariantId::Usual`] and ignored otherwise.
pub fn divergence_matrix(
    variant: VariantId,
    geom: &ElementGeometry,
    reference: &ReferenceBasis,
    extra_divergence: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    let d2 = match variant {
        VariantId::Usual => {
            let div = extra_divergence
                .ok_or_else(|| Error::Config("usual variant needs extra-basis divergence values".into()))?;
            Some(extra_divergence_block(geom, reference, div))
        }
        _ => None,
    };
    Ok(combine_divergence(
        variant,
        reference,
        polynomial_divergence(geom, reference),
        d2,
    ))
}

fn combine_divergence(
    variant: VariantId,
    reference: &ReferenceBasis,
    poly: DMatrix<f64>,
    d2: Option<DMatrix<f64>>,
) -> DMatrix<f64> {
    let m = reference.m;
    match (variant, d2) {
        (VariantId::Usual, Some(d2)) => {
            let mut d = DMatrix::zeros(m, 2 * m + reference.m_face);
            d.columns_mut(0, 2 * m).copy_from(&poly);
            d.columns_mut(2 * m, reference.m_face).copy_from(&d2);
            d
        }
        (VariantId::Stab2, _) => poly.columns(0, 2 * reference.top_degree_start()).into_owned(),
        _ => poly,
    }
}

/// Face coupling of all `n` RT functions, `[n x 3m']`.
fn face_coupling_full(geom: &ElementGeometry, reference: &ReferenceBasis, extra: &ElementExtraBasis) -> DMatrix<f64> {
    let m = reference.m;
    let mp = reference.m_face;
    let mut out = DMatrix::zeros(2 * m + mp, 3 * mp);
    for j in 0..3 {
        let len = geom.face_lengths[j];
        let n = geom.normals[j];
        // ∫_F q_i ψ_r = |F| Σ_g w_g q_i ψ_r
        let g = reference.face_values(j, geom.signs[j]) * reference.face_psi_weighted.transpose() * len;
        for i in 0..m {
            for r in 0..mp {
                out[(2 * i, j * mp + r)] = n.x * g[(i, r)];
                out[(2 * i + 1, j * mp + r)] = n.y * g[(i, r)];
            }
        }
        let e = &extra.face_normal_values[j] * reference.face_psi_weighted.transpose() * len;
        out.view_mut((2 * m, j * mp), (mp, mp)).copy_from(&e);
    }
    out
}

fn stabilization_rows(variant: VariantId, reference: &ReferenceBasis) -> std::ops::Range<usize> {
    let n = 2 * reference.m + reference.m_face;
    n - variant.n_s(reference.k)..n
}

/// `∫_{F_j} ψ_r φ_i·n` for `φ_i` spanning `V_a`, `[n_a x 3m']`.
pub fn face_coupling_rhs(
    variant: VariantId,
    geom: &ElementGeometry,
    reference: &ReferenceBasis,
    extra: &ElementExtraBasis,
) -> DMatrix<f64> {
    let full = face_coupling_full(geom, reference, extra);
    full.rows(0, variant.n_a(reference.k)).into_owned()
}

/// Lifting matrix `L^s = b^s / |K|`, rows over the `V_s` basis.
pub fn lifting_matrix(
    variant: VariantId,
    geom: &ElementGeometry,
    reference: &ReferenceBasis,
    extra: &ElementExtraBasis,
) -> Result<DMatrix<f64>> {
    if !variant.has_stabilization() {
        return Err(Error::NoStabilizationSpace(variant.label()));
    }
    let full = face_coupling_full(geom, reference, extra);
    let rows = stabilization_rows(variant, reference);
    Ok(full.rows(rows.start, rows.len()) / geom.measure())
}

/// `B[(j, r), i] = (1/|F_j|) ∫_{F_j} ψ_r q_i`, `[3m' x m]`.
pub fn trace_map(geom: &ElementGeometry, reference: &ReferenceBasis) -> DMatrix<f64> {
    let m = reference.m;
    let mp = reference.m_face;
    let mut b = DMatrix::zeros(3 * mp, m);
    for j in 0..3 {
        let block = &reference.face_psi_weighted * reference.face_values(j, geom.signs[j]).transpose();
        b.rows_mut(j * mp, mp).copy_from(&block);
    }
    b
}

/// `M^s = |K| (L^s B)ᵀ (L^s B)` and `b^U = |K| (L^s B)ᵀ L^s`; zero for the
/// usual variant.
pub fn stabilization_blocks(
    variant: VariantId,
    ls: &DMatrix<f64>,
    b: &DMatrix<f64>,
    measure: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = b.ncols();
    if !variant.has_stabilization() {
        return (DMatrix::zeros(m, m), DMatrix::zeros(m, b.nrows()));
    }
    let lsb = ls * b;
    let ms = lsb.tr_mul(&lsb) * measure;
    let bu = lsb.tr_mul(ls) * measure;
    (ms, bu)
}

/// `(1/|K|) ∫_K f q_i` with the volume rule.
pub fn source_projection(
    geom: &ElementGeometry,
    reference: &ReferenceBasis,
    f: &(dyn Fn(Point) -> f64 + Sync),
) -> DVector<f64> {
    let fv = DVector::from_iterator(geom.vol_points.len(), geom.vol_points.iter().map(|&x| f(x)));
    reference.vol_weighted.tr_mul(&fv)
}

/// Factors `L = D Dᵀ / |K| + M^s`.
pub fn factor_laplacian(elem: usize, d: &DMatrix<f64>, ms: &DMatrix<f64>, measure: f64) -> Result<Cholesky<f64, Dyn>> {
    let mut l = d * d.transpose() / measure + ms;
    // exact symmetry for the factorization
    let n = l.nrows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (l[(i, j)] + l[(j, i)]);
            l[(i, j)] = avg;
            l[(j, i)] = avg;
        }
    }
    Cholesky::new(l).ok_or(Error::LocalCholesky { elem })
}

/// Solves the face-data problem: `L U^μ = D b^Q / |K| + b^U`, then
/// `Q^μ = (Dᵀ U^μ - b^Q) / |K|`.
pub fn local_solve_mu(
    chol: &Cholesky<f64, Dyn>,
    d: &DMatrix<f64>,
    bq: &DMatrix<f64>,
    bu: &DMatrix<f64>,
    measure: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let rhs = d * bq / measure + bu;
    let umu = chol.solve(&rhs);
    let qmu = (d.tr_mul(&umu) - bq) / measure;
    (umu, qmu)
}

/// Solves the source problem: `L U^f = |K| P f`, `Q^f = Dᵀ U^f / |K|`.
pub fn local_solve_f(
    chol: &Cholesky<f64, Dyn>,
    d: &DMatrix<f64>,
    pf: &DVector<f64>,
    measure: f64,
) -> (DVector<f64>, DVector<f64>) {
    let uf = chol.solve(&(pf * measure));
    let qf = d.tr_mul(&uf) / measure;
    (uf, qf)
}

/// Runs the full per-element pipeline, accumulating phase timings.
pub fn build_local_system(
    variant: VariantId,
    mesh: &Mesh,
    elem: usize,
    reference: &ReferenceBasis,
    source: &(dyn Fn(Point) -> f64 + Sync),
    times: &mut LocalPhaseTimes,
) -> Result<LocalSystem> {
    let t0 = Instant::now();
    let geom = ElementGeometry::new(mesh, elem, reference)?;
    let extra = build_extra_basis(&geom, reference)?;
    let t1 = Instant::now();
    times.extra_basis += t1 - t0;

    let d2 = if variant == VariantId::Usual {
        let div = extra.divergence_values(&geom, reference);
        Some(extra_divergence_block(&geom, reference, &div))
    } else {
        None
    };
    let t2 = Instant::now();
    if d2.is_some() {
        times.extra_divergence += t2 - t1;
    }

    let d = combine_divergence(variant, reference, polynomial_divergence(&geom, reference), d2);
    let measure = geom.measure();
    let m = reference.m;
    let full = face_coupling_full(&geom, reference, &extra);
    let bq = full.rows(0, variant.n_a(reference.k)).into_owned();
    let b = trace_map(&geom, reference);
    let rows = stabilization_rows(variant, reference);
    let ls = full.rows(rows.start, rows.len()) / measure;
    let (ms, bu) = stabilization_blocks(variant, &ls, &b, measure);
    let pf = source_projection(&geom, reference, source);
    let chol = factor_laplacian(elem, &d, &ms, measure)?;
    let (umu, qmu) = local_solve_mu(&chol, &d, &bq, &bu, measure);
    let (uf, qf) = local_solve_f(&chol, &d, &pf, measure);
    let laplacian_factor = chol.l();
    times.local_matrix += t2.elapsed();
    debug_assert_eq!(umu.nrows(), m);

    Ok(LocalSystem {
        variant,
        elem,
        measure,
        d,
        bq,
        ls,
        b,
        ms,
        bu,
        laplacian_factor,
        umu,
        qmu,
        uf,
        qf,
        pf,
        extra,
    })
}

impl LocalSystem {
    pub fn maps(&self) -> ElementMaps {
        self.clone().into_maps()
    }

    pub fn into_maps(self) -> ElementMaps {
        ElementMaps {
            variant: self.variant,
            elem: self.elem,
            measure: self.measure,
            ls: self.ls,
            b: self.b,
            umu: self.umu,
            qmu: self.qmu,
            uf: self.uf,
            qf: self.qf,
            pf: self.pf,
            extra_coefficients: self.extra.coefficients,
        }
    }

    /// `L` reassembled from the stored factor.
    pub fn laplacian(&self) -> DMatrix<f64> {
        &self.laplacian_factor * self.laplacian_factor.transpose()
    }

    /// Residuals of both block rows of the condensed-free local system for
    /// the face-data solution, max-norm per column batch.
    pub fn mu_residual(&self) -> f64 {
        let r1 = &self.qmu * self.measure - self.d.tr_mul(&self.umu) + &self.bq;
        let r2 = &self.d * &self.qmu + &self.ms * &self.umu - &self.bu;
        r1.amax().max(r2.amax())
    }

    /// Same for the source problem.
    pub fn f_residual(&self) -> f64 {
        let r1 = &self.qf * self.measure - self.d.tr_mul(&self.uf);
        let r2 = &self.d * &self.qf + &self.ms * &self.uf - &self.pf * self.measure;
        r1.amax().max(r2.amax())
    }
}
