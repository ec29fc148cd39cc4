//! Validation, convergence and phase-timing drivers behind the CLI.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::assemble::{
    assemble_global, dirichlet_face_values, element_contributions, solve_global, ElementOptions, SolverBackend,
};
use crate::basis::ReferenceBasis;
use crate::error::{Error, Result};
use crate::local::{build_local_system, ElementMaps, LocalPhaseTimes, VariantId};
use crate::mesh::{build_uniform_mesh, Mesh, Point};
use crate::postproc::{l2_errors, recover, sine_flux, sine_solution, sine_source, ErrorReport, Solution};

pub type ScalarFn<'a> = &'a (dyn Fn(Point) -> f64 + Sync);

/// Wall-clock seconds per phase of one solve.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimings {
    pub onetime: f64,
    /// Whole local phase, wall-clock.
    pub local: f64,
    /// Sub-phases, summed over elements.
    pub extra_basis: f64,
    pub extra_divergence: f64,
    pub local_matrix: f64,
    pub global: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PipelineOptions {
    pub serial: bool,
    pub element: ElementOptions,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub variant: VariantId,
    pub k: usize,
    pub system_size: usize,
    pub backend: SolverBackend,
    pub timings: PhaseTimings,
    pub reference: ReferenceBasis,
    pub maps: Vec<ElementMaps>,
    pub solution: Solution,
    pub global: crate::assemble::GlobalSystem,
}

/// One timed solve: reference setup, local problems, global problem, then
/// (untimed) recovery of `u_h` and `q_h`.
pub fn run_pipeline(
    mesh: &Mesh,
    variant: VariantId,
    k: usize,
    source: ScalarFn,
    dirichlet: ScalarFn,
    options: PipelineOptions,
) -> Result<RunOutput> {
    let start = Instant::now();
    let reference = ReferenceBasis::new(k)?;
    let t_onetime = start.elapsed();

    let t_local_start = Instant::now();
    let one = |e: usize| -> Result<(ElementMaps, LocalPhaseTimes)> {
        let mut t = LocalPhaseTimes::default();
        let sys = build_local_system(variant, mesh, e, &reference, source, &mut t)?;
        Ok((sys.into_maps(), t))
    };
    let results: Vec<Result<(ElementMaps, LocalPhaseTimes)>> = if options.serial {
        (0..mesh.num_elements()).map(one).collect()
    } else {
        (0..mesh.num_elements()).into_par_iter().map(one).collect()
    };
    let mut maps = Vec::with_capacity(results.len());
    let mut sub = LocalPhaseTimes::default();
    for r in results {
        let (m, t) = r?;
        maps.push(m);
        sub += t;
    }
    let t_local = t_local_start.elapsed();

    let t_global_start = Instant::now();
    let contributions = element_contributions(&maps, options.element, options.serial);
    let dirichlet = dirichlet_face_values(mesh, k, dirichlet)?;
    let global = assemble_global(mesh, k, &contributions, dirichlet)?;
    drop(contributions);
    let sol = solve_global(&global)?;
    let t_global = t_global_start.elapsed();
    let t_total = start.elapsed();

    let solution = recover(mesh, k, &maps, sol.face_values, options.serial);
    Ok(RunOutput {
        variant,
        k,
        system_size: global.size(),
        backend: sol.backend,
        timings: PhaseTimings {
            onetime: t_onetime.as_secs_f64(),
            local: t_local.as_secs_f64(),
            extra_basis: sub.extra_basis.as_secs_f64(),
            extra_divergence: sub.extra_divergence.as_secs_f64(),
            local_matrix: sub.local_matrix.as_secs_f64(),
            global: t_global.as_secs_f64(),
            total: t_total.as_secs_f64(),
        },
        reference,
        maps,
        solution,
        global,
    })
}

/// Runs the sine problem with zero Dirichlet data.
pub fn run_sine_problem(mesh: &Mesh, variant: VariantId, k: usize, options: PipelineOptions) -> Result<RunOutput> {
    run_pipeline(mesh, variant, k, &sine_source, &|_| 0.0, options)
}

pub fn sine_errors(mesh: &Mesh, run: &RunOutput, serial: bool) -> Result<ErrorReport> {
    l2_errors(mesh, &run.maps, &run.solution, &sine_solution, &sine_flux, serial)
}

/// `max |a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn percent_benefit(t_usual: f64, t_variant: f64) -> f64 {
    100.0 * (t_usual - t_variant) / t_usual
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Phase-wise median over repetitions.
pub fn median_timings(all: &[PhaseTimings]) -> PhaseTimings {
    let pick = |f: fn(&PhaseTimings) -> f64| median(&all.iter().map(f).collect::<Vec<_>>());
    PhaseTimings {
        onetime: pick(|t| t.onetime),
        local: pick(|t| t.local),
        extra_basis: pick(|t| t.extra_basis),
        extra_divergence: pick(|t| t.extra_divergence),
        local_matrix: pick(|t| t.local_matrix),
        global: pick(|t| t.global),
        total: pick(|t| t.total),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub variants: Vec<VariantId>,
    pub degrees: Vec<usize>,
    pub mesh_sizes: Vec<usize>,
    pub reps: usize,
    pub out_dir: PathBuf,
    pub serial: bool,
    pub element: ElementOptions,
    pub export_matrix: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            variants: VariantId::ALL.to_vec(),
            degrees: (1..=8).collect(),
            mesh_sizes: vec![16],
            reps: 1,
            out_dir: PathBuf::from("hrt-out"),
            serial: false,
            element: ElementOptions::default(),
            export_matrix: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("no variants selected".into()));
        }
        if self.degrees.is_empty() || self.degrees.contains(&0) {
            return Err(Error::Config("degrees must be a non-empty list of values >= 1".into()));
        }
        if self.reps == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if self.mesh_sizes.is_empty() || self.mesh_sizes.contains(&0) {
            return Err(Error::Config("mesh sizes must be >= 1".into()));
        }
        Ok(())
    }

    fn pipeline(&self) -> PipelineOptions {
        PipelineOptions {
            serial: self.serial,
            element: self.element,
        }
    }
}

fn export_system(dir: &Path, run: &RunOutput, n: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let stem = format!("{}_k{}_n{}", run.variant.label(), run.k, n);
    let mut a = BufWriter::new(fs::File::create(dir.join(format!("A_{stem}.mtx")))?);
    run.global.write_matrix_market(&mut a)?;
    let mut b = BufWriter::new(fs::File::create(dir.join(format!("b_{stem}.txt")))?);
    run.global.write_rhs(&mut b)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRow {
    pub k: usize,
    pub mesh_n: usize,
    pub pair: (VariantId, VariantId),
    pub diff_uhat: f64,
    pub diff_u: f64,
    pub diff_q: f64,
}

impl ValidationRow {
    pub fn max_diff(&self) -> f64 {
        self.diff_uhat.max(self.diff_u).max(self.diff_q)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_diff() <= tol
    }
}

pub const VALIDATION_TOLERANCE: f64 = 1e-8;

fn concat(sol: &Solution, f: fn(&crate::postproc::ElementSolution) -> &nalgebra::DVector<f64>) -> Vec<f64> {
    sol.elements.iter().flat_map(|e| f(e).iter().copied()).collect()
}

/// Pairwise solution differences between the selected variants.
pub fn compare_runs(a: &RunOutput, b: &RunOutput, mesh_n: usize) -> ValidationRow {
    ValidationRow {
        k: a.k,
        mesh_n,
        pair: (a.variant, b.variant),
        diff_uhat: relative_diff(&a.solution.face_values, &b.solution.face_values),
        diff_u: relative_diff(&concat(&a.solution, |e| &e.u), &concat(&b.solution, |e| &e.u)),
        diff_q: relative_diff(&concat(&a.solution, |e| &e.q), &concat(&b.solution, |e| &e.q)),
    }
}

pub fn run_validate(config: &BenchConfig) -> Result<Vec<ValidationRow>> {
    config.validate()?;
    if config.variants.len() < 2 {
        return Err(Error::Config("validation needs at least two variants".into()));
    }
    let mut rows = vec![];
    for &n in &config.mesh_sizes {
        let mesh = build_uniform_mesh(n)?;
        for &k in &config.degrees {
            let runs = config
                .variants
                .iter()
                .map(|&v| run_sine_problem(&mesh, v, k, config.pipeline()))
                .collect::<Result<Vec<_>>>()?;
            if config.export_matrix {
                for r in &runs {
                    export_system(&config.out_dir, r, n)?;
                }
            }
            for i in 0..runs.len() {
                for j in i + 1..runs.len() {
                    rows.push(compare_runs(&runs[i], &runs[j], n));
                }
            }
        }
    }
    Ok(rows)
}

pub fn validation_csv(rows: &[ValidationRow]) -> String {
    let mut s = String::from("k,mesh_n,pair,diff_uhat,diff_u,diff_q,pass\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{} vs {},{:.3e},{:.3e},{:.3e},{}",
            r.k,
            r.mesh_n,
            r.pair.0,
            r.pair.1,
            r.diff_uhat,
            r.diff_u,
            r.diff_q,
            r.passes(VALIDATION_TOLERANCE)
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: VariantId,
    pub k: usize,
    pub timings: PhaseTimings,
    pub errors: ErrorReport,
    pub system_size: usize,
    pub backend: SolverBackend,
}

/// Variants run one after another; each (variant, degree) is repeated
/// `reps` times and the median of each phase is kept.
pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    config.validate()?;
    let n = config.mesh_sizes[0];
    let mesh = build_uniform_mesh(n)?;
    let mut rows = vec![];
    for &v in &config.variants {
        for &k in &config.degrees {
            let mut samples = Vec::with_capacity(config.reps);
            let mut last = None;
            for _ in 0..config.reps {
                let run = run_sine_problem(&mesh, v, k, config.pipeline())?;
                samples.push(run.timings);
                last = Some(run);
            }
            let run = last.expect("reps >= 1");
            if config.export_matrix {
                export_system(&config.out_dir, &run, n)?;
            }
            rows.push(BenchRow {
                variant: v,
                k,
                timings: median_timings(&samples),
                errors: sine_errors(&mesh, &run, config.serial)?,
                system_size: run.system_size,
                backend: run.backend,
            });
        }
    }
    Ok(rows)
}

const VARIANT_HEADER: &str = "Usual-HRT,Stab-1-HRT,Stab-2-HRT";
const MISSING: &str = "-";

fn lookup(rows: &[BenchRow], v: VariantId, k: usize) -> Option<&BenchRow> {
    rows.iter().find(|r| r.variant == v && r.k == k)
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| MISSING.to_string(), |v| format!("{v:.3e}"))
}

fn two_group_table(
    rows: &[BenchRow],
    degrees: &[usize],
    groups: [&str; 2],
    first: impl Fn(&BenchRow) -> Option<f64>,
    second: impl Fn(&BenchRow) -> Option<f64>,
) -> String {
    let mut s = format!(
        ",{},,,{},,\nk,{VARIANT_HEADER},{VARIANT_HEADER}\n",
        groups[0], groups[1]
    );
    for &k in degrees {
        let mut line = k.to_string();
        for f in [&first as &dyn Fn(&BenchRow) -> Option<f64>, &second] {
            for v in VariantId::ALL {
                line.push(',');
                line.push_str(&cell(lookup(rows, v, k).and_then(f)));
            }
        }
        s.push_str(&line);
        s.push('\n');
    }
    s
}

pub fn onetime_local_csv(rows: &[BenchRow], degrees: &[usize]) -> String {
    two_group_table(
        rows,
        degrees,
        ["One-time operations", "Local problem solutions"],
        |r| Some(r.timings.onetime),
        |r| Some(r.timings.local),
    )
}

pub fn global_total_csv(rows: &[BenchRow], degrees: &[usize]) -> String {
    two_group_table(
        rows,
        degrees,
        ["Global problem solution", "Total solution"],
        |r| Some(r.timings.global),
        |r| Some(r.timings.total),
    )
}

pub fn extra_basis_csv(rows: &[BenchRow], degrees: &[usize]) -> String {
    two_group_table(
        rows,
        degrees,
        ["Additional RT basis", "Div. matrix of additional RT basis"],
        |r| Some(r.timings.extra_basis),
        |r| (r.variant == VariantId::Usual).then_some(r.timings.extra_divergence),
    )
}

pub fn local_matrix_csv(rows: &[BenchRow], degrees: &[usize]) -> String {
    let mut s = format!(",Local matrix problem,,\nk,{VARIANT_HEADER}\n");
    for &k in degrees {
        let mut line = k.to_string();
        for v in VariantId::ALL {
            line.push(',');
            line.push_str(&cell(lookup(rows, v, k).map(|r| r.timings.local_matrix)));
        }
        s.push_str(&line);
        s.push('\n');
    }
    s
}

pub fn percent_benefit_csv(rows: &[BenchRow], degrees: &[usize]) -> String {
    let mut s =
        String::from(",Local problem solution,,Total solution,\nk,Stab-1-HRT,Stab-2-HRT,Stab-1-HRT,Stab-2-HRT\n");
    for &k in degrees {
        let mut line = k.to_string();
        let usual = lookup(rows, VariantId::Usual, k);
        for phase in [|t: &PhaseTimings| t.local, |t: &PhaseTimings| t.total] {
            for v in [VariantId::Stab1, VariantId::Stab2] {
                let val = usual
                    .zip(lookup(rows, v, k))
                    .map(|(u, r)| percent_benefit(phase(&u.timings), phase(&r.timings)));
                line.push(',');
                line.push_str(&val.map_or_else(|| MISSING.to_string(), |p| format!("{p:.2}")));
            }
        }
        s.push_str(&line);
        s.push('\n');
    }
    s
}

/// Errors, sizes and backend per run; timing-free so it is reproducible.
pub fn summary_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("variant,k,system_size,backend,err_u,err_q\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6e},{:.6e}",
            r.variant, r.k, r.system_size, r.backend, r.errors.err_u, r.errors.err_q
        );
    }
    s
}

pub fn write_bench_tables(rows: &[BenchRow], degrees: &[usize], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let files = [
        ("onetime_local.csv", onetime_local_csv(rows, degrees)),
        ("global_total.csv", global_total_csv(rows, degrees)),
        ("extra_basis.csv", extra_basis_csv(rows, degrees)),
        ("local_matrix.csv", local_matrix_csv(rows, degrees)),
        ("percent_benefit.csv", percent_benefit_csv(rows, degrees)),
        ("summary.csv", summary_csv(rows)),
    ];
    for (name, body) in files {
        fs::write(out_dir.join(name), body)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub variant: VariantId,
    pub k: usize,
    pub mesh_n: usize,
    pub err_u: f64,
    pub err_q: f64,
    pub rate_u: Option<f64>,
    pub rate_q: Option<f64>,
}

const RATE_FLOOR: f64 = 1e-13;

/// Observed order between two meshes; `None` when either error is at
/// round-off level.
pub fn observed_rate(e_coarse: f64, e_fine: f64, n_coarse: usize, n_fine: usize) -> Option<f64> {
    if e_coarse <= RATE_FLOOR || e_fine <= RATE_FLOOR {
        return None;
    }
    Some((e_coarse / e_fine).ln() / (n_fine as f64 / n_coarse as f64).ln())
}

/// Least-squares slope of `log e` against `log h`.
pub fn fitted_rate(mesh_sizes: &[usize], errors: &[f64]) -> Option<f64> {
    if errors.iter().any(|&e| e <= RATE_FLOOR) || errors.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = mesh_sizes.iter().map(|&n| (1.0 / n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}

pub fn run_converge_with(
    config: &BenchConfig,
    source: ScalarFn,
    exact_u: ScalarFn,
    exact_q: &(dyn Fn(Point) -> [f64; 2] + Sync),
) -> Result<Vec<ConvergenceRow>> {
    config.validate()?;
    if config.mesh_sizes.len() < 2 {
        return Err(Error::Config("convergence study needs at least two mesh sizes".into()));
    }
    let mut rows: Vec<ConvergenceRow> = vec![];
    for &v in &config.variants {
        for &k in &config.degrees {
            let mut prev: Option<(usize, f64, f64)> = None;
            for &n in &config.mesh_sizes {
                let mesh = build_uniform_mesh(n)?;
                let run = run_pipeline(&mesh, v, k, source, exact_u, config.pipeline())?;
                let e = l2_errors(&mesh, &run.maps, &run.solution, exact_u, exact_q, config.serial)?;
                let (rate_u, rate_q) = match prev {
                    Some((pn, pu, pq)) => (observed_rate(pu, e.err_u, pn, n), observed_rate(pq, e.err_q, pn, n)),
                    None => (None, None),
                };
                rows.push(ConvergenceRow {
                    variant: v,
                    k,
                    mesh_n: n,
                    err_u: e.err_u,
                    err_q: e.err_q,
                    rate_u,
                    rate_q,
                });
                prev = Some((n, e.err_u, e.err_q));
            }
        }
    }
    Ok(rows)
}

pub fn run_converge(config: &BenchConfig) -> Result<Vec<ConvergenceRow>> {
    run_converge_with(config, &sine_source, &sine_solution, &sine_flux)
}

pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let rate = |r: Option<f64>| r.map_or_else(|| MISSING.to_string(), |v| format!("{v:.4}"));
    let mut s = String::from("variant,k,mesh_n,err_u,err_q,rate_u,rate_q\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6e},{:.6e},{},{}",
            r.variant,
            r.k,
            r.mesh_n,
            r.err_u,
            r.err_q,
            rate(r.rate_u),
            rate(r.rate_q)
        );
    }
    s
}
