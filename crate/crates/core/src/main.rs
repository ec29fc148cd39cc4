use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hrt::assemble::ElementOptions;
use hrt::bench::{
    convergence_csv, run_bench, run_converge, run_validate, validation_csv, write_bench_tables, BenchConfig,
    VALIDATION_TOLERANCE,
};
use hrt::local::VariantId;
use hrt::Error;

#[derive(Parser)]
#[command(
    name = "hrt-bench",
    about = "Hybridized Raviart-Thomas solver: validation, convergence and timing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check that the selected variants give identical solutions.
    Validate(Common),
    /// Phase timings on one mesh, written as CSV tables.
    Bench(Common),
    /// L2 errors and observed rates over a sequence of meshes.
    Converge(Common),
}

#[derive(Args)]
struct Common {
    /// Degrees, e.g. `1-8` or `1,2,5`.
    #[arg(long)]
    degrees: Option<String>,
    /// Use degrees 1 to 20.
    #[arg(long, conflicts_with = "degrees")]
    full_degrees: bool,
    /// Subdivisions per side; a list for `converge`.
    #[arg(long)]
    mesh_n: Option<String>,
    /// Comma separated subset of `usual,stab1,stab2`.
    #[arg(long, default_value = "usual,stab1,stab2")]
    variants: String,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long, default_value = "hrt-out")]
    out_dir: PathBuf,
    /// Single-threaded element loops and factorization.
    #[arg(long)]
    serial: bool,
    /// Include the lifted-jump term in the Stab-1 element matrix.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    stab1_jump_term: bool,
    /// Write each global matrix (Matrix Market) and right-hand side.
    #[arg(long)]
    export_matrix: bool,
}

fn parse_list(text: &str, what: &str) -> Result<Vec<usize>, Error> {
    let bad = || Error::Config(format!("cannot parse {what} '{text}'"));
    let mut out = vec![];
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once('-') {
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn parse_variants(text: &str) -> Result<Vec<VariantId>, Error> {
    let mut out: Vec<VariantId> = vec![];
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let v: VariantId = part.parse()?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

fn config(c: &Common, default_degrees: &str, default_mesh: &str) -> Result<BenchConfig, Error> {
    let degrees = if c.full_degrees {
        (1..=20).collect()
    } else {
        parse_list(c.degrees.as_deref().unwrap_or(default_degrees), "degrees")?
    };
    let cfg = BenchConfig {
        variants: parse_variants(&c.variants)?,
        degrees,
        mesh_sizes: parse_list(c.mesh_n.as_deref().unwrap_or(default_mesh), "mesh sizes")?,
        reps: c.reps,
        out_dir: c.out_dir.clone(),
        serial: c.serial,
        element: ElementOptions {
            stab1_jump_term: c.stab1_jump_term,
        },
        export_matrix: c.export_matrix,
    };
    cfg.validate()?;
    if c.serial {
        faer::set_global_parallelism(faer::Par::Seq);
        // ignore the error if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Validate(c) => {
            let cfg = config(&c, "1-3", "8")?;
            let rows = run_validate(&cfg)?;
            let csv = validation_csv(&rows);
            std::fs::create_dir_all(&cfg.out_dir)?;
            std::fs::write(cfg.out_dir.join("validate.csv"), &csv)?;
            print!("{csv}");
            let failed: Vec<_> = rows.iter().filter(|r| !r.passes(VALIDATION_TOLERANCE)).collect();
            for r in &failed {
                eprintln!(
                    "FAIL k={} n={} {} vs {}: {:.3e}",
                    r.k,
                    r.mesh_n,
                    r.pair.0,
                    r.pair.1,
                    r.max_diff()
                );
            }
            Ok(failed.is_empty())
        }
        Command::Bench(c) => {
            let cfg = config(&c, "1-8", "16")?;
            let rows = run_bench(&cfg)?;
            write_bench_tables(&rows, &cfg.degrees, &cfg.out_dir)?;
            for r in &rows {
                println!(
                    "{:<11} k={:<2} dofs={:<6} backend={} onetime={:.3e} local={:.3e} global={:.3e} total={:.3e} \
                     err_u={:.3e}",
                    r.variant.label(),
                    r.k,
                    r.system_size,
                    r.backend,
                    r.timings.onetime,
                    r.timings.local,
                    r.timings.global,
                    r.timings.total,
                    r.errors.err_u
                );
            }
            println!("tables written to {}", cfg.out_dir.display());
            Ok(true)
        }
        Command::Converge(c) => {
            let cfg = config(&c, "1-3", "4,8,16")?;
            let rows = run_converge(&cfg)?;
            let csv = convergence_csv(&rows);
            std::fs::create_dir_all(&cfg.out_dir)?;
            std::fs::write(cfg.out_dir.join("convergence.csv"), &csv)?;
            print!("{csv}");
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
