use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;

use locred::config::ExperimentConfig;
use locred::runner::run_experiment;
use locred::Error;

/// Localized reduced basis solver for the stationary heat equation with
/// online enrichment diagnostics.
#[derive(Parser)]
#[command(name = "locred", version)]
struct Cli {
    /// Plain-text key=value configuration file (a previous run's
    /// summary.txt works as-is)
    #[arg(long)]
    config: Option<PathBuf>,

    /// residual_based, globally_coupled or both
    #[arg(long)]
    algorithm: Option<String>,

    /// Mesh resolution: squares per side
    #[arg(long)]
    n_squares: Option<usize>,

    /// Enrichment iteration cap
    #[arg(long)]
    max_iter: Option<usize>,

    /// Relative energy error tolerance, or "none"
    #[arg(long)]
    tol_rel: Option<String>,

    /// Absolute tolerance on the selection criterion
    #[arg(long)]
    tol_abs: Option<f64>,

    /// Output directory (fallback: LOCRED_OUTPUT_DIR, then the config)
    #[arg(long)]
    output_dir: Option<PathBuf>,

    /// Worker threads; outputs are identical for any value
    #[arg(long)]
    threads: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    let code = match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Solver(_) => 5,
                _ => 2,
            }
        }
    };
    std::process::exit(code);
}

fn execute(cli: Cli) -> locred::Result<i32> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.display().to_string(),
                source,
            })?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };

    if let Some(a) = &cli.algorithm {
        config.algorithm = a.parse()?;
    }
    if let Some(n) = cli.n_squares {
        config.n_squares = n;
    }
    if let Some(m) = cli.max_iter {
        config.max_iter = m;
    }
    if let Some(t) = &cli.tol_rel {
        config.tol_rel = if t == "none" {
            None
        } else {
            Some(t.parse().map_err(|_| {
                Error::Config(format!("cannot parse --tol-rel {t}"))
            })?)
        };
    }
    if let Some(t) = cli.tol_abs {
        config.tol_abs = t;
    }
    if let Some(dir) = cli.output_dir {
        config.output_dir = dir;
    } else if let Ok(dir) = std::env::var("LOCRED_OUTPUT_DIR") {
        config.output_dir = PathBuf::from(dir);
    }
    config.validate()?;

    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure thread pool: {e}")))?;
    }

    let start = Instant::now();
    let report = run_experiment(&config)?;
    print!("{}", report.summary);
    // Stdout only: timing in summary.txt would break byte-identical reruns.
    println!("# wall time: {:.3} s", start.elapsed().as_secs_f64());
    Ok(report.exit_code())
}
