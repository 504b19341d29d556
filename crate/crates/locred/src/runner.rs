//! Experiment orchestration: build the discrete problem from a config,
//! run the requested enrichment algorithm(s), and write the `.dat` files
//! and the round-trippable `summary.txt`.

use std::fs;
use std::path::Path;

use crate::config::{AlgorithmChoice, ExperimentConfig};
use crate::decomposition::{build_decomposition, build_pu, TheoryConstants};
use crate::diagnostics::{emit_dat, format_float, EnrichmentTrace};
use crate::enrichment::{self, Algorithm, StopReason, StoppingRule};
use crate::fem::{assemble_load, assemble_stiffness, build_mesh};
use crate::fields::{generate_f, generate_kappa};
use crate::{Error, Result};

#[derive(Debug)]
pub struct AlgorithmResult {
    pub algorithm: Algorithm,
    pub trace: EnrichmentTrace,
    /// `.dat` file names written for this run (empty for an empty trace).
    pub files: Vec<String>,
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub theory: TheoryConstants,
    pub results: Vec<AlgorithmResult>,
    /// Contents of the written `summary.txt`.
    pub summary: String,
}

fn stop_reason_label(reason: StopReason) -> &'static str {
    match reason {
        StopReason::AbsTolReached => "abs_tol",
        StopReason::RelTolReached => "rel_tol",
        StopReason::MaxIter => "max_iter",
        StopReason::Stagnation => "stagnation",
    }
}

fn algorithm_label(algorithm: Algorithm) -> &'static str {
    match algorithm {
        Algorithm::ResidualBased => "residual_based",
        Algorithm::GloballyCoupled => "globally_coupled",
    }
}

impl ExperimentReport {
    /// Process exit code: 0 when every run reached its tolerance,
    /// otherwise the most severe failure (3 = max_iter without
    /// convergence, 4 = stagnation).
    pub fn exit_code(&self) -> i32 {
        self.results
            .iter()
            .map(|r| match r.trace.stop_reason {
                StopReason::AbsTolReached | StopReason::RelTolReached => 0,
                StopReason::MaxIter => 3,
                StopReason::Stagnation => 4,
            })
            .max()
            .unwrap_or(0)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Run the configured experiment and write all outputs into
/// `config.output_dir` (created if missing).
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let mesh = build_mesh(config.n_squares)?;
    let kappa = generate_kappa(&config.kappa_spec, &mesh)?;
    let f = generate_f(&config.f_spec, &mesh)?;
    let dd = build_decomposition(&mesh, config.subdomain_size, config.subdomain_step)?;
    let pu = build_pu(&dd, &mesh)?;
    let theory = TheoryConstants::compute(&dd, &pu, config.c_f, kappa.contrast())?;

    let a = assemble_stiffness(&mesh, &kappa)?;
    let b = assemble_load(&mesh, &f)?;
    let stop = StoppingRule {
        tol_abs: config.tol_abs,
        tol_rel: config.tol_rel,
        max_iter: config.max_iter,
    };

    fs::create_dir_all(&config.output_dir).map_err(|source| Error::Io {
        path: config.output_dir.display().to_string(),
        source,
    })?;

    let algorithms: &[Algorithm] = match config.algorithm {
        AlgorithmChoice::ResidualBased => &[Algorithm::ResidualBased],
        AlgorithmChoice::GloballyCoupled => &[Algorithm::GloballyCoupled],
        AlgorithmChoice::Both => &[Algorithm::ResidualBased, Algorithm::GloballyCoupled],
    };

    let config_text = config.serialize();
    let mut results = Vec::new();
    for &algorithm in algorithms {
        let (mut trace, _state) =
            enrichment::run(algorithm, &a, &b, &dd, &stop, Some(theory.clone()), true)?;
        trace.config_snapshot = config_text.clone();
        let files = if trace.records.is_empty() {
            Vec::new()
        } else {
            emit_dat(
                &trace,
                &config.output_dir,
                algorithm == Algorithm::GloballyCoupled,
            )?
        };
        results.push(AlgorithmResult {
            algorithm,
            trace,
            files,
        });
    }

    let mut summary = String::from("# resolved configuration\n");
    summary.push_str(&config_text);
    summary.push_str("# results\n");
    summary.push_str(&format!(
        "result_n_subdomains={}\n",
        theory.n_subdomains
    ));
    summary.push_str(&format!("result_j_cover={}\n", theory.j_cover));
    summary.push_str(&format!(
        "result_cpu_sq_bound={}\n",
        format_float(theory.cpu_sq_bound)
    ));
    summary.push_str(&format!("result_c={}\n", format_float(theory.c)));
    summary.push_str(&format!(
        "result_one_minus_c={}\n",
        format_float(theory.one_minus_c)
    ));
    for r in &results {
        let label = algorithm_label(r.algorithm);
        summary.push_str(&format!(
            "result_iterations_{label}={}\n",
            r.trace.records.len()
        ));
        summary.push_str(&format!(
            "result_final_rel_error_{label}={}\n",
            format_float(r.trace.final_rel_error)
        ));
        summary.push_str(&format!(
            "result_stop_reason_{label}={}\n",
            stop_reason_label(r.trace.stop_reason)
        ));
        summary.push_str(&format!(
            "result_reference_energy_{label}={}\n",
            format_float(r.trace.reference_energy)
        ));
    }
    write_file(&config.output_dir.join("summary.txt"), &summary)?;

    Ok(ExperimentReport {
        theory,
        results,
        summary,
    })
}
