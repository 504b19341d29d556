//! Per-iteration convergence records: relative energy error, convergence
//! rate and sharpness quotients of the a priori inequalities, plus the
//! plain-text `.dat` emitters the plots consume.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::decomposition::TheoryConstants;
use crate::enrichment::{StepReport, StopReason};
use crate::{Error, Result};

/// Relative energy errors below this are numerical noise; invariant checks
/// skip flagged records.
pub const NOISE_FLOOR: f64 = 1e-13;

/// One enrichment iteration.
///
/// The three sharpness quotients are normalized as (bound side) /
/// (bounded side), so the theory guarantees every quotient >= 1 and a
/// value of 1 means the inequality is sharp.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub n: usize,
    pub selected: usize,
    /// `||u_n - u||_a / ||u||_a` before this step.
    pub rel_energy_error: f64,
    /// `1 - ||u_{n+1} - u||_a / ||u_n - u||_a`
    pub rate_metric: f64,
    /// `(||u_n - u||_a^2 - ||R_n||_{O_k'}^2) / ||u_{n+1} - u||_a^2`
    pub sharpness_chungend: Option<f64>,
    /// `||R_n||_{O_k'}^2 / mean_i ||R_n||_{O_i'}^2`
    pub sharpness_r1: Option<f64>,
    /// `cpu^2 sum_i ||R_n||_{O_i'}^2 / ||R_n||_{V'}^2`
    pub sharpness_r2: Option<f64>,
    pub local_dual_norms: Option<Vec<f64>>,
    pub shifts: Option<Vec<f64>>,
    /// Below the noise floor; excluded from invariant assertions.
    pub noise: bool,
}

/// Full run history handed from the enrichment driver to the emitters.
#[derive(Debug, Clone)]
pub struct EnrichmentTrace {
    pub records: Vec<IterationRecord>,
    pub theory: Option<TheoryConstants>,
    /// `||u||_a`
    pub reference_energy: f64,
    pub stop_reason: StopReason,
    /// Relative energy error after the last completed iteration.
    pub final_rel_error: f64,
    /// Resolved configuration snapshot (filled by the runner).
    pub config_snapshot: String,
}

fn guarded_div(num: f64, den: f64) -> f64 {
    if den.abs() < 1e-300 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Assemble the record of iteration `n` from the energy errors before and
/// after the step and the step report.
///
/// `||R_n||_{V'}` is not solved for: in the energy norm it equals
/// `||u_n - u||_a`, which is already at hand.
pub fn compute_record(
    n: usize,
    error_before: f64,
    error_after: f64,
    reference_energy: f64,
    report: &StepReport,
    cpu_sq_bound: Option<f64>,
) -> IterationRecord {
    let rel = guarded_div(error_before, reference_energy);
    let rate = 1.0 - guarded_div(error_after, error_before);
    let (chungend, r1, r2) = match (&report.local_dual_norms, cpu_sq_bound) {
        (Some(dual_norms), cpu) => {
            let dn_sq: Vec<f64> = dual_norms.iter().map(|d| d * d).collect();
            let sum: f64 = dn_sq.iter().sum();
            let mean = sum / dn_sq.len() as f64;
            let dk_sq = dn_sq[report.selected];
            let chungend = guarded_div(
                error_before * error_before - dk_sq,
                error_after * error_after,
            );
            let r1 = guarded_div(dk_sq, mean);
            let r2 = cpu.map(|c| guarded_div(c * sum, error_before * error_before));
            (Some(chungend), Some(r1), r2)
        }
        (None, _) => (None, None, None),
    };
    IterationRecord {
        n,
        selected: report.selected,
        rel_energy_error: rel,
        rate_metric: rate,
        sharpness_chungend: chungend,
        sharpness_r1: r1,
        sharpness_r2: r2,
        local_dual_norms: report.local_dual_norms.clone(),
        shifts: report.shifts.clone(),
        noise: rel < NOISE_FLOOR,
    }
}

/// 17 significant digits: round-trips f64 exactly.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(contents.as_bytes()).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Write the per-iteration columns of `trace` into `directory`.
///
/// Residual based runs produce `errors.dat`, `convergence.dat` and
/// `ineq.dat`; globally coupled runs (`coupled = true`) produce
/// `errors_g_c.dat` and `convergence_g_c.dat`.  One row per iteration,
/// space separated, LF line endings, 17 significant digits.
pub fn emit_dat(trace: &EnrichmentTrace, directory: &Path, coupled: bool) -> Result<Vec<String>> {
    if trace.records.is_empty() {
        return Err(Error::Config("cannot emit .dat files for an empty trace".into()));
    }
    let mut written = Vec::new();
    let suffix = if coupled { "_g_c" } else { "" };

    let errors: String = trace
        .records
        .iter()
        .map(|r| format_float(r.rel_energy_error) + "\n")
        .collect();
    let name = format!("errors{suffix}.dat");
    write_file(&directory.join(&name), &errors)?;
    written.push(name);

    let convergence: String = trace
        .records
        .iter()
        .map(|r| format_float(r.rate_metric) + "\n")
        .collect();
    let name = format!("convergence{suffix}.dat");
    write_file(&directory.join(&name), &convergence)?;
    written.push(name);

    if !coupled {
        let mut ineq = String::from(
            "# columns: chungend r1 r2; each quotient is (bound side)/(bounded side), >= 1 means the inequality holds, 1 is sharp\n",
        );
        for r in &trace.records {
            ineq.push_str(&format!(
                "{} {} {}\n",
                format_float(r.sharpness_chungend.unwrap_or(f64::INFINITY)),
                format_float(r.sharpness_r1.unwrap_or(f64::INFINITY)),
                format_float(r.sharpness_r2.unwrap_or(f64::INFINITY)),
            ));
        }
        write_file(&directory.join("ineq.dat"), &ineq)?;
        written.push("ineq.dat".into());
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enrichment::StepReport;

    fn report(dual_norms: Vec<f64>, selected: usize) -> StepReport {
        StepReport {
            selected,
            local_dual_norms: Some(dual_norms),
            shifts: None,
            enrichment_vector: vec![],
            stopping_value: 0.0,
            stagnated: false,
            enriched: true,
        }
    }

    #[test]
    fn initial_record_has_unit_relative_error() {
        let r = compute_record(0, 2.0, 1.0, 2.0, &report(vec![1.0, 0.5], 0), Some(10.0));
        assert_eq!(r.rel_energy_error, 1.0);
        assert!((r.rate_metric - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_subdomain_sharpness_r1_is_one() {
        let r = compute_record(0, 1.0, 0.5, 1.0, &report(vec![0.7], 0), Some(1.0));
        assert_eq!(r.sharpness_r1, Some(1.0));
    }

    #[test]
    fn division_guard_yields_infinity() {
        let r = compute_record(3, 1.0, 0.0, 1.0, &report(vec![0.5], 0), Some(1.0));
        assert_eq!(r.rate_metric, 1.0);
        // error_after = 0 puts the chungend denominator at zero.
        assert!(r.sharpness_chungend.unwrap().is_infinite());
    }

    #[test]
    fn float_format_round_trips() {
        for x in [1.0, -0.1, 3.5e-13, 1.714e-10, std::f64::consts::PI, 1e300] {
            let s = format_float(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
        assert_eq!(format_float(f64::INFINITY).parse::<f64>().unwrap(), f64::INFINITY);
    }

    #[test]
    fn emit_dat_single_iteration() {
        let trace = EnrichmentTrace {
            records: vec![compute_record(
                0,
                1.0,
                0.25,
                1.0,
                &report(vec![0.9, 0.2], 0),
                Some(2.0),
            )],
            theory: None,
            reference_energy: 1.0,
            stop_reason: StopReason::MaxIter,
            final_rel_error: 0.25,
            config_snapshot: String::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        let files = emit_dat(&trace, dir.path(), false).unwrap();
        assert_eq!(files, ["errors.dat", "convergence.dat", "ineq.dat"]);
        let errors = std::fs::read_to_string(dir.path().join("errors.dat")).unwrap();
        assert_eq!(errors.lines().count(), 1);
        assert_eq!(errors.lines().next().unwrap().parse::<f64>().unwrap(), 1.0);

        // Round-trip: parsed values equal the in-memory trace bitwise.
        let conv = std::fs::read_to_string(dir.path().join("convergence.dat")).unwrap();
        assert_eq!(
            conv.trim().parse::<f64>().unwrap(),
            trace.records[0].rate_metric
        );
        let ineq = std::fs::read_to_string(dir.path().join("ineq.dat")).unwrap();
        let row: Vec<f64> = ineq
            .lines()
            .filter(|l| !l.starts_with('#'))
            .next()
            .unwrap()
            .split(' ')
            .map(|t| t.parse().unwrap())
            .collect();
        assert_eq!(row[0], trace.records[0].sharpness_chungend.unwrap());
        assert_eq!(row[1], trace.records[0].sharpness_r1.unwrap());
        assert_eq!(row[2], trace.records[0].sharpness_r2.unwrap());
    }

    #[test]
    fn emit_dat_rejects_empty_trace() {
        let trace = EnrichmentTrace {
            records: vec![],
            theory: None,
            reference_energy: 1.0,
            stop_reason: StopReason::AbsTolReached,
            final_rel_error: 0.0,
            config_snapshot: String::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_dat(&trace, dir.path(), false).is_err());
    }
}
