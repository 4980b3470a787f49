use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use crate::error::Result;

use super::pipeline::{hash_file, RunManifest, ITERATIONS_CSV};

const MONOTONE_SLACK: f64 = 1e-9;
pub const VERIFY_CSV: &str = "verify.csv";

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub v_reference: f64,
    pub v_beta: f64,
    pub v_unregularized: f64,
    pub v_beta_star: f64,
    pub v_beta_initial: f64,
    pub retained_states: usize,
    pub dropped_states: usize,
    pub train_steps: usize,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub lambda_mean: Option<f64>,
    pub lambda_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct VerifyRow {
    pub check_name: String,
    pub instances: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub rows: Vec<IterationRow>,
    /// Per row: V_β did not drop below the previous round (or the initial reference).
    pub monotone: Vec<bool>,
    pub checks: Vec<VerifyRow>,
    pub missing: Vec<String>,
    pub hash_mismatches: Vec<String>,
}

impl RunReport {
    pub fn all_monotone(&self) -> bool {
        self.monotone.iter().all(|&m| m)
    }

    pub fn checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn complete(&self) -> bool {
        self.missing.is_empty() && self.hash_mismatches.is_empty()
    }

    /// 0 when complete, monotone and every check passed; 2 for missing or
    /// altered artifacts; 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if !self.complete() {
            2
        } else if !self.all_monotone() || !self.checks_passed() {
            1
        } else {
            0
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>4}  {:>12}  {:>12}  {:>12}  {:>12}  {:>8}  {:>10}  {:>10}  {}",
            "iter", "V_ref", "V_beta", "V", "V_beta*", "states", "lambda_avg", "lambda_max", "monotone"
        );
        for (r, m) in self.rows.iter().zip(&self.monotone) {
            let l = |x: Option<f64>| x.map(|v| format!("{v:>10.4e}")).unwrap_or_else(|| format!("{:>10}", "-"));
            let _ = writeln!(
                out,
                "{:>4}  {:>12.8}  {:>12.8}  {:>12.8}  {:>12.8}  {:>8}  {}  {}  {}",
                r.iteration,
                r.v_reference,
                r.v_beta,
                r.v_unregularized,
                r.v_beta_star,
                r.retained_states,
                l(r.lambda_mean),
                l(r.lambda_max),
                if *m { "ok" } else { "VIOLATED" }
            );
        }
        for c in &self.checks {
            let _ = writeln!(
                out,
                "check {:<36} max residual {:.3e} (tol {:.1e}) {}",
                c.check_name,
                c.max_residual,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
        for m in &self.missing {
            let _ = writeln!(out, "missing artifact: {m}");
        }
        for m in &self.hash_mismatches {
            let _ = writeln!(out, "hash mismatch: {m}");
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "v_reference", "v_beta", "v_unregularized", "v_beta_star", "lambda_mean", "lambda_max", "monotone"])?;
        for (r, m) in self.rows.iter().zip(&self.monotone) {
            out.write_record([
                r.iteration.to_string(),
                format!("{:?}", r.v_reference),
                format!("{:?}", r.v_beta),
                format!("{:?}", r.v_unregularized),
                format!("{:?}", r.v_beta_star),
                r.lambda_mean.map(|x| format!("{x:?}")).unwrap_or_default(),
                r.lambda_max.map(|x| format!("{x:?}")).unwrap_or_default(),
                m.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Summarize a run directory. Only a missing or unreadable manifest is an
/// error; missing artifacts are listed and the rest is still reported.
pub fn report(run_dir: impl AsRef<Path>) -> Result<RunReport> {
    let dir = run_dir.as_ref();
    let manifest = RunManifest::load(dir)?;
    let mut rep = RunReport::default();
    for a in &manifest.artifacts {
        let path = dir.join(&a.path);
        if !path.exists() {
            rep.missing.push(a.path.clone());
            continue;
        }
        if hash_file(&path)?.0 != a.sha256 {
            rep.hash_mismatches.push(a.path.clone());
        }
    }
    let iterations = dir.join(ITERATIONS_CSV);
    if iterations.exists() {
        for row in csv::Reader::from_path(&iterations)?.deserialize() {
            rep.rows.push(row?);
        }
    }
    let mut prev: Option<f64> = None;
    for r in &rep.rows {
        let floor = prev.unwrap_or(r.v_reference).max(r.v_reference);
        rep.monotone.push(r.v_beta >= floor - MONOTONE_SLACK);
        prev = Some(r.v_beta);
    }
    let verify = dir.join(VERIFY_CSV);
    if verify.exists() {
        for row in csv::Reader::from_path(&verify)?.deserialize() {
            rep.checks.push(row?);
        }
    }
    Ok(rep)
}
