use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::critic::write_targets_csv;
use crate::dapo::{iterate_dapo, solve_exact_policy, IterationOutcome};
use crate::error::{Error, Result};
use crate::mdp::StepMdp;
use crate::rng::stage_seed;

use super::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ITERATIONS_CSV: &str = "iterations.csv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn load(run_dir: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(run_dir.as_ref().join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn hash_file(path: impl AsRef<Path>) -> Result<(String, u64)> {
    let bytes = fs::read(path)?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

struct Writer {
    root: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Writer {
    fn write(&mut self, rel: &str, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, &buf)?;
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(&buf)),
            bytes: buf.len() as u64,
        });
        Ok(())
    }
}

fn with_stage<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage { stage: stage.into(), source: Box::new(e) },
    })
}

/// λ statistics over the exact per-state solution, when every retained state
/// carries all of its actions.
fn lambda_stats(mdp: &StepMdp, o: &IterationOutcome) -> Option<(f64, f64)> {
    if o.dataset.is_empty() {
        return None;
    }
    let sol = solve_exact_policy(mdp, &o.dataset, &o.reference).ok()?;
    let lambdas: Vec<f64> = sol.per_state.keys().filter_map(|&s| sol.lambda_s(s)).collect();
    let mean = lambdas.iter().sum::<f64>() / lambdas.len() as f64;
    let max = lambdas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((mean, max))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:?}")).unwrap_or_default()
}

fn write_iterations(mdp: &StepMdp, outcomes: &[IterationOutcome], buf: &mut Vec<u8>) -> Result<()> {
    let mut w = csv::Writer::from_writer(buf);
    w.write_record([
        "iteration",
        "v_reference",
        "v_beta",
        "v_unregularized",
        "v_beta_star",
        "v_beta_initial",
        "retained_states",
        "dropped_states",
        "train_steps",
        "train_loss",
        "grad_norm",
        "converged",
        "lambda_mean",
        "lambda_max",
    ])?;
    for o in outcomes {
        let stats = lambda_stats(mdp, o);
        w.write_record([
            o.iteration.to_string(),
            format!("{:?}", o.v_reference),
            format!("{:?}", o.v_beta),
            format!("{:?}", o.v_unregularized),
            format!("{:?}", o.v_beta_star),
            format!("{:?}", o.v_beta_initial),
            o.dataset.states().len().to_string(),
            o.dataset.dropped.len().to_string(),
            o.trained.steps.to_string(),
            format!("{:?}", o.trained.loss),
            format!("{:?}", o.trained.grad_norm),
            o.trained.converged.to_string(),
            opt(stats.map(|s| s.0)),
            opt(stats.map(|s| s.1)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Run the configured pipeline and write every artifact under `out_dir`,
/// followed by `manifest.json` listing each artifact's SHA-256.
///
/// Artifacts: `mdp.json`, `iterations.csv`, and per iteration `iter{k}/`
/// `values_ref.csv`, `dataset.csv`, `policy.csv`, `values_policy.csv`, plus
/// `targets.csv` and `critic.csv` when advantages come from a critic.
pub fn run_pipeline(config: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<RunManifest> {
    with_stage("config", config.validate())?;
    let mdp = with_stage("load", config.load_mdp())?;
    let ref0 = with_stage("load", config.load_reference(&mdp))?;
    let root = out_dir.as_ref().to_path_buf();
    with_stage("output", fs::create_dir_all(&root).map_err(Error::from))?;
    let mut w = Writer { root, artifacts: Vec::new() };

    with_stage(
        "output",
        w.write("mdp.json", |b| {
            b.extend_from_slice(mdp.to_file().to_json()?.as_bytes());
            b.push(b'\n');
            Ok(())
        }),
    )?;
    let outcomes = iterate_dapo(&mdp, &ref0, &config.pipeline, stage_seed(config.master_seed, "pipeline"))?;
    with_stage("output", w.write(ITERATIONS_CSV, |b| write_iterations(&mdp, &outcomes, b)))?;
    for o in &outcomes {
        let dir = format!("iter{}", o.iteration);
        with_stage("output", (|| {
            w.write(&format!("{dir}/values_ref.csv"), |b| o.ref_values.write_csv(&mdp, b))?;
            if let Some(critic) = &o.critic {
                w.write(&format!("{dir}/targets.csv"), |b| write_targets_csv(&mdp, &o.targets, b))?;
                w.write(&format!("{dir}/critic.csv"), |b| critic.write_csv(&mdp, b))?;
            }
            w.write(&format!("{dir}/dataset.csv"), |b| o.dataset.write_csv(&mdp, b))?;
            w.write(&format!("{dir}/policy.csv"), |b| o.trained.policy.write_csv(&mdp, b))?;
            w.write(&format!("{dir}/values_policy.csv"), |b| o.policy_values.write_csv(&mdp, b))
        })())?;
    }

    let manifest = RunManifest {
        config: config.clone(),
        artifacts: w.artifacts,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let mut f = with_stage("output", fs::File::create(w.root.join(MANIFEST_FILE)).map_err(Error::from))?;
    with_stage("output", f.write_all(text.as_bytes()).map_err(Error::from))?;
    Ok(manifest)
}
