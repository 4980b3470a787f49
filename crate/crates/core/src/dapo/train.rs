use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::StepMdp;
use crate::policy::TabularPolicy;

use super::dataset::{AdvantageDataset, AdvantageRecord};

fn check_beta(dataset: &AdvantageDataset) -> Result<()> {
    if !(dataset.beta > 0.0 && dataset.beta.is_finite()) {
        return Err(Error::domain(format!("beta must be positive, got {}", dataset.beta)));
    }
    Ok(())
}

fn residual(r: &AdvantageRecord, beta: f64, theta: &TabularPolicy, reference: &TabularPolicy) -> f64 {
    let s = r.state;
    r.a_hat / beta - (theta.log_probs(s)[r.action.0] - reference.log_probs(s)[r.action.0])
}

fn check_inputs(mdp: &StepMdp, dataset: &AdvantageDataset, theta: &TabularPolicy, reference: &TabularPolicy) -> Result<()> {
    check_beta(dataset)?;
    theta.ensure_fits(mdp)?;
    reference.ensure_fits(mdp)?;
    for r in &dataset.records {
        mdp.check_action(r.state, r.action)?;
    }
    Ok(())
}

/// ½ Σ w (Â/β − log π_θ/π_ref)² with record weights summing to one.
pub fn dapo_loss(mdp: &StepMdp, dataset: &AdvantageDataset, theta: &TabularPolicy, reference: &TabularPolicy) -> Result<f64> {
    check_inputs(mdp, dataset, theta, reference)?;
    Ok(loss_unchecked(&dataset.records, dataset.beta, theta, reference))
}

fn loss_unchecked(records: &[AdvantageRecord], beta: f64, theta: &TabularPolicy, reference: &TabularPolicy) -> f64 {
    records
        .iter()
        .map(|r| 0.5 * r.weight * residual(r, beta, theta, reference).powi(2))
        .sum()
}

/// Gradient of [`dapo_loss`] with respect to the logits of `theta`.
pub fn dapo_gradient(
    mdp: &StepMdp,
    dataset: &AdvantageDataset,
    theta: &TabularPolicy,
    reference: &TabularPolicy,
) -> Result<Vec<Vec<f64>>> {
    check_inputs(mdp, dataset, theta, reference)?;
    let mut grad: Vec<Vec<f64>> = mdp.states().map(|s| vec![0.0; mdp.num_actions(s)]).collect();
    accumulate(&dataset.records, dataset.beta, theta, reference, &mut grad);
    Ok(grad)
}

fn accumulate(
    records: &[AdvantageRecord],
    beta: f64,
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    grad: &mut [Vec<f64>],
) {
    for r in records {
        let c = -r.weight * residual(r, beta, theta, reference);
        let row = &mut grad[r.state.0];
        for (g, p) in row.iter_mut().zip(theta.probs(r.state)) {
            *g -= c * p;
        }
        row[r.action.0] += c;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    Full,
    /// Each step covers `batch_size` whole states.
    StateWise,
    /// Each step covers `batch_size` records drawn without regard to state.
    Shuffled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Step size; each state's step is divided by that state's total record weight.
    pub lr: f64,
    pub max_steps: usize,
    /// Stop once every state's weight-normalized gradient has ∞-norm below this.
    pub tol: f64,
    pub batching: Batching,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1.0,
            max_steps: 200_000,
            tol: 1e-9,
            batching: Batching::Full,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedPolicy {
    pub policy: TabularPolicy,
    pub steps: usize,
    pub loss: f64,
    /// ∞-norm of the weight-normalized gradient at the returned policy.
    pub grad_norm: f64,
    pub converged: bool,
}

fn normalized_grad_norm(grad: &[Vec<f64>], state_weight: &[f64]) -> f64 {
    grad.iter()
        .zip(state_weight)
        .filter(|(_, &w)| w > 0.0)
        .flat_map(|(row, &w)| row.iter().map(move |g| (g / w).abs()))
        .fold(0.0, f64::max)
}

/// Gradient descent on the DAPO loss in logit space.
pub fn train_policy(
    mdp: &StepMdp,
    dataset: &AdvantageDataset,
    reference: &TabularPolicy,
    init: &TabularPolicy,
    config: &TrainConfig,
) -> Result<TrainedPolicy> {
    check_inputs(mdp, dataset, init, reference)?;
    if !(config.lr > 0.0 && config.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", config.lr)));
    }
    if config.batching != Batching::Full && config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let beta = dataset.beta;
    let records = &dataset.records;
    if records.is_empty() {
        return Ok(TrainedPolicy {
            policy: init.clone(),
            steps: 0,
            loss: 0.0,
            grad_norm: 0.0,
            converged: true,
        });
    }
    let mut state_weight = vec![0.0; mdp.num_states()];
    for r in records {
        state_weight[r.state.0] += r.weight;
    }
    let groups: Vec<&[AdvantageRecord]> = dataset.groups().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut cursor = 0usize;

    let mut logits = init.logits().to_vec();
    let mut theta = init.clone();
    let mut grad: Vec<Vec<f64>> = mdp.states().map(|s| vec![0.0; mdp.num_actions(s)]).collect();
    let mut batch: Vec<AdvantageRecord> = Vec::new();

    let full_grad = |theta: &TabularPolicy, grad: &mut Vec<Vec<f64>>| {
        grad.iter_mut().for_each(|row| row.iter_mut().for_each(|g| *g = 0.0));
        accumulate(records, beta, theta, reference, grad);
        normalized_grad_norm(grad, &state_weight)
    };

    let mut loss = loss_unchecked(records, beta, &theta, reference);
    let mut grad_norm = full_grad(&theta, &mut grad);
    let mut increases = 0usize;
    let mut steps = 0usize;
    while steps < config.max_steps && !(grad_norm < config.tol) {
        match config.batching {
            Batching::Full => {}
            Batching::StateWise => {
                batch.clear();
                for _ in 0..config.batch_size.min(groups.len()) {
                    batch.extend_from_slice(groups[cursor % groups.len()]);
                    cursor += 1;
                }
            }
            Batching::Shuffled => {
                batch.clear();
                for _ in 0..config.batch_size.min(records.len()) {
                    if cursor % records.len() == 0 {
                        order.shuffle(&mut rng);
                    }
                    batch.push(records[order[cursor % records.len()]]);
                    cursor += 1;
                }
            }
        }
        if config.batching != Batching::Full {
            grad.iter_mut().for_each(|row| row.iter_mut().for_each(|g| *g = 0.0));
            accumulate(&batch, beta, &theta, reference, &mut grad);
        }
        for (s, row) in grad.iter().enumerate() {
            let w = state_weight[s];
            if w > 0.0 {
                for (l, g) in logits[s].iter_mut().zip(row) {
                    *l -= config.lr * g / w;
                }
            }
        }
        theta = TabularPolicy::from_logits(mdp, logits.clone())?.with_tag(init.tag().to_string());
        steps += 1;

        let next_loss = loss_unchecked(records, beta, &theta, reference);
        grad_norm = full_grad(&theta, &mut grad);
        if !next_loss.is_finite() {
            return Err(Error::Diverged { steps, loss: next_loss, grad_norm });
        }
        if next_loss > loss {
            increases += 1;
            if increases >= 100 {
                return Err(Error::Diverged { steps, loss: next_loss, grad_norm });
            }
        } else {
            increases = 0;
        }
        loss = next_loss;
    }
    Ok(TrainedPolicy {
        policy: theta,
        steps,
        loss,
        grad_norm,
        converged: grad_norm < config.tol,
    })
}
