use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::critic::{generate_states, mc_estimate, train_critic, CriticConfig, CriticTable, McTarget};
use crate::error::{Error, Result};
use crate::mdp::{ActionId, StateId, StepMdp};
use crate::policy::TabularPolicy;
use crate::rng::{derive_key, stage_seed};
use crate::values::{evaluate, solve_optimal, ValueTable};

use super::dataset::{build_advantage_dataset, AdvantageDataset, AdvantageSource, DatasetConfig, SuccessorValues};
use super::train::{train_policy, TrainConfig, TrainedPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StateSelection {
    /// Every nonterminal state reachable from μ, weight one each.
    Reachable,
    /// Nonterminal states visited by reference rollouts from each start state,
    /// weighted by visit count.
    Rollouts { per_start: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub beta: f64,
    pub iterations: usize,
    pub source: AdvantageSource,
    pub states: StateSelection,
    /// Completions per state for critic targets.
    pub completions: u64,
    pub critic: CriticConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            beta: 1.0,
            iterations: 1,
            source: AdvantageSource::Exact,
            states: StateSelection::Reachable,
            completions: 4096,
            critic: CriticConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.source == AdvantageSource::Critic && self.completions == 0 {
            return Err(Error::Config("completions must be at least 1".into()));
        }
        if let StateSelection::Rollouts { per_start: 0 } = self.states {
            return Err(Error::Config("rollouts per start must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything one round of the pipeline produced.
#[derive(Clone, Debug)]
pub struct IterationOutcome {
    /// 1-based.
    pub iteration: usize,
    pub reference: TabularPolicy,
    /// `evaluate(ref, ref, 0)`.
    pub ref_values: ValueTable,
    pub states: Vec<(StateId, f64)>,
    pub targets: Vec<McTarget>,
    pub critic: Option<CriticTable>,
    pub dataset: AdvantageDataset,
    pub trained: TrainedPolicy,
    /// `evaluate(policy, ref, β)`.
    pub policy_values: ValueTable,
    /// V_β^{π_k}(μ) regularized toward this round's reference.
    pub v_beta: f64,
    /// V^{π_k}(μ).
    pub v_unregularized: f64,
    /// V^{π_ref}(μ), which equals V_β^{π_ref}(μ) toward itself.
    pub v_reference: f64,
    /// V_β^*(μ) toward this round's reference.
    pub v_beta_star: f64,
    /// V_β^{π_k}(μ) regularized toward the initial reference.
    pub v_beta_initial: f64,
}

fn select_states(
    mdp: &StepMdp,
    reference: &TabularPolicy,
    selection: StateSelection,
    seed: u64,
) -> Result<Vec<(StateId, f64)>> {
    match selection {
        StateSelection::Reachable => Ok(mdp
            .reachable()
            .into_iter()
            .filter(|&s| !mdp.is_terminal(s))
            .map(|s| (s, 1.0))
            .collect()),
        StateSelection::Rollouts { per_start } => {
            let starts: Vec<StateId> = mdp.mu().iter().map(|&(s, _)| s).collect();
            let visits = generate_states(mdp, reference, &starts, per_start, seed)?;
            Ok(visits.into_iter().map(|(s, n)| (s, n as f64)).collect())
        }
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { stage: name.into(), source: Box::new(e) })
}

/// One round: select states, estimate values, build the dataset and train
/// starting from the reference.
pub fn run_iteration(
    mdp: &StepMdp,
    reference: &TabularPolicy,
    initial: &TabularPolicy,
    config: &PipelineConfig,
    iteration: usize,
    seed: u64,
) -> Result<IterationOutcome> {
    let beta = config.beta;
    let ref_values = stage("values", evaluate(mdp, reference, reference, 0.0))?;
    let states = stage("states", select_states(mdp, reference, config.states, stage_seed(seed, "states")))?;

    let mut targets = Vec::new();
    let mut critic = None;
    if config.source == AdvantageSource::Critic {
        let needed: BTreeSet<StateId> = states
            .iter()
            .flat_map(|&(s, _)| {
                std::iter::once(s).chain((0..mdp.num_actions(s)).map(move |a| mdp.next(s, ActionId(a))))
            })
            .filter(|&s| !mdp.is_terminal(s))
            .collect();
        let key = stage_seed(seed, "completions");
        targets = stage(
            "completions",
            needed
                .iter()
                .map(|&s| mc_estimate(mdp, reference, s, config.completions, derive_key(key, s.0 as u64)))
                .collect::<Result<Vec<_>>>(),
        )?;
        critic = Some(stage("critic", train_critic(&targets, &config.critic))?);
    }
    let values = match &critic {
        Some(c) => SuccessorValues::Critic(c),
        None => SuccessorValues::Exact(&ref_values),
    };
    let dataset = stage(
        "dataset",
        build_advantage_dataset(mdp, &states, reference, values, beta, &config.dataset, stage_seed(seed, "dataset")),
    )?;
    let train_config = TrainConfig { seed: stage_seed(seed, "train"), ..config.train.clone() };
    let trained = stage("train", train_policy(mdp, &dataset, reference, reference, &train_config))?;
    let policy = trained.policy.clone().with_tag(format!("iter{iteration}"));
    let trained = TrainedPolicy { policy, ..trained };

    let policy_values = stage("evaluate", evaluate(mdp, &trained.policy, reference, beta))?;
    let unreg = stage("evaluate", evaluate(mdp, &trained.policy, reference, 0.0))?;
    let initial_values = stage("evaluate", evaluate(mdp, &trained.policy, initial, beta))?;
    let optimal = stage("optimal", solve_optimal(mdp, reference, beta))?;
    let mu = mdp.mu();
    Ok(IterationOutcome {
        iteration,
        reference: reference.clone(),
        v_beta: policy_values.expected(mu),
        v_unregularized: unreg.expected(mu),
        v_reference: ref_values.expected(mu),
        v_beta_star: mu.iter().map(|&(s, p)| p * optimal.v_star[s.0]).sum(),
        v_beta_initial: initial_values.expected(mu),
        ref_values,
        states,
        targets,
        critic,
        dataset,
        trained,
        policy_values,
    })
}

/// Run the pipeline `iterations` times, feeding each output back as the next reference.
/// Round `k` draws its seeds from `derive_key(seed, k)`.
pub fn iterate_dapo(
    mdp: &StepMdp,
    ref0: &TabularPolicy,
    config: &PipelineConfig,
    seed: u64,
) -> Result<Vec<IterationOutcome>> {
    config.validate()?;
    ref0.ensure_fits(mdp)?;
    let mut out: Vec<IterationOutcome> = Vec::with_capacity(config.iterations);
    let mut reference = ref0.clone();
    for k in 1..=config.iterations {
        let outcome = run_iteration(mdp, &reference, ref0, config, k, derive_key(seed, k as u64))
            .map_err(|e| Error::Iteration { iteration: k, source: Box::new(e) })?;
        reference = outcome.trained.policy.clone();
        out.push(outcome);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dapo::ActionMode;
    use crate::fixtures::t2;

    #[test]
    fn t2_five_rounds_are_monotone() {
        let mdp = t2();
        let u = TabularPolicy::uniform(&mdp);
        let cfg = PipelineConfig { iterations: 5, ..PipelineConfig::default() };
        let out = iterate_dapo(&mdp, &u, &cfg, 7).unwrap();
        assert_eq!(out.len(), 5);
        let mut prev = out[0].v_reference;
        for o in &out {
            assert!(o.v_beta >= o.v_reference - 1e-9);
            assert!(o.v_beta >= prev - 1e-9, "{} < {}", o.v_beta, prev);
            prev = o.v_beta;
        }
        assert!(out[0].v_beta > out[0].v_reference);
    }

    #[test]
    fn single_round_matches_direct_training() {
        let mdp = t2();
        let u = TabularPolicy::uniform(&mdp);
        let cfg = PipelineConfig::default();
        let out = iterate_dapo(&mdp, &u, &cfg, 3).unwrap();
        let direct = run_iteration(&mdp, &u, &u, &cfg, 1, derive_key(3, 1)).unwrap();
        assert_eq!(out[0].trained.policy, direct.trained.policy);
    }

    #[test]
    fn optimal_reference_is_a_fixed_point() {
        let mdp = crate::fixtures::chain(3, true);
        let u = TabularPolicy::uniform(&mdp);
        let star = solve_optimal(&mdp, &u, 1.0).unwrap().pi_star;
        let cfg = PipelineConfig {
            iterations: 3,
            dataset: DatasetConfig { actions: ActionMode::Full, ..DatasetConfig::default() },
            ..PipelineConfig::default()
        };
        for o in iterate_dapo(&mdp, &star, &cfg, 0).unwrap() {
            assert!((o.v_beta - o.v_beta_star).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_iterations_rejected() {
        let mdp = t2();
        let u = TabularPolicy::uniform(&mdp);
        let cfg = PipelineConfig { iterations: 0, ..PipelineConfig::default() };
        assert!(matches!(iterate_dapo(&mdp, &u, &cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn critic_round_improves_t2() {
        let mdp = t2();
        let u = TabularPolicy::uniform(&mdp);
        let cfg = PipelineConfig { source: AdvantageSource::Critic, ..PipelineConfig::default() };
        let out = iterate_dapo(&mdp, &u, &cfg, 11).unwrap();
        assert!(out[0].critic.is_some());
        assert!(out[0].v_beta > out[0].v_reference);
    }
}
