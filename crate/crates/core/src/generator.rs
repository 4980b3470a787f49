//! Random layered DAG MDPs for randomized certification and the `gen-mdp` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{MdpFile, MuEntry, StateEntry, StepMdp, TransitionEntry};
use crate::policy::TabularPolicy;

/// Parameters of one generated MDP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenParams {
    pub depth: usize,
    pub branching: usize,
    /// Maximum number of nonterminal states per layer; a narrower layer than
    /// `branching^d` forces state sharing.
    #[serde(default)]
    pub width_cap: Option<usize>,
    /// Probability that a terminal state pays reward 1.
    #[serde(default = "default_reward_prob")]
    pub reward_prob: f64,
    /// Probability that an internal action ends the episode early.
    #[serde(default)]
    pub early_terminal_prob: f64,
    #[serde(default = "default_state_cap")]
    pub state_cap: usize,
}

fn default_reward_prob() -> f64 {
    0.5
}

fn default_state_cap() -> usize {
    100_000
}

impl GenParams {
    pub fn new(depth: usize, branching: usize) -> Self {
        GenParams {
            depth,
            branching,
            width_cap: None,
            reward_prob: default_reward_prob(),
            early_terminal_prob: 0.0,
            state_cap: default_state_cap(),
        }
    }

    fn layer_width(&self, d: usize) -> usize {
        let full = self.branching.checked_pow(d as u32).unwrap_or(usize::MAX);
        self.width_cap.map_or(full, |c| full.min(c))
    }

    /// Upper bound on the number of states the generator can emit.
    pub fn state_bound(&self) -> usize {
        let mut total: usize = 0;
        for d in 0..self.depth {
            let w = self.layer_width(d);
            // w nonterminals plus at most w * branching terminals hanging off them
            total = total
                .saturating_add(w)
                .saturating_add(w.saturating_mul(self.branching));
        }
        total
    }

    fn check(&self) -> Result<()> {
        if self.depth < 1 || self.branching < 1 {
            return Err(Error::Config("depth and branching must be at least 1".into()));
        }
        if self.width_cap == Some(0) {
            return Err(Error::Config("width_cap must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.reward_prob) || !(0.0..=1.0).contains(&self.early_terminal_prob) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        let bound = self.state_bound();
        if bound > self.state_cap {
            return Err(Error::Config(format!(
                "parameters allow up to {bound} states, cap is {}",
                self.state_cap
            )));
        }
        Ok(())
    }
}

/// Generate a layered DAG. Layer 0 is the single start state; layers share
/// states when `width_cap` is below `branching^d`; the last nonterminal layer
/// and early exits lead to fresh terminal states. Validated before returning.
pub fn gen_random_mdp(params: &GenParams, seed: u64) -> Result<MdpFile> {
    params.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::new();
    let mut transitions = Vec::new();
    let mut terminals = 0usize;
    let mut fresh_terminal = |rng: &mut ChaCha8Rng, states: &mut Vec<StateEntry>| {
        let id = format!("t{terminals}");
        terminals += 1;
        let reward = if rng.random_bool(params.reward_prob) { 1.0 } else { 0.0 };
        states.push(StateEntry { id: id.clone(), terminal: true, reward: Some(reward) });
        id
    };

    let name = |d: usize, i: usize| format!("n{d}_{i}");
    for d in 0..params.depth {
        for i in 0..params.layer_width(d) {
            states.push(StateEntry { id: name(d, i), terminal: false, reward: None });
        }
    }
    for d in 0..params.depth {
        let width = params.layer_width(d);
        let last = d + 1 == params.depth;
        let next_width = if last { 0 } else { params.layer_width(d + 1) };
        // Cover every state of the next layer once, then fill the remaining slots randomly.
        let slots = width * params.branching;
        let mut targets: Vec<usize> = (0..next_width.min(slots)).collect();
        while targets.len() < slots && next_width > 0 {
            targets.push(rng.random_range(0..next_width));
        }
        // Fisher-Yates so the covering edges are spread over parents.
        for k in (1..targets.len()).rev() {
            let j = rng.random_range(0..=k);
            targets.swap(k, j);
        }
        for i in 0..width {
            for a in 0..params.branching {
                let to = if last || rng.random_bool(params.early_terminal_prob) {
                    fresh_terminal(&mut rng, &mut states)
                } else {
                    name(d + 1, targets[i * params.branching + a])
                };
                transitions.push(TransitionEntry { from: name(d, i), action: format!("a{a}"), to });
            }
        }
    }
    let file = MdpFile {
        states,
        transitions,
        mu: vec![MuEntry { state: name(0, 0), prob: 1.0 }],
        horizon_bound: params.depth,
    };
    let report = file.validate();
    if !report.is_valid() {
        return Err(Error::InvalidMdp(report));
    }
    Ok(file)
}

/// Ranges the randomized certificates draw instances from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomMdpParams {
    pub depth: (usize, usize),
    pub branching: (usize, usize),
    pub width_cap: usize,
    pub reward_prob: (f64, f64),
    pub early_terminal_prob: f64,
    pub logit_sigmas: Vec<f64>,
}

impl Default for RandomMdpParams {
    fn default() -> Self {
        RandomMdpParams {
            depth: (2, 6),
            branching: (2, 4),
            width_cap: 6,
            reward_prob: (0.1, 0.9),
            early_terminal_prob: 0.1,
            logit_sigmas: vec![0.5, 2.0],
        }
    }
}

/// A generated MDP together with the draws that produced it.
#[derive(Clone, Debug)]
pub struct RandomInstance {
    pub seed: u64,
    pub mdp: StepMdp,
    pub depth: usize,
    pub branching: usize,
    pub reward_prob: f64,
    pub sigma: f64,
}

pub fn random_instance(params: &RandomMdpParams, seed: u64) -> RandomInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_1257A1CE);
    let depth = rng.random_range(params.depth.0..=params.depth.1);
    let branching = rng.random_range(params.branching.0..=params.branching.1);
    let reward_prob = if params.reward_prob.0 < params.reward_prob.1 {
        rng.random_range(params.reward_prob.0..=params.reward_prob.1)
    } else {
        params.reward_prob.0
    };
    let sigma = params.logit_sigmas[rng.random_range(0..params.logit_sigmas.len())];
    let gen = GenParams {
        depth,
        branching,
        width_cap: Some(params.width_cap),
        reward_prob,
        early_terminal_prob: params.early_terminal_prob,
        state_cap: default_state_cap(),
    };
    let file = gen_random_mdp(&gen, rng.random()).expect("generator parameters are in range");
    RandomInstance {
        seed,
        mdp: StepMdp::from_file(&file).expect("generated MDP validates"),
        depth,
        branching,
        reward_prob,
        sigma,
    }
}

/// Softmax policy with i.i.d. Normal(0, σ) logits.
pub fn random_policy<R: Rng>(mdp: &StepMdp, sigma: f64, rng: &mut R) -> TabularPolicy {
    let normal = Normal::new(0.0, sigma).expect("sigma is positive");
    let logits = mdp
        .states()
        .map(|s| (0..mdp.num_actions(s)).map(|_| normal.sample(rng)).collect())
        .collect();
    TabularPolicy::from_logits(mdp, logits).expect("normal logits are finite")
}
