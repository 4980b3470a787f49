//! Finite step-level MDPs with deterministic transitions and binary terminal rewards.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TabularPolicy;
use crate::rng::{counter_uniform, pick_index};

/// Index of a state inside a [`StepMdp`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateId(pub usize);

/// Index of an action inside its state's ordered action list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActionId(pub usize);

const MU_TOLERANCE: f64 = 1e-12;

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateEntry {
    pub id: String,
    pub terminal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionEntry {
    pub from: String,
    pub action: String,
    pub to: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuEntry {
    pub state: String,
    pub prob: f64,
}

/// On-disk description of an MDP. May be invalid; see [`MdpFile::validate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpFile {
    pub states: Vec<StateEntry>,
    pub transitions: Vec<TransitionEntry>,
    pub mu: Vec<MuEntry>,
    pub horizon_bound: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NoStates,
    DuplicateState(String),
    UnknownSource { action: String, state: String },
    UnknownTarget { from: String, action: String, to: String },
    TransitionFromTerminal { state: String, action: String },
    DuplicateAction { state: String, action: String },
    NoActions(String),
    MissingReward(String),
    NonBinaryReward { state: String, reward: f64 },
    RewardOnNonterminal(String),
    AncestorRevisit { from: String, action: String, to: String },
    HorizonExceeded { state: String, steps: usize, bound: usize },
    ZeroHorizon,
    EmptyMu,
    MuUnknownState(String),
    MuDuplicate(String),
    MuNonPositive { state: String, prob: f64 },
    MuSum(f64),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            NoStates => write!(f, "no states declared"),
            DuplicateState(s) => write!(f, "duplicate state id `{s}`"),
            UnknownSource { action, state } => {
                write!(f, "transition `{action}` leaves undeclared state `{state}`")
            }
            UnknownTarget { from, action, to } => {
                write!(f, "transition `{from}` --{action}--> undeclared state `{to}`")
            }
            TransitionFromTerminal { state, action } => {
                write!(f, "terminal state `{state}` has action `{action}`")
            }
            DuplicateAction { state, action } => {
                write!(f, "action `{action}` declared twice at state `{state}`")
            }
            NoActions(s) => write!(f, "nonterminal state `{s}` has no actions"),
            MissingReward(s) => write!(f, "terminal state `{s}` has no reward"),
            NonBinaryReward { state, reward } => {
                write!(f, "terminal state `{state}` has reward {reward}, expected 0 or 1")
            }
            RewardOnNonterminal(s) => write!(f, "nonterminal state `{s}` carries a reward"),
            AncestorRevisit { from, action, to } => {
                write!(f, "cycle/ancestor revisit: `{from}` --{action}--> `{to}`")
            }
            HorizonExceeded { state, steps, bound } => write!(
                f,
                "longest path from `{state}` takes {steps} steps, horizon_bound is {bound}"
            ),
            ZeroHorizon => write!(f, "horizon_bound must be positive"),
            EmptyMu => write!(f, "μ lists no start states"),
            MuUnknownState(s) => write!(f, "μ references undeclared state `{s}`"),
            MuDuplicate(s) => write!(f, "μ lists state `{s}` twice"),
            MuNonPositive { state, prob } => write!(f, "μ({state}) = {prob} is not positive"),
            MuSum(sum) => write!(f, "μ sums to {sum}"),
        }
    }
}

/// Every violated invariant of an MDP description. Empty means valid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "- {v}")?;
        }
        Ok(())
    }
}

impl MdpFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Collect every violated invariant. Never fails.
    pub fn validate(&self) -> ValidationReport {
        let mut out = Vec::new();
        if self.states.is_empty() {
            out.push(Violation::NoStates);
        }
        if self.horizon_bound == 0 {
            out.push(Violation::ZeroHorizon);
        }

        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, st) in self.states.iter().enumerate() {
            if index.insert(st.id.as_str(), i).is_some() {
                out.push(Violation::DuplicateState(st.id.clone()));
            }
            match (st.terminal, st.reward) {
                (true, None) => out.push(Violation::MissingReward(st.id.clone())),
                (true, Some(r)) if r != 0.0 && r != 1.0 => out.push(Violation::NonBinaryReward {
                    state: st.id.clone(),
                    reward: r,
                }),
                (false, Some(_)) => out.push(Violation::RewardOnNonterminal(st.id.clone())),
                _ => {}
            }
        }

        let n = self.states.len();
        let mut children: Vec<Vec<(usize, &str)>> = vec![Vec::new(); n];
        let mut labels: HashSet<(usize, &str)> = HashSet::new();
        let mut has_action = vec![false; n];
        for t in &self.transitions {
            let Some(&from) = index.get(t.from.as_str()) else {
                out.push(Violation::UnknownSource {
                    action: t.action.clone(),
                    state: t.from.clone(),
                });
                continue;
            };
            if self.states[from].terminal {
                out.push(Violation::TransitionFromTerminal {
                    state: t.from.clone(),
                    action: t.action.clone(),
                });
                continue;
            }
            if !labels.insert((from, t.action.as_str())) {
                out.push(Violation::DuplicateAction {
                    state: t.from.clone(),
                    action: t.action.clone(),
                });
                continue;
            }
            has_action[from] = true;
            match index.get(t.to.as_str()) {
                Some(&to) => children[from].push((to, t.action.as_str())),
                None => out.push(Violation::UnknownTarget {
                    from: t.from.clone(),
                    action: t.action.clone(),
                    to: t.to.clone(),
                }),
            }
        }
        for (i, st) in self.states.iter().enumerate() {
            if !st.terminal && !has_action[i] {
                out.push(Violation::NoActions(st.id.clone()));
            }
        }

        // Cycle detection by iterative DFS; every back edge is reported.
        let back_edges = find_back_edges(&children);
        for (from, slot) in &back_edges {
            let (to, action) = children[*from][*slot];
            out.push(Violation::AncestorRevisit {
                from: self.states[*from].id.clone(),
                action: action.to_string(),
                to: self.states[to].id.clone(),
            });
        }
        if back_edges.is_empty() && self.horizon_bound > 0 {
            let depth = longest_paths(&children);
            if let Some((worst, &steps)) = depth.iter().enumerate().max_by_key(|(i, d)| (**d, std::cmp::Reverse(*i))) {
                if steps > self.horizon_bound {
                    out.push(Violation::HorizonExceeded {
                        state: self.states[worst].id.clone(),
                        steps,
                        bound: self.horizon_bound,
                    });
                }
            }
        }

        if self.mu.is_empty() {
            out.push(Violation::EmptyMu);
        }
        let mut seen = HashSet::new();
        let mut sum = 0.0;
        for m in &self.mu {
            if !index.contains_key(m.state.as_str()) {
                out.push(Violation::MuUnknownState(m.state.clone()));
            }
            if !seen.insert(m.state.as_str()) {
                out.push(Violation::MuDuplicate(m.state.clone()));
            }
            if !(m.prob > 0.0) {
                out.push(Violation::MuNonPositive {
                    state: m.state.clone(),
                    prob: m.prob,
                });
            }
            sum += m.prob;
        }
        if !self.mu.is_empty() && (sum - 1.0).abs() > MU_TOLERANCE {
            out.push(Violation::MuSum(sum));
        }

        ValidationReport { violations: out }
    }
}

fn find_back_edges(children: &[Vec<(usize, &str)>]) -> Vec<(usize, usize)> {
    const WHITE: u8 = 0;
    const GRAY: u8 = 1;
    const BLACK: u8 = 2;
    let n = children.len();
    let mut color = vec![WHITE; n];
    let mut back = Vec::new();
    for root in 0..n {
        if color[root] != WHITE {
            continue;
        }
        let mut stack = vec![(root, 0usize)];
        color[root] = GRAY;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if *next < children[node].len() {
                let slot = *next;
                *next += 1;
                let child = children[node][slot].0;
                match color[child] {
                    WHITE => {
                        color[child] = GRAY;
                        stack.push((child, 0));
                    }
                    GRAY => back.push((node, slot)),
                    _ => {}
                }
            } else {
                color[node] = BLACK;
                stack.pop();
            }
        }
    }
    back
}

/// Longest path length (in steps) from each node; graph must be acyclic.
fn longest_paths(children: &[Vec<(usize, &str)>]) -> Vec<usize> {
    let order = postorder(children.len(), |i| children[i].iter().map(|c| c.0));
    let mut depth = vec![0usize; children.len()];
    for &s in &order {
        depth[s] = children[s].iter().map(|&(c, _)| depth[c] + 1).max().unwrap_or(0);
    }
    depth
}

/// DFS postorder over all nodes: every node appears after all of its descendants.
fn postorder<I: Iterator<Item = usize>>(n: usize, succ: impl Fn(usize) -> I) -> Vec<usize> {
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for root in 0..n {
        if visited[root] {
            continue;
        }
        visited[root] = true;
        let mut stack: Vec<(usize, Vec<usize>)> = vec![(root, succ(root).collect())];
        while let Some((node, pending)) = stack.last_mut() {
            if let Some(c) = pending.pop() {
                if !visited[c] {
                    visited[c] = true;
                    let next: Vec<usize> = succ(c).collect();
                    stack.push((c, next));
                }
            } else {
                order.push(*node);
                stack.pop();
            }
        }
    }
    order
}

// ---------------------------------------------------------------------------
// Validated MDP
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub label: String,
    pub next: StateId,
}

#[derive(Clone, Debug, PartialEq)]
struct StateNode {
    name: String,
    terminal: bool,
    reward: u8,
    actions: Vec<Edge>,
}

/// A validated step-level MDP. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMdp {
    states: Vec<StateNode>,
    index: HashMap<String, StateId>,
    mu: Vec<(StateId, f64)>,
    horizon_bound: usize,
    /// Successors before predecessors.
    backward: Vec<StateId>,
}

impl TryFrom<MdpFile> for StepMdp {
    type Error = Error;

    fn try_from(file: MdpFile) -> Result<Self> {
        StepMdp::from_file(&file)
    }
}

impl StepMdp {
    /// Validate and build. Invalid descriptions are refused with the full report.
    pub fn from_file(file: &MdpFile) -> Result<Self> {
        let report = file.validate();
        if !report.is_valid() {
            return Err(Error::InvalidMdp(report));
        }
        let index: HashMap<String, StateId> = file
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), StateId(i)))
            .collect();
        let mut states: Vec<StateNode> = file
            .states
            .iter()
            .map(|s| StateNode {
                name: s.id.clone(),
                terminal: s.terminal,
                reward: if s.reward == Some(1.0) { 1 } else { 0 },
                actions: Vec::new(),
            })
            .collect();
        for t in &file.transitions {
            let from = index[&t.from];
            states[from.0].actions.push(Edge {
                label: t.action.clone(),
                next: index[&t.to],
            });
        }
        let mu = file.mu.iter().map(|m| (index[&m.state], m.prob)).collect();
        let backward = postorder(states.len(), |i| {
            states[i].actions.iter().map(|e| e.next.0).collect::<Vec<_>>().into_iter()
        })
        .into_iter()
        .map(StateId)
        .collect();
        Ok(StepMdp {
            states,
            index,
            mu,
            horizon_bound: file.horizon_bound,
            backward,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        StepMdp::from_file(&MdpFile::load(path)?)
    }

    pub fn to_file(&self) -> MdpFile {
        MdpFile {
            states: self
                .states
                .iter()
                .map(|s| StateEntry {
                    id: s.name.clone(),
                    terminal: s.terminal,
                    reward: s.terminal.then_some(f64::from(s.reward)),
                })
                .collect(),
            transitions: self
                .states
                .iter()
                .flat_map(|s| {
                    s.actions.iter().map(move |e| TransitionEntry {
                        from: s.name.clone(),
                        action: e.label.clone(),
                        to: self.states[e.next.0].name.clone(),
                    })
                })
                .collect(),
            mu: self
                .mu
                .iter()
                .map(|&(s, p)| MuEntry {
                    state: self.states[s.0].name.clone(),
                    prob: p,
                })
                .collect(),
            horizon_bound: self.horizon_bound,
        }
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> + '_ {
        (0..self.states.len()).map(StateId)
    }

    pub fn nonterminal_states(&self) -> impl Iterator<Item = StateId> + '_ {
        self.states().filter(|s| !self.is_terminal(*s))
    }

    pub fn name(&self, s: StateId) -> &str {
        &self.states[s.0].name
    }

    pub fn state_by_name(&self, name: &str) -> Result<StateId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownState(name.to_string()))
    }

    pub fn action_by_label(&self, s: StateId, label: &str) -> Result<ActionId> {
        self.check_state(s)?;
        self.states[s.0]
            .actions
            .iter()
            .position(|e| e.label == label)
            .map(ActionId)
            .ok_or_else(|| Error::UnknownAction {
                state: self.name(s).to_string(),
                action: label.to_string(),
            })
    }

    pub fn action_label(&self, s: StateId, a: ActionId) -> &str {
        &self.states[s.0].actions[a.0].label
    }

    pub fn check_state(&self, s: StateId) -> Result<()> {
        if s.0 < self.states.len() {
            Ok(())
        } else {
            Err(Error::UnknownState(format!("#{}", s.0)))
        }
    }

    pub fn check_action(&self, s: StateId, a: ActionId) -> Result<()> {
        self.check_state(s)?;
        if a.0 < self.states[s.0].actions.len() {
            Ok(())
        } else {
            Err(Error::UnknownAction {
                state: self.name(s).to_string(),
                action: format!("#{}", a.0),
            })
        }
    }

    pub fn is_terminal(&self, s: StateId) -> bool {
        self.states[s.0].terminal
    }

    /// Terminal reward r(s_T) ∈ {0, 1}; zero for nonterminal states.
    pub fn terminal_reward(&self, s: StateId) -> u8 {
        self.states[s.0].reward
    }

    pub fn actions(&self, s: StateId) -> &[Edge] {
        &self.states[s.0].actions
    }

    pub fn num_actions(&self, s: StateId) -> usize {
        self.states[s.0].actions.len()
    }

    /// Deterministic transition f(s, a).
    pub fn next(&self, s: StateId, a: ActionId) -> StateId {
        self.states[s.0].actions[a.0].next
    }

    /// Step reward r(s, a). The terminal reward is paid on the edge entering the
    /// terminal state, so V(terminal) = 0 and Q(s,a) = r(s,a) + V(f(s,a)).
    pub fn step_reward(&self, s: StateId, a: ActionId) -> f64 {
        let next = self.next(s, a);
        if self.is_terminal(next) {
            f64::from(self.terminal_reward(next))
        } else {
            0.0
        }
    }

    /// Start distribution μ.
    pub fn mu(&self) -> &[(StateId, f64)] {
        &self.mu
    }

    pub fn horizon_bound(&self) -> usize {
        self.horizon_bound
    }

    /// States ordered so every successor precedes its predecessors.
    pub fn backward_order(&self) -> &[StateId] {
        &self.backward
    }

    /// States ordered so every predecessor precedes its successors.
    pub fn forward_order(&self) -> impl Iterator<Item = StateId> + '_ {
        self.backward.iter().rev().copied()
    }

    /// States reachable from μ (including terminals), in index order.
    pub fn reachable(&self) -> Vec<StateId> {
        let mut seen = vec![false; self.num_states()];
        for &(s, _) in &self.mu {
            seen[s.0] = true;
        }
        for s in self.forward_order() {
            if seen[s.0] {
                for e in self.actions(s) {
                    seen[e.next.0] = true;
                }
            }
        }
        self.states().filter(|s| seen[s.0]).collect()
    }
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrajectorySample {
    pub start: StateId,
    pub steps: Vec<(StateId, ActionId)>,
    pub terminal: StateId,
    pub reward: u8,
    pub rollout_seed: u64,
}

/// Roll out `policy` from `start`. Step `t` consumes counter `t` of the key
/// `seed`, so the result is a pure function of the arguments.
pub fn sample_trajectory(
    mdp: &StepMdp,
    policy: &TabularPolicy,
    start: StateId,
    seed: u64,
) -> Result<TrajectorySample> {
    mdp.check_state(start)?;
    let mut steps = Vec::new();
    let mut s = start;
    while !mdp.is_terminal(s) {
        if steps.len() >= mdp.horizon_bound() {
            return Err(Error::HorizonExceeded(mdp.horizon_bound()));
        }
        let u = counter_uniform(seed, steps.len() as u64);
        let a = ActionId(pick_index(policy.probs(s), u));
        steps.push((s, a));
        s = mdp.next(s, a);
    }
    Ok(TrajectorySample {
        start,
        steps,
        terminal: s,
        reward: mdp.terminal_reward(s),
        rollout_seed: seed,
    })
}

/// Terminal reward of one rollout, without recording the path.
pub(crate) fn rollout_reward(
    mdp: &StepMdp,
    policy: &TabularPolicy,
    start: StateId,
    seed: u64,
) -> Result<u8> {
    let mut s = start;
    let mut t = 0u64;
    while !mdp.is_terminal(s) {
        if t as usize >= mdp.horizon_bound() {
            return Err(Error::HorizonExceeded(mdp.horizon_bound()));
        }
        let a = pick_index(policy.probs(s), counter_uniform(seed, t));
        s = mdp.next(s, ActionId(a));
        t += 1;
    }
    Ok(mdp.terminal_reward(s))
}
