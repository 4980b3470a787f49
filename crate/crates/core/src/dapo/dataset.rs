use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::critic::CriticTable;
use crate::error::{Error, Result};
use crate::mdp::{ActionId, StateId, StepMdp};
use crate::policy::TabularPolicy;
use crate::rng::{counter_uniform, derive_key, pick_index};
use crate::values::ValueTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageSource {
    Critic,
    Exact,
}

impl fmt::Display for AdvantageSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdvantageSource::Critic => "critic",
            AdvantageSource::Exact => "exact",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub state: StateId,
    pub action: ActionId,
    pub a_hat: f64,
    pub source: AdvantageSource,
    /// ν_S(s) · ν_A(a|s); weights of a dataset sum to 1.
    pub weight: f64,
}

/// Where successor values come from.
#[derive(Clone, Copy, Debug)]
pub enum SuccessorValues<'a> {
    /// `evaluate(ref, ref, 0)`: Â is the exact advantage A^{π_ref}(s,a).
    Exact(&'a ValueTable),
    /// Critic predictions; terminal successors use their known reward.
    Critic(&'a CriticTable),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    /// Draw `m` actions per state from π_ref.
    Sampled,
    /// Every action once; ν_A is uniform over the full action set.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateWeighting {
    /// ν_S proportional to the supplied state weights (e.g. visit counts).
    Visits,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub actions: ActionMode,
    /// Actions drawn per state in `Sampled` mode.
    pub m: usize,
    /// States whose advantage gap Δ_s falls below this are dropped.
    pub gap_threshold: f64,
    /// Keep one record per unique action (ν_A uniform over the unique set).
    pub dedup: bool,
    pub state_weighting: StateWeighting,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            actions: ActionMode::Sampled,
            m: 8,
            gap_threshold: 0.1,
            dedup: true,
            state_weighting: StateWeighting::Visits,
        }
    }
}

/// Records grouped contiguously by state, in increasing state order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageDataset {
    pub beta: f64,
    pub records: Vec<AdvantageRecord>,
    /// Δ_s for every input state, retained or not.
    pub gaps: BTreeMap<StateId, f64>,
    pub dropped: Vec<StateId>,
    /// Sampled (action, Â) multisets before deduplication, per input state.
    pub sampled: BTreeMap<StateId, Vec<(ActionId, f64)>>,
}

impl AdvantageDataset {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn states(&self) -> Vec<StateId> {
        let mut out: Vec<StateId> = self.records.iter().map(|r| r.state).collect();
        out.dedup();
        out
    }

    /// Contiguous record slices, one per state.
    pub fn groups(&self) -> impl Iterator<Item = &[AdvantageRecord]> {
        self.records.chunk_by(|a, b| a.state == b.state)
    }

    /// ν_A(·|s) over the full action list of `s` (zero for actions without records).
    pub fn action_distribution(&self, mdp: &StepMdp, s: StateId) -> Vec<f64> {
        let mut nu = vec![0.0; mdp.num_actions(s)];
        for r in self.records.iter().filter(|r| r.state == s) {
            nu[r.action.0] += r.weight;
        }
        let total: f64 = nu.iter().sum();
        if total > 0.0 {
            nu.iter_mut().for_each(|x| *x /= total);
        }
        nu
    }

    pub fn write_csv<W: Write>(&self, mdp: &StepMdp, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["state", "action", "a_hat", "source", "weight"])?;
        for r in &self.records {
            out.write_record([
                mdp.name(r.state),
                mdp.action_label(r.state, r.action),
                &format!("{:?}", r.a_hat),
                &r.source.to_string(),
                &format!("{:?}", r.weight),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Read `state,action,a_hat,source[,weight]`. Without a weight column every
    /// state weighs equally and ν_A is uniform over the state's rows.
    pub fn read_csv<R: Read>(mdp: &StepMdp, r: R, beta: f64) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            state: String,
            action: String,
            a_hat: f64,
            source: AdvantageSource,
            #[serde(default)]
            weight: Option<f64>,
        }
        let mut rows = Vec::new();
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: Row = row?;
            let s = mdp.state_by_name(&row.state)?;
            let a = mdp.action_by_label(s, &row.action)?;
            rows.push((s, a, row.a_hat, row.source, row.weight));
        }
        rows.sort_by_key(|r| r.0);
        let mut records: Vec<AdvantageRecord> = rows
            .iter()
            .map(|&(state, action, a_hat, source, weight)| AdvantageRecord {
                state,
                action,
                a_hat,
                source,
                weight: weight.unwrap_or(f64::NAN),
            })
            .collect();
        if records.iter().any(|r| r.weight.is_nan()) {
            let counts = records.iter().fold(BTreeMap::new(), |mut m, r| {
                *m.entry(r.state).or_insert(0usize) += 1;
                m
            });
            let n_states = counts.len() as f64;
            for r in &mut records {
                r.weight = 1.0 / (n_states * counts[&r.state] as f64);
            }
        }
        normalize(&mut records)?;
        let mut ds = AdvantageDataset {
            beta,
            records,
            gaps: BTreeMap::new(),
            dropped: Vec::new(),
            sampled: BTreeMap::new(),
        };
        ds.gaps = ds.groups().map(|g| (g[0].state, gap(g.iter().map(|r| r.a_hat)))).collect();
        Ok(ds)
    }
}

fn normalize(records: &mut [AdvantageRecord]) -> Result<()> {
    let total: f64 = records.iter().map(|r| r.weight).sum();
    if records.iter().any(|r| !(r.weight >= 0.0) || !r.weight.is_finite()) {
        return Err(Error::domain("record weights must be finite and nonnegative"));
    }
    if !records.is_empty() {
        if total <= 0.0 {
            return Err(Error::domain("record weights sum to zero"));
        }
        records.iter_mut().for_each(|r| r.weight /= total);
    }
    Ok(())
}

fn gap(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if lo.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

fn successor_value(mdp: &StepMdp, critic: &CriticTable, s: StateId, a: ActionId) -> Result<f64> {
    let next = mdp.next(s, a);
    if mdp.is_terminal(next) {
        return Ok(f64::from(mdp.terminal_reward(next)));
    }
    critic
        .prediction(next)
        .ok_or_else(|| Error::domain(format!("critic has no value for successor `{}`", mdp.name(next))))
}

/// Build the advantage dataset for the given training states.
///
/// `states` carries a weight per state (visit counts, or anything positive);
/// repeated states are merged. Sampled actions come from `reference` with key
/// `derive_key(seed, state index)`. Critic advantages are successor values
/// centered by their mean over the sampled multiset (or the π_ref-weighted
/// mean in `Full` mode); exact advantages are A^{π_ref}(s,a) as-is.
pub fn build_advantage_dataset(
    mdp: &StepMdp,
    states: &[(StateId, f64)],
    reference: &TabularPolicy,
    values: SuccessorValues<'_>,
    beta: f64,
    config: &DatasetConfig,
    seed: u64,
) -> Result<AdvantageDataset> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::domain(format!("beta must be positive, got {beta}")));
    }
    if config.actions == ActionMode::Sampled && config.m < 2 {
        return Err(Error::domain("at least two actions per state are required"));
    }
    reference.ensure_fits(mdp)?;
    let mut weights: BTreeMap<StateId, f64> = BTreeMap::new();
    for &(s, w) in states {
        mdp.check_state(s)?;
        if mdp.is_terminal(s) {
            return Err(Error::domain(format!("terminal state `{}` cannot be a training state", mdp.name(s))));
        }
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::domain(format!("state weight {w} at `{}`", mdp.name(s))));
        }
        *weights.entry(s).or_insert(0.0) += w;
    }

    let mut out = AdvantageDataset {
        beta,
        records: Vec::new(),
        gaps: BTreeMap::new(),
        dropped: Vec::new(),
        sampled: BTreeMap::new(),
    };
    for (&s, &w) in &weights {
        let actions: Vec<ActionId> = match config.actions {
            ActionMode::Full => (0..mdp.num_actions(s)).map(ActionId).collect(),
            ActionMode::Sampled => {
                let key = derive_key(seed, s.0 as u64);
                (0..config.m)
                    .map(|i| ActionId(pick_index(reference.probs(s), counter_uniform(key, i as u64))))
                    .collect()
            }
        };
        let (a_hat, source): (Vec<f64>, AdvantageSource) = match values {
            SuccessorValues::Exact(table) => (actions.iter().map(|&a| table.adv(s, a)).collect(), AdvantageSource::Exact),
            SuccessorValues::Critic(critic) => {
                let v: Vec<f64> = actions
                    .iter()
                    .map(|&a| successor_value(mdp, critic, s, a))
                    .collect::<Result<_>>()?;
                let baseline = match config.actions {
                    ActionMode::Sampled => v.iter().sum::<f64>() / v.len() as f64,
                    ActionMode::Full => reference.probs(s).iter().zip(&v).map(|(p, x)| p * x).sum(),
                };
                (v.iter().map(|x| x - baseline).collect(), AdvantageSource::Critic)
            }
        };
        let sampled: Vec<(ActionId, f64)> = actions.iter().copied().zip(a_hat.iter().copied()).collect();

        let mut kept = sampled.clone();
        if config.dedup {
            kept.sort_by_key(|x| x.0);
            kept.dedup_by_key(|x| x.0);
        }
        let delta = gap(kept.iter().map(|x| x.1));
        out.gaps.insert(s, delta);
        out.sampled.insert(s, sampled);
        if delta < config.gap_threshold {
            out.dropped.push(s);
            continue;
        }
        let state_weight = match config.state_weighting {
            StateWeighting::Visits => w,
            StateWeighting::Uniform => 1.0,
        };
        let per_record = state_weight / kept.len() as f64;
        out.records.extend(kept.into_iter().map(|(action, a_hat)| AdvantageRecord {
            state: s,
            action,
            a_hat,
            source,
            weight: per_record,
        }));
    }
    normalize(&mut out.records)?;
    Ok(out)
}
