//! Monte-Carlo value targets and a tabular sigmoid critic trained with binary cross-entropy.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{rollout_reward, sample_trajectory, StateId, StepMdp};
use crate::policy::TabularPolicy;
use crate::rng::derive_key;
use crate::values::ValueTable;

/// Nonterminal states visited by generator rollouts, with visit counts.
pub type StateVisits = BTreeMap<StateId, usize>;

/// Roll out `generator` `rollouts_per_start` times from each start state and
/// count visits to nonterminal states. Rollout `r` from start `i` uses key
/// `derive_key(seed, i * rollouts_per_start + r)`.
pub fn generate_states(
    mdp: &StepMdp,
    generator: &TabularPolicy,
    starts: &[StateId],
    rollouts_per_start: usize,
    seed: u64,
) -> Result<StateVisits> {
    if rollouts_per_start == 0 {
        return Err(Error::domain("rollouts_per_start must be at least 1"));
    }
    generator.ensure_fits(mdp)?;
    let mut visits = StateVisits::new();
    for (i, &start) in starts.iter().enumerate() {
        for r in 0..rollouts_per_start {
            let key = derive_key(seed, (i * rollouts_per_start + r) as u64);
            let tr = sample_trajectory(mdp, generator, start, key)?;
            for (s, _) in tr.steps {
                *visits.entry(s).or_insert(0) += 1;
            }
        }
    }
    Ok(visits)
}

/// MC_N(s): `successes` of `n` completions reached a reward-1 terminal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McTarget {
    pub state: StateId,
    pub n: u64,
    pub successes: u64,
}

impl McTarget {
    pub fn new(state: StateId, n: u64, successes: u64) -> Result<Self> {
        if n == 0 || successes > n {
            return Err(Error::domain(format!("invalid MC target: {successes}/{n}")));
        }
        Ok(McTarget { state, n, successes })
    }

    pub fn mc_value(&self) -> f64 {
        self.successes as f64 / self.n as f64
    }
}

/// Run `n` completions of `completer` from `s`; completion `i` uses key `derive_key(seed, i)`.
pub fn mc_estimate(mdp: &StepMdp, completer: &TabularPolicy, s: StateId, n: u64, seed: u64) -> Result<McTarget> {
    if n == 0 {
        return Err(Error::domain("n must be at least 1"));
    }
    mdp.check_state(s)?;
    completer.ensure_fits(mdp)?;
    let mut successes = 0u64;
    for i in 0..n {
        successes += u64::from(rollout_reward(mdp, completer, s, derive_key(seed, i))?);
    }
    McTarget::new(s, n, successes)
}

pub fn write_targets_csv<W: Write>(mdp: &StepMdp, targets: &[McTarget], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["state", "n", "successes"])?;
    for t in targets {
        out.write_record([mdp.name(t.state), &t.n.to_string(), &t.successes.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_targets_csv<R: Read>(mdp: &StepMdp, r: R) -> Result<Vec<McTarget>> {
    #[derive(Deserialize)]
    struct Row {
        state: String,
        n: u64,
        successes: u64,
    }
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| {
            let row: Row = row?;
            McTarget::new(mdp.state_by_name(&row.state)?, row.n, row.successes)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    /// Scales the per-state Newton step on the raw score.
    pub learning_rate: f64,
    pub epochs: usize,
    /// Predictions are confined to `[clamp_epsilon, 1 - clamp_epsilon]`.
    pub clamp_epsilon: f64,
    /// Stop once the projected per-state gradient is below this.
    pub tolerance: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            learning_rate: 1.0,
            epochs: 10_000,
            clamp_epsilon: 1e-6,
            tolerance: 1e-8,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn bce(y: f64, p: f64) -> f64 {
    let mut l = 0.0;
    if y > 0.0 {
        l -= y * p.ln();
    }
    if y < 1.0 {
        l -= (1.0 - y) * (1.0 - p).ln();
    }
    l
}

/// Tabular critic: prediction(s) = sigmoid(raw(s)).
#[derive(Clone, Debug, PartialEq)]
pub struct CriticTable {
    raw: BTreeMap<StateId, f64>,
    pub config: CriticConfig,
    pub epochs_run: usize,
    pub converged: bool,
}

impl CriticTable {
    /// Raw scores all zero, i.e. every prediction is 0.5.
    pub fn untrained(states: impl IntoIterator<Item = StateId>, config: CriticConfig) -> Self {
        CriticTable {
            raw: states.into_iter().map(|s| (s, 0.0)).collect(),
            config,
            epochs_run: 0,
            converged: false,
        }
    }

    pub fn from_raw(raw: BTreeMap<StateId, f64>, config: CriticConfig) -> Self {
        CriticTable { raw, config, epochs_run: 0, converged: false }
    }

    pub fn raw(&self) -> &BTreeMap<StateId, f64> {
        &self.raw
    }

    pub fn prediction(&self, s: StateId) -> Option<f64> {
        self.raw.get(&s).map(|&z| sigmoid(z))
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> + '_ {
        self.raw.keys().copied()
    }

    pub fn write_csv<W: Write>(&self, mdp: &StepMdp, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["state", "raw_score"])?;
        for (s, z) in &self.raw {
            out.write_record([mdp.name(*s), &format!("{z:?}")])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(mdp: &StepMdp, r: R, config: CriticConfig) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            state: String,
            raw_score: f64,
        }
        let mut raw = BTreeMap::new();
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: Row = row?;
            raw.insert(mdp.state_by_name(&row.state)?, row.raw_score);
        }
        Ok(CriticTable::from_raw(raw, config))
    }
}

/// Mean BCE over target records, predictions clamped to `[ε, 1 − ε]`.
pub fn bce_loss(targets: &[McTarget], critic: &CriticTable) -> Result<f64> {
    if targets.is_empty() {
        return Ok(0.0);
    }
    let eps = critic.config.clamp_epsilon;
    let mut total = 0.0;
    for t in targets {
        let p = critic
            .prediction(t.state)
            .ok_or_else(|| Error::domain(format!("critic has no score for state #{}", t.state.0)))?;
        total += bce(t.mc_value(), p.clamp(eps, 1.0 - eps));
    }
    Ok(total / targets.len() as f64)
}

/// Per-state mean of MC values: the closed-form minimizer of the mean BCE of a
/// tabular critic (each record counts once, so duplicates weigh by visit count).
pub fn target_means(targets: &[McTarget]) -> BTreeMap<StateId, f64> {
    let mut acc: BTreeMap<StateId, (f64, usize)> = BTreeMap::new();
    for t in targets {
        let e = acc.entry(t.state).or_insert((0.0, 0));
        e.0 += t.mc_value();
        e.1 += 1;
    }
    acc.into_iter().map(|(s, (sum, c))| (s, sum / c as f64)).collect()
}

/// Minimize the mean BCE over `targets` in raw-score space.
///
/// The loss separates over states, so each raw score takes a damped Newton
/// step (gradient divided by the sigmoid curvature, backtracked until the
/// state's loss decreases) and is projected onto `[logit ε, logit(1 − ε)]`.
pub fn train_critic(targets: &[McTarget], config: &CriticConfig) -> Result<CriticTable> {
    if !(config.clamp_epsilon > 0.0 && config.clamp_epsilon < 0.5) {
        return Err(Error::Config("clamp_epsilon must lie in (0, 0.5)".into()));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::Config("learning_rate must be positive".into()));
    }
    let means = target_means(targets);
    let (z_lo, z_hi) = (logit(config.clamp_epsilon), logit(1.0 - config.clamp_epsilon));
    let mut raw: BTreeMap<StateId, f64> = means.keys().map(|&s| (s, 0.0)).collect();
    let state_loss = |y: f64, z: f64| bce(y, sigmoid(z));

    let mut epochs_run = 0;
    let mut converged = false;
    while epochs_run < config.epochs {
        let mut worst: f64 = 0.0;
        for (s, z) in raw.iter_mut() {
            let y = means[s];
            let p = sigmoid(*z);
            let g = p - y;
            let projected = if (*z <= z_lo && g > 0.0) || (*z >= z_hi && g < 0.0) { 0.0 } else { g };
            worst = worst.max(projected.abs());
            if projected == 0.0 {
                continue;
            }
            let curvature = (p * (1.0 - p)).max(1e-12);
            let mut step = (config.learning_rate * g / curvature).clamp(-4.0, 4.0);
            let before = state_loss(y, *z);
            loop {
                let cand = (*z - step).clamp(z_lo, z_hi);
                if state_loss(y, cand) <= before || step.abs() < 1e-12 {
                    *z = cand;
                    break;
                }
                step *= 0.5;
            }
        }
        if worst < config.tolerance {
            converged = true;
            break;
        }
        epochs_run += 1;
    }
    Ok(CriticTable {
        raw,
        config: config.clone(),
        epochs_run,
        converged,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    pub per_state: Vec<(StateId, f64)>,
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
    pub uncovered: Vec<StateId>,
}

/// |prediction − V^{completer}| over the MDP's nonterminal states; `exact` must
/// be `evaluate(completer, ·, 0)`.
pub fn critic_accuracy(mdp: &StepMdp, critic: &CriticTable, exact: &ValueTable) -> AccuracyReport {
    let mut per_state = Vec::new();
    let mut uncovered = Vec::new();
    for s in mdp.nonterminal_states() {
        match critic.prediction(s) {
            Some(p) => per_state.push((s, (p - exact.v(s)).abs())),
            None => uncovered.push(s),
        }
    }
    let max_abs_error = per_state.iter().map(|x| x.1).fold(0.0, f64::max);
    let mean_abs_error = if per_state.is_empty() {
        0.0
    } else {
        per_state.iter().map(|x| x.1).sum::<f64>() / per_state.len() as f64
    };
    AccuracyReport { per_state, max_abs_error, mean_abs_error, uncovered }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{chain, t2};
    use crate::values::evaluate;

    fn id(mdp: &StepMdp, n: &str) -> StateId {
        mdp.state_by_name(n).unwrap()
    }

    #[test]
    fn single_path_generation() {
        let mdp = chain(3, true);
        let u = TabularPolicy::uniform(&mdp);
        let visits = generate_states(&mdp, &u, &[id(&mdp, "c0")], 1, 5).unwrap();
        let names: Vec<&str> = visits.keys().map(|s| mdp.name(*s)).collect();
        assert_eq!(names, ["c0", "c1", "c2"]);
        assert!(generate_states(&mdp, &u, &[id(&mdp, "c0")], 0, 5).is_err());
    }

    #[test]
    fn t2_generation_counts() {
        let mdp = t2();
        let u = TabularPolicy::uniform(&mdp);
        let visits = generate_states(&mdp, &u, &[id(&mdp, "root")], 10_000, 1).unwrap();
        assert_eq!(visits[&id(&mdp, "root")], 10_000);
        // binomial sd = 50, so ±150 is three sigma
        let s1 = visits[&id(&mdp, "s1")] as i64;
        assert!((s1 - 5000).abs() <= 150, "{s1}");
        assert_eq!(visits, generate_states(&mdp, &u, &[id(&mdp, "root")], 10_000, 1).unwrap());
    }

    #[test]
    fn mc_estimate_examples() {
        let mdp = t2();
        let u = TabularPolicy::uniform(&mdp);
        let win = id(&mdp, "win");
        assert_eq!(mc_estimate(&mdp, &u, win, 17, 0).unwrap().mc_value(), 1.0);
        let s1 = id(&mdp, "s1");
        let t = mc_estimate(&mdp, &u, s1, 4096, 3).unwrap();
        // Hoeffding: P(|x̄ − 0.5| ≥ 0.05) ≤ 2 exp(−2·4096·0.0025) ≈ 2.5e-9
        assert!((0.45..=0.55).contains(&t.mc_value()));
        for seed in 0..20 {
            let one = mc_estimate(&mdp, &u, s1, 1, seed).unwrap().mc_value();
            assert!(one == 0.0 || one == 1.0);
        }
        assert!(mc_estimate(&mdp, &u, s1, 0, 0).is_err());
    }

    #[test]
    fn mc_is_unbiased() {
        let mdp = t2();
        let u = TabularPolicy::uniform(&mdp);
        let root = id(&mdp, "root");
        let exact = evaluate(&mdp, &u, &u, 0.0).unwrap().v(root);
        let (n, reps) = (256u64, 200u64);
        let grand: f64 = (0..reps)
            .map(|r| mc_estimate(&mdp, &u, root, n, 1000 + r).unwrap().mc_value())
            .sum::<f64>()
            / reps as f64;
        // Hoeffding with nR = 51200 draws at 1e-6 failure: sqrt(ln(2e6)/(2·51200)) ≈ 0.012
        assert!((grand - exact).abs() < 0.012, "{grand}");
    }

    #[test]
    fn bce_at_matched_prediction() {
        let s = StateId(0);
        let targets = [McTarget::new(s, 2, 1).unwrap()];
        let c = train_critic(&targets, &CriticConfig::default()).unwrap();
        assert!((c.prediction(s).unwrap() - 0.5).abs() < 1e-12);
        let loss = bce_loss(&targets, &c).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn saturated_target_clamps() {
        let s = StateId(0);
        let cfg = CriticConfig::default();
        let c = train_critic(&[McTarget::new(s, 8, 8).unwrap()], &cfg).unwrap();
        assert!(c.converged);
        let p = c.prediction(s).unwrap();
        assert!((p - (1.0 - cfg.clamp_epsilon)).abs() < 1e-12, "{p}");
        let c0 = train_critic(&[McTarget::new(s, 8, 0).unwrap()], &cfg).unwrap();
        assert!((c0.prediction(s).unwrap() - cfg.clamp_epsilon).abs() < 1e-12);
    }

    #[test]
    fn saturated_target_increases_monotonically() {
        let s = StateId(0);
        let targets = [McTarget::new(s, 4, 4).unwrap()];
        let mut last = 0.5;
        for epochs in 1..12 {
            let cfg = CriticConfig { epochs, ..CriticConfig::default() };
            let p = train_critic(&targets, &cfg).unwrap().prediction(s).unwrap();
            assert!(p >= last);
            last = p;
        }
    }

    #[test]
    fn duplicates_merge_to_mean() {
        let s = StateId(3);
        let targets = [McTarget::new(s, 4, 1).unwrap(), McTarget::new(s, 4, 3).unwrap()];
        let c = train_critic(&targets, &CriticConfig::default()).unwrap();
        assert!((c.prediction(s).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn training_matches_closed_form() {
        let mut targets = Vec::new();
        for (i, (n, k)) in [(10, 3), (10, 7), (7, 1), (3, 3), (5, 0), (9, 4)].iter().enumerate() {
            targets.push(McTarget::new(StateId(i % 4), *n, *k).unwrap());
        }
        let cfg = CriticConfig::default();
        let c = train_critic(&targets, &cfg).unwrap();
        assert!(c.converged);
        for (s, mean) in target_means(&targets) {
            let expect = mean.clamp(cfg.clamp_epsilon, 1.0 - cfg.clamp_epsilon);
            assert!((c.prediction(s).unwrap() - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn accuracy_reports() {
        let mdp = t2();
        let u = TabularPolicy::uniform(&mdp);
        let exact = evaluate(&mdp, &u, &u, 0.0).unwrap();
        let untrained = CriticTable::untrained(mdp.nonterminal_states(), CriticConfig::default());
        let rep = critic_accuracy(&mdp, &untrained, &exact);
        let s2 = id(&mdp, "s2");
        assert_eq!(rep.per_state.iter().find(|x| x.0 == s2).unwrap().1, 0.5);

        let targets: Vec<McTarget> = mdp
            .nonterminal_states()
            .map(|s| McTarget::new(s, 4, (exact.v(s) * 4.0) as u64).unwrap())
            .collect();
        let fit = train_critic(&targets, &CriticConfig::default()).unwrap();
        assert!(critic_accuracy(&mdp, &fit, &exact).max_abs_error < 2e-6);

        let partial = CriticTable::untrained([s2], CriticConfig::default());
        let rep = critic_accuracy(&mdp, &partial, &exact);
        assert_eq!(rep.uncovered.len(), 2);
        assert_eq!(rep.max_abs_error, 0.5);
    }

    #[test]
    fn csv_roundtrips() {
        let mdp = t2();
        let u = TabularPolicy::uniform(&mdp);
        let targets: Vec<McTarget> = mdp
            .nonterminal_states()
            .map(|s| mc_estimate(&mdp, &u, s, 64, s.0 as u64).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_targets_csv(&mdp, &targets, &mut buf).unwrap();
        assert_eq!(read_targets_csv(&mdp, buf.as_slice()).unwrap(), targets);

        let c = train_critic(&targets, &CriticConfig::default()).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mdp, &mut buf).unwrap();
        let back = CriticTable::read_csv(&mdp, buf.as_slice(), CriticConfig::default()).unwrap();
        assert_eq!(back.raw(), c.raw());
    }
}
