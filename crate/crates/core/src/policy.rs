//! Tabular softmax policies.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{ActionId, StateId, StepMdp};

/// Per-state softmax over logits. Probabilities and log-probabilities are
/// computed once at construction; the policy is immutable afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    tag: String,
    logits: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    log_probs: Vec<Vec<f64>>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lz = max + z.ln();
    logits.iter().map(|l| l - lz).collect()
}

impl TabularPolicy {
    pub fn uniform(mdp: &StepMdp) -> Self {
        let logits = mdp.states().map(|s| vec![0.0; mdp.num_actions(s)]).collect();
        Self::build("uniform".into(), logits)
    }

    /// Build from per-state logits (terminal states carry empty rows).
    pub fn from_logits(mdp: &StepMdp, logits: Vec<Vec<f64>>) -> Result<Self> {
        if logits.len() != mdp.num_states() {
            return Err(Error::Shape(format!(
                "{} logit rows for {} states",
                logits.len(),
                mdp.num_states()
            )));
        }
        for s in mdp.states() {
            let row = &logits[s.0];
            if row.len() != mdp.num_actions(s) {
                return Err(Error::Shape(format!(
                    "state `{}` has {} actions but {} logits",
                    mdp.name(s),
                    mdp.num_actions(s),
                    row.len()
                )));
            }
            if let Some(l) = row.iter().find(|l| !l.is_finite()) {
                return Err(Error::domain(format!("non-finite logit {l} at `{}`", mdp.name(s))));
            }
        }
        let p = Self::build("policy".into(), logits);
        for (s, row) in p.probs.iter().enumerate() {
            if row.iter().any(|&x| x <= 0.0) {
                return Err(Error::domain(format!(
                    "logit spread at `{}` underflows a probability to zero",
                    mdp.name(StateId(s))
                )));
            }
        }
        Ok(p)
    }

    fn build(tag: String, logits: Vec<Vec<f64>>) -> Self {
        let log_probs: Vec<Vec<f64>> = logits
            .iter()
            .map(|row| if row.is_empty() { Vec::new() } else { log_softmax(row) })
            .collect();
        let probs = log_probs
            .iter()
            .map(|row| row.iter().map(|l| l.exp()).collect())
            .collect();
        TabularPolicy { tag, logits, probs, log_probs }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn num_states(&self) -> usize {
        self.logits.len()
    }

    /// π(·|s) in action-list order; empty at terminal states.
    pub fn probs(&self, s: StateId) -> &[f64] {
        &self.probs[s.0]
    }

    pub fn log_probs(&self, s: StateId) -> &[f64] {
        &self.log_probs[s.0]
    }

    /// π(a|s) with domain checks.
    pub fn prob(&self, s: StateId, a: ActionId) -> Result<f64> {
        self.check(s, a)?;
        Ok(self.probs[s.0][a.0])
    }

    /// log π(a|s) − log π_ref(a|s).
    pub fn log_ratio(&self, reference: &TabularPolicy, s: StateId, a: ActionId) -> Result<f64> {
        self.check(s, a)?;
        reference.check(s, a)?;
        Ok(self.log_probs[s.0][a.0] - reference.log_probs[s.0][a.0])
    }

    /// KL(self(·|s) || other(·|s)); zero at terminal states.
    pub fn kl(&self, other: &TabularPolicy, s: StateId) -> f64 {
        self.probs[s.0]
            .iter()
            .zip(self.log_probs[s.0].iter().zip(&other.log_probs[s.0]))
            .map(|(p, (lp, lq))| p * (lp - lq))
            .sum()
    }

    /// Same shape as `mdp`?
    pub fn fits(&self, mdp: &StepMdp) -> bool {
        self.logits.len() == mdp.num_states()
            && mdp.states().all(|s| self.logits[s.0].len() == mdp.num_actions(s))
    }

    pub(crate) fn ensure_fits(&self, mdp: &StepMdp) -> Result<()> {
        if self.fits(mdp) {
            Ok(())
        } else {
            Err(Error::Shape(format!("policy `{}` does not match the MDP", self.tag)))
        }
    }

    fn check(&self, s: StateId, a: ActionId) -> Result<()> {
        let row = self
            .probs
            .get(s.0)
            .ok_or_else(|| Error::UnknownState(format!("#{}", s.0)))?;
        if row.is_empty() {
            return Err(Error::domain(format!("state #{} is terminal", s.0)));
        }
        if a.0 >= row.len() {
            return Err(Error::UnknownAction {
                state: format!("#{}", s.0),
                action: format!("#{}", a.0),
            });
        }
        Ok(())
    }

    /// Total variation distance at one state.
    pub fn total_variation(&self, other: &TabularPolicy, s: StateId) -> f64 {
        0.5 * self.probs[s.0]
            .iter()
            .zip(&other.probs[s.0])
            .map(|(p, q)| (p - q).abs())
            .sum::<f64>()
    }

    pub fn write_csv<W: Write>(&self, mdp: &StepMdp, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for s in mdp.nonterminal_states() {
            for (a, &logit) in self.logits[s.0].iter().enumerate() {
                out.serialize(PolicyRow {
                    state: mdp.name(s).to_string(),
                    action: mdp.action_label(s, ActionId(a)).to_string(),
                    logit,
                })?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Read `state,action,logit` rows. Pairs not listed default to logit 0.
    pub fn read_csv<R: Read>(mdp: &StepMdp, r: R) -> Result<Self> {
        let mut logits: Vec<Vec<f64>> = mdp.states().map(|s| vec![0.0; mdp.num_actions(s)]).collect();
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: PolicyRow = row?;
            let s = mdp.state_by_name(&row.state)?;
            let a = mdp.action_by_label(s, &row.action)?;
            logits[s.0][a.0] = row.logit;
        }
        TabularPolicy::from_logits(mdp, logits)
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyRow {
    state: String,
    action: String,
    logit: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::t2;
    use proptest::prelude::*;

    fn s1_policy(l0: f64, l1: f64) -> (StepMdp, TabularPolicy, StateId) {
        let mdp = t2();
        let s1 = mdp.state_by_name("s1").unwrap();
        let mut logits: Vec<Vec<f64>> = mdp.states().map(|s| vec![0.0; mdp.num_actions(s)]).collect();
        logits[s1.0] = vec![l0, l1];
        let p = TabularPolicy::from_logits(&mdp, logits).unwrap();
        (mdp, p, s1)
    }

    #[test]
    fn uniform_two_actions() {
        let mdp = t2();
        let p = TabularPolicy::uniform(&mdp);
        let s1 = mdp.state_by_name("s1").unwrap();
        assert_eq!(p.prob(s1, ActionId(0)).unwrap(), 0.5);
    }

    #[test]
    fn logits_one_zero() {
        let (_, p, s1) = s1_policy(1.0, 0.0);
        let e = std::f64::consts::E;
        let got = p.prob(s1, ActionId(0)).unwrap();
        assert!((got - e / (e + 1.0)).abs() < 1e-15);
        assert!((got - 0.731059).abs() < 1e-6);
        assert!((got + p.prob(s1, ActionId(1)).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_ratio_examples() {
        let (mdp, p, s1) = s1_policy(1.0, 0.0);
        let u = TabularPolicy::uniform(&mdp);
        let lr = p.log_ratio(&u, s1, ActionId(0)).unwrap();
        assert!((lr - 0.379885).abs() < 1e-6, "{lr}");
        assert_eq!(u.log_ratio(&p, s1, ActionId(0)).unwrap(), -lr);
        assert_eq!(p.log_ratio(&p, s1, ActionId(1)).unwrap(), 0.0);
    }

    #[test]
    fn domain_errors() {
        let mdp = t2();
        let p = TabularPolicy::uniform(&mdp);
        let win = mdp.state_by_name("win").unwrap();
        let s1 = mdp.state_by_name("s1").unwrap();
        assert!(p.prob(win, ActionId(0)).is_err());
        assert!(p.prob(s1, ActionId(5)).is_err());
        assert!(p.prob(StateId(99), ActionId(0)).is_err());
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        let mdp = t2();
        assert!(TabularPolicy::from_logits(&mdp, vec![]).is_err());
        let mut l: Vec<Vec<f64>> = mdp.states().map(|s| vec![0.0; mdp.num_actions(s)]).collect();
        l[0][0] = f64::NAN;
        assert!(TabularPolicy::from_logits(&mdp, l.clone()).is_err());
        l[0][0] = 2000.0;
        assert!(TabularPolicy::from_logits(&mdp, l).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let (mdp, p, _) = s1_policy(0.3, -1.25);
        let mut buf = Vec::new();
        p.write_csv(&mdp, &mut buf).unwrap();
        let back = TabularPolicy::read_csv(&mdp, buf.as_slice()).unwrap();
        assert_eq!(back.logits(), p.logits());
    }

    proptest! {
        #[test]
        fn normalized_positive_and_shift_invariant(l0 in -30.0f64..30.0, l1 in -30.0f64..30.0, c in -100.0f64..100.0) {
            let (_, p, s1) = s1_policy(l0, l1);
            let (_, q, _) = s1_policy(l0 + c, l1 + c);
            let row = p.probs(s1);
            prop_assert!(row.iter().all(|&x| x > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in row.iter().zip(q.probs(s1)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn equal_logits_are_uniform(c in -500.0f64..500.0) {
            let (_, p, s1) = s1_policy(c, c);
            prop_assert!((p.prob(s1, ActionId(0)).unwrap() - 0.5).abs() < 1e-15);
        }
    }
}
