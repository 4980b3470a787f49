//! Exact KL-regularized values by backward induction over the state DAG.
//!
//! Terminal states have value 0; the binary terminal reward is paid by the step
//! entering them (see [`StepMdp::step_reward`]). No sampling happens here: every
//! expectation over trajectories is an exact sum over the DAG.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mdp::{ActionId, StateId, StepMdp};
use crate::policy::TabularPolicy;

/// V, Q and A of one policy at one KL coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    pub beta: f64,
    pub policy_tag: String,
    v: Vec<f64>,
    q: Vec<Vec<f64>>,
    adv: Vec<Vec<f64>>,
}

impl ValueTable {
    pub fn v(&self, s: StateId) -> f64 {
        self.v[s.0]
    }

    pub fn q(&self, s: StateId, a: ActionId) -> f64 {
        self.q[s.0][a.0]
    }

    pub fn adv(&self, s: StateId, a: ActionId) -> f64 {
        self.adv[s.0][a.0]
    }

    pub fn values(&self) -> &[f64] {
        &self.v
    }

    pub fn q_row(&self, s: StateId) -> &[f64] {
        &self.q[s.0]
    }

    pub fn adv_row(&self, s: StateId) -> &[f64] {
        &self.adv[s.0]
    }

    /// Σ_s ρ(s) V(s).
    pub fn expected(&self, rho: &[(StateId, f64)]) -> f64 {
        rho.iter().map(|&(s, p)| p * self.v[s.0]).sum()
    }

    /// CSV with one row per state (empty action/q/adv) followed by its actions.
    pub fn write_csv<W: Write>(&self, mdp: &StepMdp, w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            state: &'a str,
            action: Option<&'a str>,
            v: f64,
            q: Option<f64>,
            adv: Option<f64>,
            beta: f64,
            policy_tag: &'a str,
        }
        let mut out = csv::Writer::from_writer(w);
        for s in mdp.states() {
            out.serialize(Row {
                state: mdp.name(s),
                action: None,
                v: self.v[s.0],
                q: None,
                adv: None,
                beta: self.beta,
                policy_tag: &self.policy_tag,
            })?;
            for a in 0..mdp.num_actions(s) {
                out.serialize(Row {
                    state: mdp.name(s),
                    action: Some(mdp.action_label(s, ActionId(a))),
                    v: self.v[s.0],
                    q: Some(self.q[s.0][a]),
                    adv: Some(self.adv[s.0][a]),
                    beta: self.beta,
                    policy_tag: &self.policy_tag,
                })?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn check_policies(mdp: &StepMdp, pi: &TabularPolicy, reference: &TabularPolicy) -> Result<()> {
    pi.ensure_fits(mdp)?;
    reference.ensure_fits(mdp)
}

fn check_beta_nonneg(beta: f64) -> Result<()> {
    if beta.is_finite() && beta >= 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("beta must be finite and nonnegative, got {beta}")))
    }
}

fn check_beta_pos(beta: f64) -> Result<()> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("beta must be positive for the soft optimality operator, got {beta}")))
    }
}

fn check_v(mdp: &StepMdp, v: &[f64]) -> Result<()> {
    if v.len() == mdp.num_states() {
        Ok(())
    } else {
        Err(Error::Shape(format!("value vector has {} entries for {} states", v.len(), mdp.num_states())))
    }
}

/// V_β^π, Q_β^π and A_β^π. With `beta = 0` this is the unregularized V^π, Q^π, A^π.
pub fn evaluate(mdp: &StepMdp, pi: &TabularPolicy, reference: &TabularPolicy, beta: f64) -> Result<ValueTable> {
    check_beta_nonneg(beta)?;
    check_policies(mdp, pi, reference)?;
    let n = mdp.num_states();
    let mut v = vec![0.0; n];
    let mut q = vec![Vec::new(); n];
    let mut adv = vec![Vec::new(); n];
    for &s in mdp.backward_order() {
        if mdp.is_terminal(s) {
            continue;
        }
        let qs: Vec<f64> = (0..mdp.num_actions(s))
            .map(|a| mdp.step_reward(s, ActionId(a)) + v[mdp.next(s, ActionId(a)).0])
            .collect();
        let probs = pi.probs(s);
        let expected_q: f64 = probs.iter().zip(&qs).map(|(p, q)| p * q).sum();
        let vs = expected_q - beta * pi.kl(reference, s);
        let lp = pi.log_probs(s);
        let lr = reference.log_probs(s);
        adv[s.0] = qs
            .iter()
            .enumerate()
            .map(|(a, qa)| qa - vs - beta * (lp[a] - lr[a]))
            .collect();
        v[s.0] = vs;
        q[s.0] = qs;
    }
    Ok(ValueTable {
        beta,
        policy_tag: pi.tag().to_string(),
        v,
        q,
        adv,
    })
}

/// [T_β^π v](s) = E_{a~π}[r(s,a) + v(f(s,a)) − β log π(a|s)/π_ref(a|s)]; terminal states map to 0.
pub fn bellman_apply(
    mdp: &StepMdp,
    pi: &TabularPolicy,
    reference: &TabularPolicy,
    beta: f64,
    v: &[f64],
) -> Result<Vec<f64>> {
    check_beta_nonneg(beta)?;
    check_policies(mdp, pi, reference)?;
    check_v(mdp, v)?;
    Ok(mdp
        .states()
        .map(|s| {
            if mdp.is_terminal(s) {
                return 0.0;
            }
            let lp = pi.log_probs(s);
            let lr = reference.log_probs(s);
            pi.probs(s)
                .iter()
                .enumerate()
                .map(|(a, p)| {
                    let a_id = ActionId(a);
                    p * (mdp.step_reward(s, a_id) + v[mdp.next(s, a_id).0] - beta * (lp[a] - lr[a]))
                })
                .sum()
        })
        .collect())
}

/// β · log Σ_a exp(log π_ref(a|s) + x_a / β), computed stably.
fn soft_max_value(log_ref: &[f64], x: &[f64], beta: f64) -> f64 {
    let terms: Vec<f64> = log_ref.iter().zip(x).map(|(l, xa)| l + xa / beta).collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - m).exp()).sum();
    beta * (m + sum.ln())
}

fn one_step_returns(mdp: &StepMdp, s: StateId, v: &[f64]) -> Vec<f64> {
    (0..mdp.num_actions(s))
        .map(|a| mdp.step_reward(s, ActionId(a)) + v[mdp.next(s, ActionId(a)).0])
        .collect()
}

/// Soft optimality operator in log-sum-exp form:
/// [T_β v](s) = β log E_{a~π_ref}[exp((r(s,a) + v(f(s,a))) / β)].
pub fn bellman_optimal_apply(mdp: &StepMdp, reference: &TabularPolicy, beta: f64, v: &[f64]) -> Result<Vec<f64>> {
    check_beta_pos(beta)?;
    reference.ensure_fits(mdp)?;
    check_v(mdp, v)?;
    Ok(mdp
        .states()
        .map(|s| {
            if mdp.is_terminal(s) {
                0.0
            } else {
                soft_max_value(reference.log_probs(s), &one_step_returns(mdp, s, v), beta)
            }
        })
        .collect())
}

/// V_β^*, Q_β^* and π_β^* relative to `reference`.
#[derive(Clone, Debug)]
pub struct OptimalSolution {
    pub beta: f64,
    pub v_star: Vec<f64>,
    pub q_star: Vec<Vec<f64>>,
    pub pi_star: TabularPolicy,
}

/// One reverse-topological sweep of the soft optimality operator; π_β^* then
/// has logits log π_ref + (Q_β^* − V_β^*)/β.
pub fn solve_optimal(mdp: &StepMdp, reference: &TabularPolicy, beta: f64) -> Result<OptimalSolution> {
    check_beta_pos(beta)?;
    reference.ensure_fits(mdp)?;
    let n = mdp.num_states();
    let mut v = vec![0.0; n];
    let mut q = vec![Vec::new(); n];
    for &s in mdp.backward_order() {
        if mdp.is_terminal(s) {
            continue;
        }
        let qs = one_step_returns(mdp, s, &v);
        v[s.0] = soft_max_value(reference.log_probs(s), &qs, beta);
        q[s.0] = qs;
    }
    let logits = mdp
        .states()
        .map(|s| {
            reference
                .log_probs(s)
                .iter()
                .zip(&q[s.0])
                .map(|(lr, qa)| lr + (qa - v[s.0]) / beta)
                .collect()
        })
        .collect();
    let pi_star = TabularPolicy::from_logits(mdp, logits)?.with_tag("pi_star");
    Ok(OptimalSolution {
        beta,
        v_star: v,
        q_star: q,
        pi_star,
    })
}

/// I_s(π, π_ref) = E_{a~π}[A^{π_ref}(s,a) − β log π(a|s)/π_ref(a|s)] with the
/// unregularized advantage of the reference policy.
pub fn one_step_improvement(
    mdp: &StepMdp,
    pi: &TabularPolicy,
    reference: &TabularPolicy,
    beta: f64,
    s: StateId,
) -> Result<f64> {
    let ref_values = evaluate(mdp, reference, reference, 0.0)?;
    one_step_improvement_with(mdp, &ref_values, pi, reference, beta, s)
}

/// As [`one_step_improvement`], reusing a precomputed `evaluate(ref, ref, 0)`.
pub fn one_step_improvement_with(
    mdp: &StepMdp,
    ref_values: &ValueTable,
    pi: &TabularPolicy,
    reference: &TabularPolicy,
    beta: f64,
    s: StateId,
) -> Result<f64> {
    check_beta_nonneg(beta)?;
    check_policies(mdp, pi, reference)?;
    mdp.check_state(s)?;
    if mdp.is_terminal(s) {
        return Err(Error::domain(format!("state `{}` is terminal", mdp.name(s))));
    }
    let lp = pi.log_probs(s);
    let lr = reference.log_probs(s);
    Ok(pi
        .probs(s)
        .iter()
        .enumerate()
        .map(|(a, p)| p * (ref_values.adv(s, ActionId(a)) - beta * (lp[a] - lr[a])))
        .sum())
}

fn check_distribution(mdp: &StepMdp, rho: &[(StateId, f64)]) -> Result<()> {
    let mut sum = 0.0;
    for &(s, p) in rho {
        mdp.check_state(s)?;
        if !(p.is_finite() && p >= 0.0) {
            return Err(Error::domain(format!("distribution weight {p} at `{}`", mdp.name(s))));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("distribution sums to {sum}")));
    }
    Ok(())
}

/// Expected number of visits to each state by trajectories of `pi` started from `rho`.
/// `rho` may put mass on any states, not only μ's support.
pub fn occupancy(mdp: &StepMdp, pi: &TabularPolicy, rho: &[(StateId, f64)]) -> Result<Vec<f64>> {
    pi.ensure_fits(mdp)?;
    check_distribution(mdp, rho)?;
    let mut occ = vec![0.0; mdp.num_states()];
    for &(s, p) in rho {
        occ[s.0] += p;
    }
    for s in mdp.forward_order() {
        if mdp.is_terminal(s) || occ[s.0] == 0.0 {
            continue;
        }
        let mass = occ[s.0];
        for (a, p) in pi.probs(s).iter().enumerate() {
            occ[mdp.next(s, ActionId(a)).0] += mass * p;
        }
    }
    Ok(occ)
}

/// Both sides of the performance-difference identity:
/// `lhs = V_β^π(ρ) − V_β^π̃(ρ)`, `rhs = E_ρ^π[T_β^π V_β^π̃(s) − V_β^π̃(s)]`.
pub fn performance_difference(
    mdp: &StepMdp,
    pi: &TabularPolicy,
    pi_tilde: &TabularPolicy,
    reference: &TabularPolicy,
    beta: f64,
    rho: &[(StateId, f64)],
) -> Result<(f64, f64)> {
    let v_pi = evaluate(mdp, pi, reference, beta)?;
    let v_tilde = evaluate(mdp, pi_tilde, reference, beta)?;
    let lhs = v_pi.expected(rho) - v_tilde.expected(rho);

    let occ = occupancy(mdp, pi, rho)?;
    let backed_up = bellman_apply(mdp, pi, reference, beta, v_tilde.values())?;
    let rhs = mdp
        .nonterminal_states()
        .map(|s| occ[s.0] * (backed_up[s.0] - v_tilde.v(s)))
        .sum();
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{chain, t2};
    use crate::generator::{random_instance, RandomMdpParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(mdp: &StepMdp) -> (StateId, StateId, StateId) {
        (
            mdp.state_by_name("root").unwrap(),
            mdp.state_by_name("s1").unwrap(),
            mdp.state_by_name("s2").unwrap(),
        )
    }

    /// Trajectory enumeration oracle for V^π at β = 0.
    fn enumerate_value(mdp: &StepMdp, pi: &TabularPolicy, s: StateId) -> f64 {
        if mdp.is_terminal(s) {
            return f64::from(mdp.terminal_reward(s));
        }
        pi.probs(s)
            .iter()
            .enumerate()
            .map(|(a, p)| p * enumerate_value(mdp, pi, mdp.next(s, ActionId(a))))
            .sum()
    }

    fn random_policy(mdp: &StepMdp, rng: &mut ChaCha8Rng, scale: f64) -> TabularPolicy {
        let logits = mdp
            .states()
            .map(|s| (0..mdp.num_actions(s)).map(|_| rng.random_range(-scale..scale)).collect())
            .collect();
        TabularPolicy::from_logits(mdp, logits).unwrap()
    }

    #[test]
    fn t2_uniform_values() {
        let mdp = t2();
        let u = TabularPolicy::uniform(&mdp);
        let (root, s1, s2) = ids(&mdp);
        let vt = evaluate(&mdp, &u, &u, 1.0).unwrap();
        assert_eq!(vt.v(s1), 0.5);
        assert_eq!(vt.v(s2), 0.0);
        assert_eq!(vt.v(root), 0.25);
        let v0 = evaluate(&mdp, &u, &u, 0.0).unwrap();
        assert_eq!(v0.adv(s1, ActionId(0)), 0.5);
        assert_eq!(v0.adv(s1, ActionId(1)), -0.5);
        for s in mdp.states() {
            assert!((v0.v(s) - if mdp.is_terminal(s) { 0.0 } else { enumerate_value(&mdp, &u, s) }).abs() < 1e-15);
        }
    }

    #[test]
    fn negative_beta_rejected() {
        let mdp = t2();
        let u = TabularPolicy::uniform(&mdp);
        assert!(evaluate(&mdp, &u, &u, -0.1).is_err());
        assert!(bellman_optimal_apply(&mdp, &u, 0.0, &vec![0.0; 7]).is_err());
        assert!(solve_optimal(&mdp, &u, 0.0).is_err());
    }

    #[test]
    fn q_and_adv_definitions_and_centering() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..20 {
            let inst = random_instance(&RandomMdpParams::default(), seed);
            let pi = random_policy(&inst.mdp, &mut rng, 2.0);
            let r = random_policy(&inst.mdp, &mut rng, 2.0);
            for beta in [0.0, 0.1, 1.0, 10.0] {
                let vt = evaluate(&inst.mdp, &pi, &r, beta).unwrap();
                for s in inst.mdp.nonterminal_states() {
                    let mut centered = 0.0;
                    for a in 0..inst.mdp.num_actions(s) {
                        let a = ActionId(a);
                        let q = inst.mdp.step_reward(s, a) + vt.v(inst.mdp.next(s, a));
                        assert_eq!(vt.q(s, a), q);
                        let lr = pi.log_ratio(&r, s, a).unwrap();
                        assert!((vt.adv(s, a) - (q - vt.v(s) - beta * lr)).abs() < 1e-12);
                        centered += pi.prob(s, a).unwrap() * vt.adv(s, a);
                    }
                    assert!(centered.abs() < 1e-10, "{centered}");
                }
            }
        }
    }

    #[test]
    fn bellman_fixed_point_and_unrolling() {
        let mdp = t2();
        let u = TabularPolicy::uniform(&mdp);
        let (root, s1, _) = ids(&mdp);
        let vt = evaluate(&mdp, &u, &u, 1.0).unwrap();
        let out = bellman_apply(&mdp, &u, &u, 1.0, vt.values()).unwrap();
        for s in mdp.states() {
            assert!((out[s.0] - vt.v(s)).abs() <= 1e-12);
        }
        let zero = vec![0.0; mdp.num_states()];
        let once = bellman_apply(&mdp, &u, &u, 1.0, &zero).unwrap();
        assert_eq!(once[s1.0], 0.5);
        let twice = bellman_apply(&mdp, &u, &u, 1.0, &once).unwrap();
        assert!((twice[root.0] - vt.v(root)).abs() < 1e-15);
    }

    #[test]
    fn soft_optimality_on_t2() {
        let mdp = t2();
        let u = TabularPolicy::uniform(&mdp);
        let (_, s1, _) = ids(&mdp);
        let zero = vec![0.0; mdp.num_states()];
        let out = bellman_optimal_apply(&mdp, &u, 1.0, &zero).unwrap();
        let e = std::f64::consts::E;
        assert!((out[s1.0] - ((e + 1.0) / 2.0).ln()).abs() < 1e-15);
        assert!((out[s1.0] - 0.620115).abs() < 1e-6);

        let big = bellman_optimal_apply(&mdp, &u, 1e3, &zero).unwrap();
        assert!((big[s1.0] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn soft_optimality_of_constant_is_constant() {
        let mdp = chain(3, false);
        let u = TabularPolicy::uniform(&mdp);
        let v = vec![0.7; mdp.num_states()];
        let out = bellman_optimal_apply(&mdp, &u, 0.3, &v).unwrap();
        for s in mdp.nonterminal_states() {
            assert!((out[s.0] - 0.7).abs() < 1e-15);
        }
    }

    /// Golden-section maximization of T_β^π v(s) over π(·|s) at 2-action states.
    #[test]
    fn log_sum_exp_equals_max_over_policies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mdp = t2();
        let (root, s1, s2) = ids(&mdp);
        for _ in 0..30 {
            let r = random_policy(&mdp, &mut rng, 2.0);
            let beta = rng.random_range(0.05..5.0);
            let v: Vec<f64> = (0..mdp.num_states()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let closed = bellman_optimal_apply(&mdp, &r, beta, &v).unwrap();
            for s in [root, s1, s2] {
                let objective = |x: f64| {
                    let mut logits: Vec<Vec<f64>> = r.logits().to_vec();
                    logits[s.0] = vec![x, 0.0];
                    let p = TabularPolicy::from_logits(&mdp, logits).unwrap();
                    bellman_apply(&mdp, &p, &r, beta, &v).unwrap()[s.0]
                };
                let (mut lo, mut hi) = (-60.0f64, 60.0f64);
                let g = (5f64.sqrt() - 1.0) / 2.0;
                for _ in 0..200 {
                    let a = hi - g * (hi - lo);
                    let b = lo + g * (hi - lo);
                    if objective(a) < objective(b) {
                        lo = a;
                    } else {
                        hi = b;
                    }
                }
                let best = objective(0.5 * (lo + hi));
                assert!((best - closed[s.0]).abs() < 1e-9, "{best} vs {}", closed[s.0]);
            }
        }
    }

    #[test]
    fn optimal_solution_on_t2() {
        let mdp = t2();
        let u = TabularPolicy::uniform(&mdp);
        let (_, s1, _) = ids(&mdp);
        let sol = solve_optimal(&mdp, &u, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((sol.pi_star.prob(s1, ActionId(0)).unwrap() - e / (e + 1.0)).abs() < 1e-12);
        assert!((sol.v_star[s1.0] - 0.620115).abs() < 1e-6);
        let fp = bellman_optimal_apply(&mdp, &u, 1.0, &sol.v_star).unwrap();
        for s in mdp.states() {
            assert!((fp[s.0] - sol.v_star[s.0]).abs() <= 1e-10);
        }
        // V_β^{π*} computed by plain evaluation agrees with the optimality sweep
        let vt = evaluate(&mdp, &sol.pi_star, &u, 1.0).unwrap();
        for s in mdp.states() {
            assert!((vt.v(s) - sol.v_star[s.0]).abs() < 1e-12);
        }
    }

    #[test]
    fn optimal_solution_is_deterministic_and_self_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..10 {
            let inst = random_instance(&RandomMdpParams::default(), seed);
            let r = random_policy(&inst.mdp, &mut rng, 1.0);
            let first = solve_optimal(&inst.mdp, &r, 1.0).unwrap();
            let vt = evaluate(&inst.mdp, &first.pi_star, &r, 1.0).unwrap();
            for s in inst.mdp.nonterminal_states() {
                assert!((vt.v(s) - first.v_star[s.0]).abs() < 1e-9);
                for a in 0..inst.mdp.num_actions(s) {
                    let lr = first.pi_star.log_ratio(&r, s, ActionId(a)).unwrap();
                    let analytic = (first.q_star[s.0][a] - first.v_star[s.0]) / 1.0;
                    assert!((lr - analytic).abs() < 1e-10);
                }
            }
            let again = solve_optimal(&inst.mdp, &r, 1.0).unwrap();
            for s in inst.mdp.nonterminal_states() {
                for (p, q) in first.pi_star.probs(s).iter().zip(again.pi_star.probs(s)) {
                    assert!((p - q).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn single_action_mdp_has_trivial_optimum() {
        let mdp = chain(4, true);
        let u = TabularPolicy::uniform(&mdp);
        let sol = solve_optimal(&mdp, &u, 0.5).unwrap();
        for s in mdp.nonterminal_states() {
            assert_eq!(sol.pi_star.probs(s), u.probs(s));
            assert!((sol.v_star[s.0] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn monotone_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for seed in 0..10 {
            let inst = random_instance(&RandomMdpParams::default(), seed);
            let r = random_policy(&inst.mdp, &mut rng, 2.0);
            let v: Vec<f64> = (0..inst.mdp.num_states()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = v.iter().map(|x| x + rng.random_range(0.0..0.5)).collect();
            let tv = bellman_optimal_apply(&inst.mdp, &r, 0.7, &v).unwrap();
            let tw = bellman_optimal_apply(&inst.mdp, &r, 0.7, &w).unwrap();
            assert!(tv.iter().zip(&tw).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn one_step_improvement_examples() {
        let mdp = t2();
        let u = TabularPolicy::uniform(&mdp);
        let (_, s1, _) = ids(&mdp);
        assert!(one_step_improvement(&mdp, &u, &u, 1.0, s1).unwrap().abs() < 1e-15);
        let mut logits: Vec<Vec<f64>> = u.logits().to_vec();
        logits[s1.0] = vec![-10.0, 10.0];
        let bad = TabularPolicy::from_logits(&mdp, logits).unwrap();
        let val = one_step_improvement(&mdp, &bad, &u, 1.0, s1).unwrap();
        // direct formula: E_bad[A] − KL(bad || u)
        let p = bad.probs(s1);
        let expect = p[0] * 0.5 + p[1] * -0.5 - bad.kl(&u, s1);
        assert!((val - expect).abs() < 1e-14);
        assert!(val < 0.0);
        let win = mdp.state_by_name("win").unwrap();
        assert!(one_step_improvement(&mdp, &u, &u, 1.0, win).is_err());
    }

    #[test]
    fn performance_difference_examples() {
        let mdp = t2();
        let u = TabularPolicy::uniform(&mdp);
        let (lhs, rhs) = performance_difference(&mdp, &u, &u, &u, 1.0, mdp.mu()).unwrap();
        assert_eq!((lhs, rhs), (0.0, 0.0));

        let sol = solve_optimal(&mdp, &u, 1.0).unwrap();
        let (lhs, rhs) = performance_difference(&mdp, &sol.pi_star, &u, &u, 1.0, mdp.mu()).unwrap();
        let root = mdp.state_by_name("root").unwrap();
        let direct = sol.v_star[root.0] - 0.25;
        assert!((lhs - direct).abs() < 1e-12);
        assert!((lhs - rhs).abs() < 1e-10);
        assert!(lhs > 0.0);
    }

    #[test]
    fn performance_difference_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let inst = random_instance(&RandomMdpParams::default(), seed);
            let pi = random_policy(&inst.mdp, &mut rng, 2.0);
            let pt = random_policy(&inst.mdp, &mut rng, 2.0);
            let r = random_policy(&inst.mdp, &mut rng, 2.0);
            let beta = rng.random_range(0.0..3.0);
            let (l, rr) = performance_difference(&inst.mdp, &pi, &pt, &r, beta, inst.mdp.mu()).unwrap();
            worst = worst.max((l - rr).abs());
        }
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn occupancy_counts_expected_visits() {
        let mdp = t2();
        let u = TabularPolicy::uniform(&mdp);
        let occ = occupancy(&mdp, &u, mdp.mu()).unwrap();
        let (root, s1, s2) = ids(&mdp);
        assert_eq!(occ[root.0], 1.0);
        assert_eq!(occ[s1.0], 0.5);
        assert_eq!(occ[s2.0], 0.5);
        assert!(occupancy(&mdp, &u, &[(root, 0.5)]).is_err());
    }

    #[test]
    fn csv_export_has_state_and_action_rows() {
        let mdp = t2();
        let u = TabularPolicy::uniform(&mdp);
        let vt = evaluate(&mdp, &u, &u, 1.0).unwrap();
        let mut buf = Vec::new();
        vt.write_csv(&mdp, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "state,action,v,q,adv,beta,policy_tag");
        assert_eq!(lines.next().unwrap(), "root,,0.25,,,1.0,uniform");
        assert_eq!(text.lines().count(), 1 + 7 + 6);
    }
}
