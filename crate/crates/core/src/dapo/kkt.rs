use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::mdp::{ActionId, StateId, StepMdp};
use crate::policy::TabularPolicy;

use super::dataset::AdvantageDataset;

/// Per-state minimizer of the population DAPO loss.
#[derive(Clone, Debug, PartialEq)]
pub struct KktSolution {
    /// log π⁺(a|s) − log π_ref(a|s).
    pub u: Vec<f64>,
    /// Multiplier of the scaled problem; λ_s(ν) = β · lambda.
    pub lambda: f64,
    pub pi_plus: Vec<f64>,
    pub normalization_residual: f64,
    pub stationarity_residual: f64,
}

/// Root of `u + k e^u = t`.
///
/// With `y = ln w`: for `k > 0` the root is `t − w` where `e^y + y = ln k + t`;
/// for `k < 0` the lower-branch root is `t + w` where `y − e^y = ln(−k) + t`.
/// Both are solved by Newton, which converges monotonically after the first step.
fn solve_u(t: f64, k: f64) -> f64 {
    if k == 0.0 {
        return t;
    }
    let z = k.abs().ln() + t;
    if k > 0.0 {
        let mut y = if z < 1.0 { z } else { z.ln() };
        for _ in 0..100 {
            let e = y.exp();
            let step = (e + y - z) / (e + 1.0);
            y -= step;
            if step.abs() <= 1e-15 * y.abs().max(1.0) {
                break;
            }
        }
        t - y.exp()
    } else {
        if z > -1.0 {
            return f64::NAN;
        }
        let mut y = z;
        for _ in 0..500 {
            let e = y.exp();
            let step = (y - e - z) / (1.0 - e);
            if !step.is_finite() {
                break;
            }
            y -= step;
            if step.abs() <= 1e-15 * y.abs().max(1.0) {
                break;
            }
        }
        t + y.min(0.0).exp()
    }
}

struct Problem<'a> {
    targets: Vec<f64>,
    ref_probs: &'a [f64],
    /// π_ref(a)/ν(a).
    ratio: Vec<f64>,
}

impl Problem<'_> {
    fn u(&self, lambda: f64) -> Vec<f64> {
        self.targets
            .iter()
            .zip(&self.ratio)
            .map(|(&t, &c)| solve_u(t, lambda * c))
            .collect()
    }

    /// E_ref[e^{u(λ)}] − 1 and its derivative in λ.
    fn normalization(&self, lambda: f64) -> (f64, f64) {
        let u = self.u(lambda);
        let mut g = -1.0;
        let mut dg = 0.0;
        for ((&ua, &p), &c) in u.iter().zip(self.ref_probs).zip(&self.ratio) {
            let e = ua.exp();
            g += p * e;
            dg -= p * e * c * e / (1.0 + lambda * c * e);
        }
        (g, dg)
    }
}

/// Solve the per-state KKT system
/// `A/β − u = λ (π_ref/ν) e^u`, `E_{π_ref}[e^u] = 1`.
///
/// `advantages` are unscaled; the targets are `A/β`. λ is searched on `[0, ∞)`
/// when `E_ref[e^{A/β}] ≥ 1` and on the admissible negative range otherwise.
pub fn solve_exact_dapo(advantages: &[f64], ref_probs: &[f64], nu_probs: &[f64], beta: f64) -> Result<KktSolution> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::domain(format!("beta must be positive, got {beta}")));
    }
    let n = advantages.len();
    if n == 0 || ref_probs.len() != n || nu_probs.len() != n {
        return Err(Error::Shape(format!(
            "{} advantages, {} reference and {} sampling probabilities",
            n,
            ref_probs.len(),
            nu_probs.len()
        )));
    }
    if advantages.iter().any(|a| !a.is_finite()) {
        return Err(Error::domain("advantages must be finite"));
    }
    if ref_probs.iter().chain(nu_probs).any(|&p| !(p > 0.0 && p.is_finite())) {
        return Err(Error::domain("reference and sampling probabilities must be strictly positive"));
    }
    let problem = Problem {
        targets: advantages.iter().map(|a| a / beta).collect(),
        ref_probs,
        ratio: ref_probs.iter().zip(nu_probs).map(|(r, v)| r / v).collect(),
    };

    let (g0, _) = problem.normalization(0.0);
    let (mut lo, mut hi) = if g0 >= 0.0 {
        let mut hi = 1.0;
        while problem.normalization(hi).0 > 0.0 {
            hi *= 2.0;
            if hi > 1e300 {
                return Err(Error::NoKktPoint("normalization does not fall below one".into()));
            }
        }
        (0.0, hi)
    } else {
        let lambda_min = problem
            .targets
            .iter()
            .zip(&problem.ratio)
            .map(|(t, c)| -(-t - 1.0).exp() / c)
            .fold(f64::NEG_INFINITY, f64::max);
        if problem.normalization(lambda_min).0 < 0.0 {
            return Err(Error::NoKktPoint(format!(
                "E_ref[exp(A/β)] = {} and no negative multiplier restores normalization",
                g0 + 1.0
            )));
        }
        (lambda_min, 0.0)
    };
    // g is decreasing in λ on the bracket.
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 1e-12 * (1.0 + mid.abs()) * 1e-3 {
            break;
        }
        if problem.normalization(mid).0 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut lambda = 0.5 * (lo + hi);
    let mut best = problem.normalization(lambda).0.abs();
    for _ in 0..8 {
        let (g, dg) = problem.normalization(lambda);
        if g == 0.0 || dg == 0.0 {
            break;
        }
        let next = lambda - g / dg;
        if !(next >= lo && next <= hi) {
            break;
        }
        let r = problem.normalization(next).0.abs();
        if r >= best {
            break;
        }
        best = r;
        lambda = next;
    }
    if g0 >= 0.0 && lambda < 0.0 {
        lambda = 0.0;
    }

    let u = problem.u(lambda);
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::NoKktPoint(format!("non-finite log-ratio at λ = {lambda}")));
    }
    let pi_plus: Vec<f64> = u.iter().zip(ref_probs).map(|(ua, p)| p * ua.exp()).collect();
    let normalization_residual = (pi_plus.iter().sum::<f64>() - 1.0).abs();
    let stationarity_residual = (0..n)
        .map(|a| (problem.targets[a] - u[a] - lambda * problem.ratio[a] * u[a].exp()).abs())
        .fold(0.0, f64::max);
    Ok(KktSolution {
        u,
        lambda,
        pi_plus,
        normalization_residual,
        stationarity_residual,
    })
}

/// Exact DAPO policy: per-state KKT solutions, π_ref elsewhere.
#[derive(Clone, Debug)]
pub struct DapoSolution {
    pub beta: f64,
    pub per_state: BTreeMap<StateId, KktSolution>,
    pub pi_plus: TabularPolicy,
}

impl DapoSolution {
    /// Assemble π⁺ from per-state solutions; logits are `log π_ref + u`.
    pub fn assemble(
        mdp: &StepMdp,
        reference: &TabularPolicy,
        beta: f64,
        per_state: BTreeMap<StateId, KktSolution>,
    ) -> Result<Self> {
        reference.ensure_fits(mdp)?;
        let logits = mdp
            .states()
            .map(|s| {
                let lr = reference.log_probs(s).to_vec();
                match per_state.get(&s) {
                    Some(sol) => lr.iter().zip(&sol.u).map(|(l, u)| l + u).collect(),
                    None => lr,
                }
            })
            .collect();
        let pi_plus = TabularPolicy::from_logits(mdp, logits)?.with_tag("pi_plus");
        Ok(DapoSolution {
            beta,
            per_state,
            pi_plus,
        })
    }

    /// λ_s(ν) = β λ*_s.
    pub fn lambda_s(&self, s: StateId) -> Option<f64> {
        self.per_state.get(&s).map(|k| self.beta * k.lambda)
    }

    pub fn max_residuals(&self) -> (f64, f64) {
        self.per_state.values().fold((0.0, 0.0), |(n, st), k| {
            (n.max(k.normalization_residual), st.max(k.stationarity_residual))
        })
    }

    pub fn write_csv<W: Write>(&self, mdp: &StepMdp, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["state", "action", "u_plus", "lambda_star"])?;
        for (&s, sol) in &self.per_state {
            for (a, u) in sol.u.iter().enumerate() {
                out.write_record([
                    mdp.name(s),
                    mdp.action_label(s, ActionId(a)),
                    &format!("{u:?}"),
                    &format!("{:?}", sol.lambda),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Solve every state of the dataset exactly. Each retained state must carry a
/// record for every action.
pub fn solve_exact_policy(mdp: &StepMdp, dataset: &AdvantageDataset, reference: &TabularPolicy) -> Result<DapoSolution> {
    reference.ensure_fits(mdp)?;
    let mut per_state = BTreeMap::new();
    for group in dataset.groups() {
        let s = group[0].state;
        let k = mdp.num_actions(s);
        let mut adv = vec![f64::NAN; k];
        for r in group {
            mdp.check_action(s, r.action)?;
            adv[r.action.0] = r.a_hat;
        }
        if adv.iter().any(|a| a.is_nan()) {
            return Err(Error::domain(format!(
                "exact solve needs every action of `{}` in the dataset",
                mdp.name(s)
            )));
        }
        let nu = dataset.action_distribution(mdp, s);
        let sol = solve_exact_dapo(&adv, reference.probs(s), &nu, dataset.beta)?;
        per_state.insert(s, sol);
    }
    DapoSolution::assemble(mdp, reference, dataset.beta, per_state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Grid over λ, bisection on each u, then bisection on the normalization.
    fn oracle(t: &[f64], r: &[f64], nu: &[f64]) -> (f64, Vec<f64>) {
        let u_of = |lambda: f64| -> Vec<f64> {
            t.iter()
                .zip(r.iter().zip(nu))
                .map(|(&ta, (&ra, &na))| {
                    let k = lambda * ra / na;
                    let (mut lo, mut hi) = (ta - 50.0, ta);
                    while hi - lo > 1e-13 {
                        let m = 0.5 * (lo + hi);
                        if m + k * m.exp() > ta {
                            hi = m;
                        } else {
                            lo = m;
                        }
                    }
                    0.5 * (lo + hi)
                })
                .collect()
        };
        let g = |lambda: f64| -> f64 { u_of(lambda).iter().zip(r).map(|(u, p)| p * u.exp()).sum::<f64>() - 1.0 };
        let grid: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
        let i = grid.windows(2).position(|w| g(w[0]) >= 0.0 && g(w[1]) <= 0.0).unwrap();
        let (mut lo, mut hi) = (grid[i], grid[i + 1]);
        while hi - lo > 1e-14 {
            let m = 0.5 * (lo + hi);
            if g(m) > 0.0 {
                lo = m;
            } else {
                hi = m;
            }
        }
        let l = 0.5 * (lo + hi);
        (l, u_of(l))
    }

    #[test]
    fn zero_advantage_is_stationary() {
        let sol = solve_exact_dapo(&[0.0, 0.0, 0.0], &[0.2, 0.3, 0.5], &[1.0 / 3.0; 3], 1.0).unwrap();
        assert!(sol.lambda.abs() < 1e-12);
        assert!(sol.u.iter().all(|u| u.abs() < 1e-12));
        assert!((sol.pi_plus[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn t2_s1_matches_grid_oracle() {
        let sol = solve_exact_dapo(&[0.5, -0.5], &[0.5, 0.5], &[0.5, 0.5], 1.0).unwrap();
        let (l, u) = oracle(&[0.5, -0.5], &[0.5, 0.5], &[0.5, 0.5]);
        assert!((sol.lambda - l).abs() < 1e-10, "{} vs {}", sol.lambda, l);
        for (a, b) in sol.u.iter().zip(&u) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(sol.normalization_residual < 1e-10);
        assert!(sol.stationarity_residual < 1e-10);
        assert!((sol.lambda - 0.0996).abs() < 5e-3, "{}", sol.lambda);
        assert!((sol.pi_plus[0] - 0.714).abs() < 2e-3, "{}", sol.pi_plus[0]);
    }

    #[test]
    fn nu_equal_ref_gives_kl_identity() {
        let r = [0.1, 0.6, 0.3];
        let a = [0.4, -0.1, -0.0333333333333333];
        let mean: f64 = r.iter().zip(&a).map(|(p, x)| p * x).sum();
        let a: Vec<f64> = a.iter().map(|x| x - mean).collect();
        for beta in [0.1, 1.0, 10.0] {
            let sol = solve_exact_dapo(&a, &r, &r, beta).unwrap();
            let kl: f64 = r.iter().zip(&sol.pi_plus).map(|(p, q)| p * (p / q).ln()).sum();
            assert!((beta * sol.lambda - beta * kl).abs() < 1e-8);
            assert!(sol.lambda >= 0.0);
        }
    }

    #[test]
    fn negative_multiplier_when_normalization_starts_below_one() {
        let sol = solve_exact_dapo(&[-0.3, -0.2], &[0.5, 0.5], &[0.5, 0.5], 1.0).unwrap();
        assert!(sol.lambda < 0.0);
        assert!(sol.normalization_residual < 1e-10);
        assert!(sol.stationarity_residual < 1e-9);
        assert!(matches!(
            solve_exact_dapo(&[-5.0, -5.0], &[0.5, 0.5], &[0.5, 0.5], 1.0),
            Err(Error::NoKktPoint(_))
        ));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(solve_exact_dapo(&[0.0, 0.0], &[0.5, 0.5], &[1.0, 0.0], 1.0).is_err());
        assert!(solve_exact_dapo(&[0.0, 0.0], &[0.5, 0.5], &[0.5, 0.5], 0.0).is_err());
        assert!(solve_exact_dapo(&[0.0], &[0.5, 0.5], &[0.5, 0.5], 1.0).is_err());
        assert!(solve_exact_dapo(&[f64::NAN, 0.0], &[0.5, 0.5], &[0.5, 0.5], 1.0).is_err());
    }

    #[test]
    fn solve_u_extremes() {
        for &(t, k) in &[(0.0, 1e-300), (700.0, 1e300), (-700.0, 1e-10), (30.0, 1e10), (5.0, -1e-9), (0.0, -0.3)] {
            let u = solve_u(t, k);
            let r = u + k * u.exp() - t;
            assert!(r.abs() < 1e-9 * (1.0 + t.abs()), "t {t} k {k} u {u} r {r}");
        }
    }

    fn simplex(raw: Vec<f64>) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn certificate_holds(
            data in (2usize..6).prop_flat_map(|k| (
                prop::collection::vec(-3.0f64..3.0, k),
                prop::collection::vec(0.05f64..1.0, k),
                prop::collection::vec(0.05f64..1.0, k),
            )),
            beta in prop::sample::select(vec![0.1, 1.0, 10.0]),
        ) {
            let (adv, r, nu) = data;
            let (r, nu) = (simplex(r), simplex(nu));
            let mean: f64 = r.iter().zip(&adv).map(|(p, a)| p * a).sum();
            let adv: Vec<f64> = adv.iter().map(|a| a - mean).collect();
            let sol = solve_exact_dapo(&adv, &r, &nu, beta).unwrap();
            prop_assert!(sol.lambda >= 0.0);
            prop_assert!(sol.normalization_residual < 1e-10);
            prop_assert!(sol.stationarity_residual < 1e-9);
        }
    }
}
