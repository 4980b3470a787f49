//! Randomized numerical certificates for the regularized-MDP identities and
//! the exact DAPO improvement guarantee.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dapo::{
    dapo_gradient, solve_exact_policy, AdvantageDataset, AdvantageRecord, AdvantageSource, DapoSolution,
};
use crate::error::{Error, Result};
use crate::fixtures::t2;
use crate::generator::{random_instance, random_policy, RandomInstance, RandomMdpParams};
use crate::mdp::{ActionId, StateId, StepMdp};
use crate::policy::TabularPolicy;
use crate::rng::derive_key;
use crate::values::{
    bellman_optimal_apply, evaluate, occupancy, one_step_improvement_with, performance_difference, solve_optimal,
    ValueTable,
};

const BETAS: [f64; 3] = [0.1, 1.0, 10.0];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub check_name: String,
    pub instances: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// (instance seed, residual) for every instance above tolerance.
    pub failures: Vec<(u64, f64)>,
    /// Auxiliary statistics (not part of the verdict).
    pub observations: BTreeMap<String, f64>,
}

impl CheckReport {
    fn new(name: &str, tolerance: f64) -> Self {
        CheckReport {
            check_name: name.to_string(),
            instances: 0,
            max_residual: 0.0,
            tolerance,
            passed: true,
            failures: Vec::new(),
            observations: BTreeMap::new(),
        }
    }

    fn record(&mut self, seed: u64, residual: f64) {
        self.instances += 1;
        let r = if residual.is_nan() { f64::INFINITY } else { residual };
        self.max_residual = self.max_residual.max(r);
        if r > self.tolerance {
            self.failures.push((seed, r));
        }
        self.passed = self.max_residual <= self.tolerance;
    }

    fn observe(&mut self, key: &str, value: f64) {
        self.observations.insert(key.to_string(), value);
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<30} {:>5} instances  max residual {:>10.3e}  tol {:>8.1e}  {}",
            self.check_name,
            self.instances,
            self.max_residual,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub params: RandomMdpParams,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            instances: 100,
            seed: 0,
            params: RandomMdpParams::default(),
        }
    }
}

impl CheckConfig {
    pub fn with_instances(instances: usize, seed: u64) -> Self {
        CheckConfig { instances, seed, ..CheckConfig::default() }
    }

    fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.instances as u64).map(move |i| derive_key(self.seed, i))
    }
}

fn instance(params: &RandomMdpParams, seed: u64) -> (RandomInstance, ChaCha8Rng) {
    (random_instance(params, seed), ChaCha8Rng::seed_from_u64(derive_key(seed, 1)))
}

fn pick_beta(rng: &mut ChaCha8Rng) -> f64 {
    BETAS[rng.random_range(0..BETAS.len())]
}

fn uniform_logits_policy(mdp: &StepMdp, half_width: f64, rng: &mut ChaCha8Rng) -> TabularPolicy {
    let logits = mdp
        .states()
        .map(|s| (0..mdp.num_actions(s)).map(|_| rng.random_range(-half_width..=half_width)).collect())
        .collect();
    TabularPolicy::from_logits(mdp, logits).expect("bounded logits are valid")
}

/// Performance-difference identity on random instances, on identical policies,
/// and on near-deterministic policies.
pub fn check_pdl(config: &CheckConfig) -> Result<Vec<CheckReport>> {
    let mut main = CheckReport::new("pdl", 1e-9);
    let mut same = CheckReport::new("pdl_identical_policies", 1e-12);
    let mut stress = CheckReport::new("pdl_near_deterministic", 1e-8);
    for seed in config.seeds() {
        let (inst, mut rng) = instance(&config.params, seed);
        let mdp = &inst.mdp;
        let beta = pick_beta(&mut rng);
        let reference = random_policy(mdp, inst.sigma, &mut rng);
        let pi = random_policy(mdp, inst.sigma, &mut rng);
        let tilde = random_policy(mdp, inst.sigma, &mut rng);
        let (l, r) = performance_difference(mdp, &pi, &tilde, &reference, beta, mdp.mu())?;
        main.record(seed, (l - r).abs());
        let (l, r) = performance_difference(mdp, &pi, &pi, &reference, beta, mdp.mu())?;
        same.record(seed, l.abs().max(r.abs()));

        let reference = uniform_logits_policy(mdp, 20.0, &mut rng);
        let pi = uniform_logits_policy(mdp, 20.0, &mut rng);
        let tilde = uniform_logits_policy(mdp, 20.0, &mut rng);
        let (l, r) = performance_difference(mdp, &pi, &tilde, &reference, beta, mdp.mu())?;
        stress.record(seed, (l - r).abs());
    }
    Ok(vec![main, same, stress])
}

/// max_π Σ_a π(a)(q_a) − β KL(π‖ref) by damped mirror ascent, evaluated directly.
fn numeric_soft_max(q: &[f64], ref_probs: &[f64], beta: f64) -> f64 {
    let objective = |p: &[f64]| -> f64 {
        p.iter()
            .zip(q)
            .zip(ref_probs)
            .map(|((&pa, &qa), &ra)| if pa > 0.0 { pa * (qa - beta * (pa / ra).ln()) } else { 0.0 })
            .sum()
    };
    let mut logp: Vec<f64> = ref_probs.iter().map(|r| r.ln()).collect();
    let eta = 0.5 / beta;
    for _ in 0..200 {
        let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        for (a, l) in logp.iter_mut().enumerate() {
            *l += eta * (q[a] - beta * (p[a].ln() - ref_probs[a].ln()));
        }
        let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z = max + logp.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logp.iter_mut().for_each(|l| *l -= z);
    }
    let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    objective(&p)
}

/// Soft Bellman optimality: log-sum-exp against a numeric maximizer, the
/// fixed point of V_β^*, the analytic form of π_β^*, and the T2 closed form.
pub fn check_bellman_optimality(config: &CheckConfig) -> Result<Vec<CheckReport>> {
    let mut lse = CheckReport::new("bellman_lse_vs_numeric_max", 1e-9);
    let mut fixed = CheckReport::new("bellman_fixed_point", 1e-10);
    let mut form = CheckReport::new("bellman_analytic_policy", 1e-10);
    let mut constant = CheckReport::new("bellman_constant_shift", 1e-12);
    for seed in config.seeds() {
        let (inst, mut rng) = instance(&config.params, seed);
        let mdp = &inst.mdp;
        let beta = pick_beta(&mut rng);
        let reference = random_policy(mdp, inst.sigma, &mut rng);
        let v: Vec<f64> = mdp
            .states()
            .map(|s| if mdp.is_terminal(s) { 0.0 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let tv = bellman_optimal_apply(mdp, &reference, beta, &v)?;
        let mut worst: f64 = 0.0;
        for s in mdp.nonterminal_states() {
            let q: Vec<f64> = (0..mdp.num_actions(s))
                .map(|a| mdp.step_reward(s, ActionId(a)) + v[mdp.next(s, ActionId(a)).0])
                .collect();
            worst = worst.max((numeric_soft_max(&q, reference.probs(s), beta) - tv[s.0]).abs());
        }
        lse.record(seed, worst);

        // With every successor value equal to c, T_β v = c + β log E_ref[e^{r/β}].
        let c = rng.random_range(-1.0..1.0);
        let vc: Vec<f64> = mdp.states().map(|s| if mdp.is_terminal(s) { 0.0 } else { c }).collect();
        let tvc = bellman_optimal_apply(mdp, &reference, beta, &vc)?;
        let mut worst: f64 = 0.0;
        for s in mdp.nonterminal_states() {
            let expect: f64 = reference
                .probs(s)
                .iter()
                .enumerate()
                .map(|(a, p)| {
                    let next = mdp.next(s, ActionId(a));
                    p * ((mdp.step_reward(s, ActionId(a)) + vc[next.0]) / beta).exp()
                })
                .sum::<f64>()
                .ln()
                * beta;
            worst = worst.max((tvc[s.0] - expect).abs());
        }
        constant.record(seed, worst);

        let opt = solve_optimal(mdp, &reference, beta)?;
        let again = bellman_optimal_apply(mdp, &reference, beta, &opt.v_star)?;
        let r = again
            .iter()
            .zip(&opt.v_star)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        fixed.record(seed, r);

        let achieved = evaluate(mdp, &opt.pi_star, &reference, beta)?;
        let mut worst: f64 = 0.0;
        for s in mdp.nonterminal_states() {
            for (a, &p) in opt.pi_star.probs(s).iter().enumerate() {
                let expect = reference.probs(s)[a] * ((opt.q_star[s.0][a] - opt.v_star[s.0]) / beta).exp();
                worst = worst.max((p - expect).abs());
            }
            worst = worst.max((achieved.v(s) - opt.v_star[s.0]).abs());
        }
        form.record(seed, worst);
    }

    let mut closed = CheckReport::new("bellman_t2_closed_form", 1e-9);
    let mdp = t2();
    let u = TabularPolicy::uniform(&mdp);
    let opt = solve_optimal(&mdp, &u, 1.0)?;
    let s1 = mdp.state_by_name("s1")?;
    let expect = ((1.0f64.exp() + 1.0) / 2.0).ln();
    closed.record(0, (opt.v_star[s1.0] - expect).abs());
    closed.observe("v_star_s1", opt.v_star[s1.0]);
    Ok(vec![lse, constant, fixed, form, closed])
}

/// Dataset holding every action of `s` with weight ν(a) and Â = A^{π_ref}(s,a).
fn state_dataset(
    mdp: &StepMdp,
    ref_values: &ValueTable,
    states: &[StateId],
    nu: &TabularPolicy,
    beta: f64,
) -> AdvantageDataset {
    let share = 1.0 / states.len() as f64;
    let records = states
        .iter()
        .flat_map(|&s| {
            (0..mdp.num_actions(s)).map(move |a| AdvantageRecord {
                state: s,
                action: ActionId(a),
                a_hat: ref_values.adv(s, ActionId(a)),
                source: AdvantageSource::Exact,
                weight: share * nu.probs(s)[a],
            })
        })
        .collect();
    AdvantageDataset {
        beta,
        records,
        gaps: BTreeMap::new(),
        dropped: Vec::new(),
        sampled: BTreeMap::new(),
    }
}

fn with_row(mdp: &StepMdp, p: &TabularPolicy, s: StateId, row: Vec<f64>) -> Result<TabularPolicy> {
    let mut logits = p.logits().to_vec();
    logits[s.0] = row;
    TabularPolicy::from_logits(mdp, logits)
}

/// Largest relative deviation between −β∇H_s^k and the finite-difference
/// gradient of I_s(π_θ, π_ref) at θ_k, over all nonterminal states.
fn gradient_lemma_residual(mdp: &StepMdp, theta_k: &TabularPolicy, reference: &TabularPolicy, beta: f64) -> Result<f64> {
    let ref_values = evaluate(mdp, reference, reference, 0.0)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for s in mdp.nonterminal_states() {
        let ds = state_dataset(mdp, &ref_values, &[s], theta_k, beta);
        let grad_h = dapo_gradient(mdp, &ds, theta_k, reference)?;
        let analytic: Vec<f64> = grad_h[s.0].iter().map(|g| -beta * g).collect();
        let mut fd = Vec::with_capacity(analytic.len());
        for a in 0..analytic.len() {
            let mut plus = theta_k.logits()[s.0].clone();
            plus[a] += h;
            let mut minus = theta_k.logits()[s.0].clone();
            minus[a] -= h;
            let ip = one_step_improvement_with(mdp, &ref_values, &with_row(mdp, theta_k, s, plus)?, reference, beta, s)?;
            let im = one_step_improvement_with(mdp, &ref_values, &with_row(mdp, theta_k, s, minus)?, reference, beta, s)?;
            fd.push((ip - im) / (2.0 * h));
        }
        let scale = analytic.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-8);
        let err = analytic
            .iter()
            .zip(&fd)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err / scale);
    }
    Ok(worst)
}

/// ∇_θ I_s(π_θ, π_ref)|_{θ_k} = −β ∇_θ H_s^k(θ)|_{θ_k} with ν = π_{θ_k}.
pub fn check_gradient_lemma(config: &CheckConfig) -> Result<Vec<CheckReport>> {
    let mut main = CheckReport::new("gradient_lemma", 1e-4);
    let mut scaled = CheckReport::new("gradient_lemma_beta_doubled", 1e-4);
    let mut zero = CheckReport::new("gradient_lemma_zero_advantage", 1e-9);
    let constant = RandomMdpParams { reward_prob: (1.0, 1.0), ..config.params.clone() };
    for seed in config.seeds() {
        let (inst, mut rng) = instance(&config.params, seed);
        let mdp = &inst.mdp;
        let beta = pick_beta(&mut rng);
        let reference = random_policy(mdp, inst.sigma, &mut rng);
        let theta_k = random_policy(mdp, inst.sigma, &mut rng);
        main.record(seed, gradient_lemma_residual(mdp, &theta_k, &reference, beta)?);
        scaled.record(seed, gradient_lemma_residual(mdp, &theta_k, &reference, 2.0 * beta)?);

        let (inst, mut rng) = instance(&constant, seed);
        let mdp = &inst.mdp;
        let reference = random_policy(mdp, inst.sigma, &mut rng);
        let ref_values = evaluate(mdp, &reference, &reference, 0.0)?;
        let states: Vec<StateId> = mdp.nonterminal_states().collect();
        let ds = state_dataset(mdp, &ref_values, &states, &reference, beta);
        let g = dapo_gradient(mdp, &ds, &reference, &reference)?;
        zero.record(seed, g.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max));
    }
    Ok(vec![main, scaled, zero])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NuChoice {
    Uniform,
    Reference,
    Random,
}

impl NuChoice {
    fn name(self) -> &'static str {
        match self {
            NuChoice::Uniform => "uniform",
            NuChoice::Reference => "reference",
            NuChoice::Random => "random",
        }
    }
}

struct Improvement {
    solution: DapoSolution,
    ref_values: ValueTable,
    /// V_β^{π⁺}(μ) − V^{π_ref}(μ).
    improvement: f64,
    occupancy: Vec<f64>,
}

fn exact_improvement(mdp: &StepMdp, reference: &TabularPolicy, nu: &TabularPolicy, beta: f64) -> Result<Improvement> {
    let ref_values = evaluate(mdp, reference, reference, 0.0)?;
    let states: Vec<StateId> = mdp.nonterminal_states().collect();
    let ds = state_dataset(mdp, &ref_values, &states, nu, beta);
    let solution = solve_exact_policy(mdp, &ds, reference)?;
    let plus_values = evaluate(mdp, &solution.pi_plus, reference, beta)?;
    let improvement = plus_values.expected(mdp.mu()) - ref_values.expected(mdp.mu());
    let occupancy = occupancy(mdp, &solution.pi_plus, mdp.mu())?;
    Ok(Improvement {
        solution,
        ref_values,
        improvement,
        occupancy,
    })
}

fn reachable_tv(mdp: &StepMdp, a: &TabularPolicy, b: &TabularPolicy) -> f64 {
    mdp.reachable()
        .into_iter()
        .filter(|&s| !mdp.is_terminal(s))
        .map(|s| a.total_variation(b, s))
        .fold(0.0, f64::max)
}

/// Exact DAPO improves the regularized value, with the per-state chain
/// I_s(π⁺) = βλ* E_ν[(π⁺/ν)²] ≥ βλ* ≥ 0 and the equality case at π_β^*.
pub fn check_monotonic_improvement(config: &CheckConfig) -> Result<Vec<CheckReport>> {
    let mut value = CheckReport::new("monotone_value", 1e-8);
    let mut bound = CheckReport::new("monotone_lambda_bound", 1e-8);
    let mut chain = CheckReport::new("chain_improvement_ge_lambda", 1e-8);
    let mut identity = CheckReport::new("chain_improvement_identity", 1e-8);
    let mut nonneg = CheckReport::new("chain_lambda_nonnegative", 1e-8);
    let mut kkt = CheckReport::new("kkt_residuals", 1e-9);
    let mut cauchy = CheckReport::new("cauchy_schwarz_ratio", 1e-12);
    let mut kl = CheckReport::new("lambda_equals_kl_for_nu_ref", 1e-8);
    let mut corollary = CheckReport::new("unregularized_corollary", 1e-9);
    let mut strict = CheckReport::new("strict_improvement", 0.0);
    let mut equality = CheckReport::new("equality_case", 1e-8);

    let mut lambda_sums: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
    let mut min_strict = f64::INFINITY;
    let constant = [
        RandomMdpParams { reward_prob: (0.0, 0.0), ..config.params.clone() },
        RandomMdpParams { reward_prob: (1.0, 1.0), ..config.params.clone() },
    ];

    for (i, seed) in config.seeds().enumerate() {
        let (inst, mut rng) = instance(&config.params, seed);
        let mdp = &inst.mdp;
        let beta = pick_beta(&mut rng);
        let reference = random_policy(mdp, inst.sigma, &mut rng);
        let choice = [NuChoice::Uniform, NuChoice::Reference, NuChoice::Random][i % 3];
        let nu = match choice {
            NuChoice::Uniform => TabularPolicy::uniform(mdp),
            NuChoice::Reference => reference.clone(),
            NuChoice::Random => random_policy(mdp, 1.0, &mut rng),
        };
        let out = exact_improvement(mdp, &reference, &nu, beta)?;
        let sol = &out.solution;

        value.record(seed, (-out.improvement).max(0.0));
        let expected_lambda: f64 = sol
            .per_state
            .keys()
            .map(|&s| out.occupancy[s.0] * sol.lambda_s(s).unwrap_or(0.0))
            .sum();
        bound.record(seed, (expected_lambda - out.improvement).max(0.0));

        let (mut c, mut id, mut nn, mut cs, mut klr) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let entry = lambda_sums.entry(choice.name()).or_insert((0.0, 0));
        for (&s, k) in &sol.per_state {
            let lambda_s = beta * k.lambda;
            entry.0 += lambda_s;
            entry.1 += 1;
            let i_s = one_step_improvement_with(mdp, &out.ref_values, &sol.pi_plus, &reference, beta, s)?;
            let ratio: f64 = k.pi_plus.iter().zip(nu.probs(s)).map(|(p, n)| p * p / n).sum();
            c = c.max(lambda_s - i_s);
            id = id.max((i_s - lambda_s * ratio).abs());
            nn = nn.max(-lambda_s);
            cs = cs.max(1.0 - ratio);
            if choice == NuChoice::Reference {
                klr = klr.max((lambda_s - beta * reference.kl(&sol.pi_plus, s)).abs());
            }
        }
        chain.record(seed, c.max(0.0));
        identity.record(seed, id);
        nonneg.record(seed, nn.max(0.0));
        cauchy.record(seed, cs.max(0.0));
        let (n_res, s_res) = sol.max_residuals();
        kkt.record(seed, n_res.max(s_res));
        if choice == NuChoice::Reference {
            kl.record(seed, klr);
        }

        let plus_unreg = evaluate(mdp, &sol.pi_plus, &reference, 0.0)?.expected(mdp.mu());
        corollary.record(seed, (out.ref_values.expected(mdp.mu()) - plus_unreg).max(0.0));

        let star = solve_optimal(mdp, &reference, beta)?;
        if reachable_tv(mdp, &star.pi_star, &reference) > 1e-6 {
            strict.record(seed, if out.improvement > 0.0 { 0.0 } else { 1.0 });
            min_strict = min_strict.min(out.improvement);
        }

        // Equality case: binary rewards make π_ref = π_β^* exactly when every
        // reachable leaf pays the same reward.
        let (inst, mut rng) = instance(&constant[i % 2], seed);
        let mdp = &inst.mdp;
        let reference = random_policy(mdp, inst.sigma, &mut rng);
        let star = solve_optimal(mdp, &reference, beta)?;
        let certificate = reachable_tv(mdp, &star.pi_star, &reference);
        let out = exact_improvement(mdp, &reference, &nu_for(mdp, choice, &reference, &mut rng), beta)?;
        let max_lambda = out
            .solution
            .per_state
            .keys()
            .map(|&s| out.solution.lambda_s(s).unwrap_or(0.0).abs())
            .fold(0.0, f64::max);
        equality.record(seed, out.improvement.abs().max(max_lambda).max(certificate));
    }

    for (name, (sum, n)) in lambda_sums {
        if n > 0 {
            bound.observe(&format!("mean_lambda_nu_{name}"), sum / n as f64);
        }
    }
    if min_strict.is_finite() {
        strict.observe("min_strict_improvement", min_strict);
    }
    Ok(vec![value, bound, chain, identity, nonneg, kkt, cauchy, kl, corollary, strict, equality])
}

fn nu_for(mdp: &StepMdp, choice: NuChoice, reference: &TabularPolicy, rng: &mut ChaCha8Rng) -> TabularPolicy {
    match choice {
        NuChoice::Uniform => TabularPolicy::uniform(mdp),
        NuChoice::Reference => reference.clone(),
        NuChoice::Random => random_policy(mdp, 1.0, rng),
    }
}

/// Σ_a π_ref(a|s)·exp(A^{π_ref}(s,a)/β) − 1, computed with expm1.
fn exp_advantage_margin(probs: &[f64], adv: &[f64], beta: f64) -> f64 {
    probs.iter().zip(adv).map(|(p, a)| p * (a / beta).exp_m1()).sum()
}

/// π_ref·exp(A/β) is not normalized: its mass is at least one, strictly so
/// for nonconstant advantages, and grows as β shrinks.
pub fn check_invalid_policy_note(config: &CheckConfig) -> Result<Vec<CheckReport>> {
    let mut ge = CheckReport::new("jensen_mass_ge_one", 1e-12);
    let mut strict = CheckReport::new("jensen_strict", 0.0);
    let mut sweep = CheckReport::new("jensen_margin_grows_as_beta_shrinks", 1e-12);
    let mut min_margin = f64::INFINITY;
    for seed in config.seeds() {
        let (inst, mut rng) = instance(&config.params, seed);
        let mdp = &inst.mdp;
        let reference = random_policy(mdp, inst.sigma, &mut rng);
        let values = evaluate(mdp, &reference, &reference, 0.0)?;
        let (mut low, mut st, mut sw) = (0.0f64, 0.0f64, 0.0f64);
        for s in mdp.nonterminal_states() {
            let adv = values.adv_row(s);
            let spread = adv.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - adv.iter().copied().fold(f64::INFINITY, f64::min);
            let margins: Vec<f64> = BETAS
                .iter()
                .rev()
                .map(|&b| exp_advantage_margin(reference.probs(s), adv, b))
                .collect();
            for &m in &margins {
                low = low.max(-m);
            }
            for w in margins.windows(2) {
                sw = sw.max(w[0] - w[1]);
            }
            if spread > 1e-6 {
                let m = margins.iter().copied().fold(f64::INFINITY, f64::min);
                if m <= 0.0 {
                    st = 1.0;
                }
                min_margin = min_margin.min(m);
            }
        }
        ge.record(seed, low.max(0.0));
        strict.record(seed, st);
        sweep.record(seed, sw.max(0.0));
    }
    if min_margin.is_finite() {
        strict.observe("min_strict_margin", min_margin);
    }

    let mut example = CheckReport::new("jensen_t2_s1", 1e-6);
    let mdp = t2();
    let u = TabularPolicy::uniform(&mdp);
    let values = evaluate(&mdp, &u, &u, 0.0)?;
    let s1 = mdp.state_by_name("s1")?;
    let mass = 1.0 + exp_advantage_margin(u.probs(s1), values.adv_row(s1), 1.0);
    example.record(0, (mass - 1.127626).abs());
    example.observe("mass", mass);
    Ok(vec![ge, strict, sweep, example])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    All,
    Pdl,
    Bellman,
    Gradient,
    Monotone,
    Jensen,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Suite::All,
            "pdl" => Suite::Pdl,
            "bellman" => Suite::Bellman,
            "gradient" => Suite::Gradient,
            "monotone" => Suite::Monotone,
            "jensen" => Suite::Jensen,
            other => return Err(Error::Config(format!("unknown suite `{other}`"))),
        })
    }
}

pub fn run_suite(suite: Suite, config: &CheckConfig) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::All | Suite::Pdl) {
        out.extend(check_pdl(config)?);
    }
    if matches!(suite, Suite::All | Suite::Bellman) {
        out.extend(check_bellman_optimality(config)?);
    }
    if matches!(suite, Suite::All | Suite::Gradient) {
        out.extend(check_gradient_lemma(config)?);
    }
    if matches!(suite, Suite::All | Suite::Monotone) {
        out.extend(check_monotonic_improvement(config)?);
    }
    if matches!(suite, Suite::All | Suite::Jensen) {
        out.extend(check_invalid_policy_note(config)?);
    }
    Ok(out)
}

pub fn write_reports_csv<W: Write>(reports: &[CheckReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["check_name", "instances", "max_residual", "tolerance", "passed", "failures"])?;
    for r in reports {
        let failures: Vec<String> = r.failures.iter().map(|(s, x)| format!("{s}:{x:e}")).collect();
        out.write_record([
            r.check_name.clone(),
            r.instances.to_string(),
            format!("{:e}", r.max_residual),
            format!("{:e}", r.tolerance),
            r.passed.to_string(),
            failures.join(";"),
        ])?;
    }
    out.flush()?;
    Ok(())
}
