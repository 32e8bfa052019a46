//! Named invariant checks against the enumeration oracles.
//!
//! Each check reports pass, fail or skipped-with-reason along with the
//! measured value and its tolerance. The fast scope shrinks sample counts;
//! the full scope uses the acceptance sizes.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{
    elbo_grads, jepo_grad_single, ControlVariate, Estimator, GradientEstimator, SampleBatch,
};
use crate::numerics::{derive_rng, log_sum_exp, max_abs_diff, mean, relative_error, std_error};
use crate::oracle::{
    compare_variance, conditional_expected_gradient, elbo_exact, expected_gradient, finite_difference,
    jensen_bound_exact, kl_divergence, marginal_loglik, multi_sample_bound, posterior_exact, prior_exact,
    BoundMode, EnumerationBudget, VarianceConfig,
};
use crate::policy::{
    sequence_kl, sequence_kl_enumerated, sequence_kl_sampled, PolicyParams, PolicyShape, ReferencePolicy, Token,
};
use crate::tasks::MatchFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    Fast,
    Full,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Scope::Fast),
            "full" => Ok(Scope::Full),
            other => Err(Error::InvalidConfig(format!("unknown scope {other:?}, expected fast or full"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub status: Status,
    /// Worst measured value over the check's instances.
    pub measured: Option<f64>,
    pub tolerance: Option<f64>,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub scope: Scope,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| c.status == Status::Fail)
            .map(|c| c.name.as_str())
            .collect()
    }
}

/// Sample counts per check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuiteSizes {
    pub bound_instances: usize,
    pub mc_instances: usize,
    pub mc_trials: usize,
    pub gradient_seeds: usize,
    pub lemma1_samples: usize,
    pub lemma3_seeds: usize,
    pub lemma3_tuples: usize,
    pub variance_seeds: usize,
    pub variance_trials: usize,
    pub sft_instances: usize,
    pub sampling_draws: usize,
}

impl SuiteSizes {
    pub fn for_scope(scope: Scope) -> Self {
        match scope {
            Scope::Fast => Self {
                bound_instances: 10,
                mc_instances: 3,
                mc_trials: 2_000,
                gradient_seeds: 3,
                lemma1_samples: 200,
                lemma3_seeds: 3,
                lemma3_tuples: 4,
                variance_seeds: 2,
                variance_trials: 1_000,
                sft_instances: 200,
                sampling_draws: 20_000,
            },
            Scope::Full => Self {
                bound_instances: 50,
                mc_instances: 50,
                mc_trials: 10_000,
                gradient_seeds: 20,
                lemma1_samples: 1_000,
                lemma3_seeds: 20,
                lemma3_tuples: 10,
                variance_seeds: 20,
                variance_trials: 10_000,
                sft_instances: 1_000,
                sampling_draws: 100_000,
            },
        }
    }
}

pub const TOL_IDENTITY: f64 = 1e-10;
pub const TOL_FD: f64 = 1e-4;
pub const TOL_KL_FD: f64 = 1e-3;
pub const TOL_LEMMA1: f64 = 1e-12;
pub const FD_STEP: f64 = 1e-5;

/// Oracle instance: small random policy (40 CoTs) with a random target answer.
pub fn small_instance(seed: u64) -> (PolicyParams, Vec<Token>) {
    let shape = PolicyShape::new(3, 2, 3, 2, 1).expect("valid shape");
    random_instance(shape, seed, 1.0)
}

/// Instance small enough to enumerate whole generations in tuples.
pub fn tiny_instance(seed: u64) -> (PolicyParams, Vec<Token>) {
    let shape = PolicyShape::new(2, 1, 2, 1, 1).expect("valid shape");
    random_instance(shape, seed, 1.0)
}

/// Instance with the default policy sizes (341 CoTs, 85 answers).
pub fn default_instance(seed: u64) -> (PolicyParams, Vec<Token>) {
    let shape = PolicyShape::new(4, 2, 4, 3, 1).expect("valid shape");
    random_instance(shape, seed, 1.0)
}

pub fn random_instance(shape: PolicyShape, seed: u64, scale: f64) -> (PolicyParams, Vec<Token>) {
    let mut rng = derive_rng(seed, &[0x696e_7374]);
    let params = PolicyParams::random(shape, scale, &mut rng);
    let answers = shape.answer_space();
    let a = answers[rng.random_range(0..answers.len())].clone();
    (params, a)
}

/// Outcome of one check body: worst value, tolerance, detail.
pub struct Measured {
    pub worst: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub detail: String,
}

impl Measured {
    /// Pass when `worst <= tolerance`.
    pub fn at_most(worst: f64, tolerance: f64, detail: String) -> Self {
        Self {
            worst,
            tolerance,
            pass: worst <= tolerance,
            detail,
        }
    }
}

/// The check runner. The single-sample Jensen estimator is pluggable so that
/// a deliberately corrupted estimator can serve as a negative control.
pub struct Suite {
    pub sizes: SuiteSizes,
    pub seed: u64,
    pub jepo_single: Box<dyn GradientEstimator>,
    pub scope: Scope,
}

impl Suite {
    pub fn new(scope: Scope, seed: u64) -> Self {
        Self {
            sizes: SuiteSizes::for_scope(scope),
            seed,
            jepo_single: Box::new(Estimator::JepoSingle(ControlVariate::LeaveOneOut)),
            scope,
        }
    }

    pub fn with_jepo_single(mut self, estimator: Box<dyn GradientEstimator>) -> Self {
        self.jepo_single = estimator;
        self
    }

    fn s(&self, i: usize) -> u64 {
        crate::numerics::derive_seed(self.seed, &[i as u64])
    }

    pub fn names() -> &'static [&'static str] {
        &[
            "policy.normalization",
            "policy.score_zero_mean",
            "policy.gradient_finite_difference",
            "policy.sampling_frequencies",
            "policy.sequence_kl_routes",
            "oracle.bound_sandwich_exact",
            "oracle.bound_sandwich_monte_carlo",
            "oracle.gap_identity",
            "oracle.elbo_posterior_tight",
            "estimators.jepo_single_gradient",
            "estimators.jepo_multi_gradient",
            "estimators.control_variate_unbiased",
            "estimators.lemma1_elbo_equivalence",
            "estimators.lemma3_conditional_expectation",
            "estimators.kl_gradient",
            "estimators.sft_reduction",
            "oracle.variance_reduction",
            "oracle.control_variate_variance",
        ]
    }

    pub fn run_check(&self, name: &str) -> CheckResult {
        let start = Instant::now();
        let out = match name {
            "policy.normalization" => self.normalization(),
            "policy.score_zero_mean" => self.score_zero_mean(),
            "policy.gradient_finite_difference" => self.gradient_fd(),
            "policy.sampling_frequencies" => self.sampling_frequencies(),
            "policy.sequence_kl_routes" => self.kl_routes(),
            "oracle.bound_sandwich_exact" => self.sandwich_exact(),
            "oracle.bound_sandwich_monte_carlo" => self.sandwich_mc(),
            "oracle.gap_identity" => self.gap_identity(),
            "oracle.elbo_posterior_tight" => self.elbo_tight(),
            "estimators.jepo_single_gradient" => self.jepo_single_gradient(),
            "estimators.jepo_multi_gradient" => self.jepo_multi_gradient(),
            "estimators.control_variate_unbiased" => self.unbiased(),
            "estimators.lemma1_elbo_equivalence" => self.lemma1(),
            "estimators.lemma3_conditional_expectation" => self.lemma3(),
            "estimators.kl_gradient" => self.kl_gradient(),
            "estimators.sft_reduction" => self.sft_reduction(),
            "oracle.variance_reduction" => self.variance_reduction(),
            "oracle.control_variate_variance" => self.control_variate_variance(),
            other => Err(Error::InvalidConfig(format!("unknown check {other}"))),
        };
        let seconds = start.elapsed().as_secs_f64();
        let name = name.to_string();
        match out {
            Ok(m) => CheckResult {
                name,
                status: if m.pass { Status::Pass } else { Status::Fail },
                measured: Some(m.worst),
                tolerance: Some(m.tolerance),
                detail: m.detail,
                seconds,
            },
            Err(e @ Error::BudgetExceeded { .. }) => CheckResult {
                name,
                status: Status::Skipped,
                measured: None,
                tolerance: None,
                detail: e.to_string(),
                seconds,
            },
            Err(e) => CheckResult {
                name,
                status: Status::Fail,
                measured: None,
                tolerance: None,
                detail: format!("error: {e}"),
                seconds,
            },
        }
    }

    pub fn run(&self) -> VerifyReport {
        let checks: Vec<CheckResult> = Self::names().iter().map(|n| self.run_check(n)).collect();
        VerifyReport {
            scope: self.scope,
            seed: self.seed,
            passed: checks.iter().all(|c| c.status != Status::Fail),
            checks,
        }
    }

    fn normalization(&self) -> Result<Measured> {
        let mut worst: f64 = 0.0;
        for i in 0..self.sizes.gradient_seeds {
            let (p, _) = small_instance(self.s(i));
            let shape = *p.shape();
            let cots = shape.cot_space();
            let lps: Vec<f64> = cots.iter().map(|c| p.logprob_cot(0, c)).collect::<Result<_>>()?;
            worst = worst.max((log_sum_exp(&lps).exp() - 1.0).abs());
            for c in cots.iter().step_by(3) {
                let las: Vec<f64> = shape
                    .answer_space()
                    .iter()
                    .map(|a| p.logprob_answer(0, c, a))
                    .collect::<Result<_>>()?;
                worst = worst.max((log_sum_exp(&las).exp() - 1.0).abs());
            }
        }
        Ok(Measured::at_most(worst, TOL_IDENTITY, "max |sum of continuation probabilities - 1|".into()))
    }

    fn score_zero_mean(&self) -> Result<Measured> {
        let mut worst: f64 = 0.0;
        for i in 0..self.sizes.gradient_seeds {
            let (p, _) = small_instance(self.s(i));
            let mut acc = vec![0.0; p.num_params()];
            for c in p.shape().cot_space() {
                let w = p.logprob_cot(0, &c)?.exp();
                p.accumulate_grad_cot(0, &c, w, &mut acc)?;
            }
            worst = worst.max(acc.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        }
        Ok(Measured::at_most(worst, TOL_IDENTITY, "max |E[grad log pi(c|x)]|".into()))
    }

    fn gradient_fd(&self) -> Result<Measured> {
        let mut worst: f64 = 0.0;
        for i in 0..self.sizes.gradient_seeds {
            let (p, a) = small_instance(self.s(i));
            let mut rng = derive_rng(self.s(i), &[1]);
            let g = p.sample_generation(0, &mut rng)?;
            let analytic_c = p.grad_logprob(0, &g.cot, None)?;
            let fd_c = finite_difference(&p, FD_STEP, |q| q.logprob_cot(0, &g.cot))?;
            let analytic_a = p.grad_logprob(0, &g.cot, Some(&a))?;
            let fd_a = finite_difference(&p, FD_STEP, |q| q.logprob_answer(0, &g.cot, &a))?;
            worst = worst.max(relative_error(&analytic_c, &fd_c)).max(relative_error(&analytic_a, &fd_a));
        }
        Ok(Measured::at_most(worst, TOL_FD, "relative error of analytic vs central differences".into()))
    }

    fn sampling_frequencies(&self) -> Result<Measured> {
        // Small CoT space so that a 3-standard-error band is meaningful per sequence.
        let shape = PolicyShape::new(2, 1, 2, 1, 1)?;
        let (p, _) = random_instance(shape, self.s(0), 1.0);
        let cots = shape.cot_space();
        let mut counts = vec![0usize; cots.len()];
        let mut rng = derive_rng(self.s(0), &[2]);
        let draws = self.sizes.sampling_draws;
        for _ in 0..draws {
            let (c, _, _) = p.sample_cot(0, &mut rng)?;
            counts[cots.iter().position(|x| *x == c).expect("sampled CoT in space")] += 1;
        }
        let mut worst: f64 = 0.0;
        for (c, k) in cots.iter().zip(counts) {
            let prob = p.logprob_cot(0, c)?.exp();
            let se = (prob * (1.0 - prob) / draws as f64).sqrt();
            let freq = k as f64 / draws as f64;
            if se > 0.0 {
                worst = worst.max((freq - prob).abs() / se);
            }
        }
        Ok(Measured::at_most(worst, 3.0, format!("max |freq - prob| in standard errors over {draws} draws")))
    }

    fn kl_routes(&self) -> Result<Measured> {
        let mut worst: f64 = 0.0;
        for i in 0..self.sizes.gradient_seeds.min(5) {
            let (p, _) = small_instance(self.s(i));
            let (q, _) = small_instance(self.s(i + 1000));
            let r = ReferencePolicy::new(q);
            let dp = sequence_kl(&p, &r, 0)?;
            let en = sequence_kl_enumerated(&p, &r, 0, 100_000)?;
            worst = worst.max((dp - en).abs() / TOL_IDENTITY);
            let mut rng = derive_rng(self.s(i), &[3]);
            let (m, se) = sequence_kl_sampled(&p, &r, 0, 4000, &mut rng)?;
            worst = worst.max((m - en).abs() / (3.0 * se));
        }
        Ok(Measured::at_most(
            worst,
            1.0,
            "max of |dp - enum| / 1e-10 and |sampled - enum| / 3se".into(),
        ))
    }

    fn sandwich_exact(&self) -> Result<Measured> {
        let b = EnumerationBudget::default();
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.sizes.bound_instances {
            let (p, a) = small_instance(self.s(i));
            let j = jensen_bound_exact(&p, 0, &a, &b)?.value();
            let l2 = multi_sample_bound(&p, 0, &a, 2, BoundMode::Exact, &b)?.value.value();
            let l3 = multi_sample_bound(&p, 0, &a, 3, BoundMode::Exact, &b)?.value.value();
            let m = marginal_loglik(&p, 0, &a, &b)?;
            for v in [j - l2, l2 - l3, l3 - m] {
                worst = worst.max(v);
            }
        }
        Ok(Measured::at_most(
            worst,
            TOL_IDENTITY,
            format!("max violation of jensen <= L2 <= L3 <= marginal over {} instances", self.sizes.bound_instances),
        ))
    }

    fn sandwich_mc(&self) -> Result<Measured> {
        let b = EnumerationBudget::default();
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.sizes.mc_instances {
            let (p, a) = small_instance(self.s(i));
            let mut prev: Option<(f64, f64)> = None;
            for (k, n) in [1usize, 2, 4, 8].into_iter().enumerate() {
                let est = multi_sample_bound(
                    &p,
                    0,
                    &a,
                    n,
                    BoundMode::MonteCarlo {
                        trials: self.sizes.mc_trials,
                        seed: self.s(i) ^ (k as u64 + 1),
                    },
                    &b,
                )?;
                let (v, se) = (est.value.value(), est.std_error);
                if let Some((pv, pse)) = prev {
                    let band = 3.0 * (se * se + pse * pse).sqrt();
                    worst = worst.max((pv - v) / band.max(1e-300));
                }
                prev = Some((v, se));
            }
            let m = marginal_loglik(&p, 0, &a, &b)?;
            let (v, se) = prev.expect("four estimates");
            worst = worst.max((v - m) / (3.0 * se).max(1e-300));
        }
        Ok(Measured::at_most(
            worst,
            1.0,
            format!(
                "max monotonicity violation in units of 3 standard errors, n in 1,2,4,8, {} trials",
                self.sizes.mc_trials
            ),
        ))
    }

    fn gap_identity(&self) -> Result<Measured> {
        let b = EnumerationBudget::default();
        let mut worst: f64 = 0.0;
        for i in 0..self.sizes.bound_instances {
            let (p, a) = small_instance(self.s(i));
            let gap = marginal_loglik(&p, 0, &a, &b)? - jensen_bound_exact(&p, 0, &a, &b)?.value();
            let kl = kl_divergence(&prior_exact(&p, 0, &b)?, &posterior_exact(&p, 0, &a, &b)?);
            worst = worst.max((gap - kl).abs());
        }
        Ok(Measured::at_most(worst, TOL_IDENTITY, "max |marginal - jensen - KL(prior, posterior)|".into()))
    }

    fn elbo_tight(&self) -> Result<Measured> {
        let b = EnumerationBudget::default();
        let mut worst: f64 = 0.0;
        for i in 0..self.sizes.gradient_seeds {
            let (p, a) = small_instance(self.s(i));
            let post = posterior_exact(&p, 0, &a, &b)?;
            let e = elbo_exact(&p, &post, 0, &a, &b)?.value();
            worst = worst.max((e - marginal_loglik(&p, 0, &a, &b)?).abs());
        }
        Ok(Measured::at_most(worst, TOL_IDENTITY, "max |ELBO(posterior) - marginal|".into()))
    }

    fn jepo_single_gradient(&self) -> Result<Measured> {
        let b = EnumerationBudget::default();
        let mut worst: f64 = 0.0;
        for i in 0..self.sizes.gradient_seeds {
            let (p, a) = small_instance(self.s(i));
            let n = 1 + i % 2;
            let g = expected_gradient(self.jepo_single.as_ref(), &p, 0, &a, n, &b)?;
            let fd = finite_difference(&p, FD_STEP, |q| Ok(jensen_bound_exact(q, 0, &a, &b)?.value()))?;
            worst = worst.max(relative_error(g.total(), &fd));
        }
        Ok(Measured::at_most(
            worst,
            TOL_FD,
            format!("{}: E[estimate] vs finite differences of the Jensen bound", self.jepo_single.name()),
        ))
    }

    fn jepo_multi_gradient(&self) -> Result<Measured> {
        let b = EnumerationBudget::default();
        let mut worst: f64 = 0.0;
        let est = Estimator::JepoMulti(ControlVariate::LeaveOneOut);
        for i in 0..self.sizes.gradient_seeds {
            let (p, a) = small_instance(self.s(i));
            let g = expected_gradient(&est, &p, 0, &a, 2, &b)?;
            let fd = finite_difference(&p, FD_STEP, |q| {
                Ok(multi_sample_bound(q, 0, &a, 2, BoundMode::Exact, &b)?.value.value())
            })?;
            worst = worst.max(relative_error(g.total(), &fd));
        }
        Ok(Measured::at_most(worst, TOL_FD, "E[multi-sample estimate] vs finite differences of L2".into()))
    }

    fn unbiased(&self) -> Result<Measured> {
        let b = EnumerationBudget::default();
        let exact = MatchFunction::exact();
        let mut worst: f64 = 0.0;
        let seeds = self.sizes.gradient_seeds.min(5);
        for i in 0..seeds {
            for n in [2usize, 3] {
                let (p, a) = small_instance(self.s(i));
                for (with, without) in [
                    (
                        Estimator::JepoSingle(ControlVariate::LeaveOneOut),
                        Estimator::JepoSingle(ControlVariate::None),
                    ),
                    (
                        Estimator::JepoMulti(ControlVariate::LeaveOneOut),
                        Estimator::JepoMulti(ControlVariate::None),
                    ),
                    (
                        Estimator::VarReducedPg(ControlVariate::LeaveOneOut),
                        Estimator::VarReducedPg(ControlVariate::None),
                    ),
                ] {
                    let g1 = expected_gradient(&with, &p, 0, &a, n, &b)?;
                    let g0 = expected_gradient(&without, &p, 0, &a, n, &b)?;
                    worst = worst.max(max_abs_diff(g1.total(), g0.total()));
                }
                let (p, a) = tiny_instance(self.s(i));
                let g1 = expected_gradient(
                    &Estimator::VanillaPg {
                        matcher: &exact,
                        cv: ControlVariate::LeaveOneOut,
                    },
                    &p,
                    0,
                    &a,
                    n,
                    &b,
                )?;
                let g0 = expected_gradient(
                    &Estimator::VanillaPg {
                        matcher: &exact,
                        cv: ControlVariate::None,
                    },
                    &p,
                    0,
                    &a,
                    n,
                    &b,
                )?;
                worst = worst.max(max_abs_diff(g1.total(), g0.total()));
            }
        }
        Ok(Measured::at_most(
            worst,
            TOL_IDENTITY,
            "max |E[with leave-one-out] - E[without]| over four estimators, n = 2, 3".into(),
        ))
    }

    fn lemma1(&self) -> Result<Measured> {
        let mut worst: f64 = 0.0;
        let per_seed = self.sizes.lemma1_samples.div_ceil(10);
        let mut done = 0;
        for i in 0..10 {
            let (p, a) = small_instance(self.s(i));
            let mut rng = derive_rng(self.s(i), &[4]);
            for _ in 0..per_seed {
                if done == self.sizes.lemma1_samples {
                    break;
                }
                done += 1;
                let g = p.sample_generation(0, &mut rng)?;
                let batch = SampleBatch::new(&p, 0, a.clone(), vec![g])?;
                let (gt, gp) = elbo_grads(&p, &p, 0, &batch)?;
                let sum: Vec<f64> = gt.total().iter().zip(gp.total()).map(|(x, y)| x + y).collect();
                let reference = jepo_grad_single(&p, &batch, ControlVariate::None)?;
                worst = worst.max(max_abs_diff(&sum, reference.total()));
            }
        }
        Ok(Measured::at_most(
            worst,
            TOL_LEMMA1,
            format!("max |g_theta + g_phi - jensen gradient| over {done} samples"),
        ))
    }

    fn lemma3(&self) -> Result<Measured> {
        let b = EnumerationBudget::default();
        let exact = MatchFunction::exact();
        let vanilla = Estimator::VanillaPg {
            matcher: &exact,
            cv: ControlVariate::LeaveOneOut,
        };
        let mut worst: f64 = 0.0;
        for i in 0..self.sizes.lemma3_seeds {
            let (p, a) = small_instance(self.s(i));
            let mut rng = derive_rng(self.s(i), &[5]);
            for t in 0..self.sizes.lemma3_tuples {
                let n = 2 + t % 2;
                let cots = (0..n)
                    .map(|_| p.sample_cot(0, &mut rng).map(|(c, _, _)| c))
                    .collect::<Result<Vec<_>>>()?;
                let cond = conditional_expected_gradient(&vanilla, &p, 0, &a, &cots, &b)?;
                let gens = cots
                    .iter()
                    .map(|c| p.make_generation(0, c.clone(), vec![p.vocab().eoa()]))
                    .collect::<Result<Vec<_>>>()?;
                let batch = SampleBatch::new(&p, 0, a.clone(), gens)?;
                let reduced = crate::estimators::var_reduced_pg(&p, &batch, ControlVariate::LeaveOneOut)?;
                worst = worst.max(max_abs_diff(cond.total(), reduced.total()));
            }
        }
        Ok(Measured::at_most(worst, TOL_IDENTITY, "max |E_a[vanilla | CoTs] - variance-reduced|".into()))
    }

    fn kl_gradient(&self) -> Result<Measured> {
        let b = EnumerationBudget::default();
        let mut worst: f64 = 0.0;
        for i in 0..self.sizes.gradient_seeds.min(10) {
            let (p, _) = tiny_instance(self.s(i));
            let (q, a) = tiny_instance(self.s(i + 500));
            let r = ReferencePolicy::new(q);
            let g = expected_gradient(&Estimator::KlReg(&r), &p, 0, &a, 1, &b)?;
            let fd = finite_difference(&p, FD_STEP, |x| sequence_kl(x, &r, 0))?;
            worst = worst.max(relative_error(g.total(), &fd));
        }
        Ok(Measured::at_most(worst, TOL_KL_FD, "E[KL REINFORCE gradient] vs finite differences of KL".into()))
    }

    fn sft_reduction(&self) -> Result<Measured> {
        let mut mismatches = 0usize;
        let mut reinforce_nonzero = 0usize;
        for i in 0..self.sizes.sft_instances {
            let mut rng = derive_rng(self.s(i), &[6]);
            let shape = PolicyShape::new(
                rng.random_range(2..=5),
                rng.random_range(1..=3),
                0,
                rng.random_range(1..=3),
                rng.random_range(1..=3),
            )?;
            let p = PolicyParams::random(shape, 2.0, &mut rng);
            let x = rng.random_range(0..shape.num_prompts);
            let answers = shape.answer_space();
            let a = answers[rng.random_range(0..answers.len())].clone();
            let n = rng.random_range(1..=2);
            let gens = (0..n)
                .map(|_| p.sample_generation(x, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let batch = SampleBatch::new(&p, x, a.clone(), gens)?;
            let g = jepo_grad_single(&p, &batch, ControlVariate::LeaveOneOut)?;
            let sft = p.grad_logprob(x, &[shape.vocab.eoc()], Some(&a))?;
            if g.total().iter().zip(&sft).any(|(u, v)| u.to_bits() != v.to_bits()) {
                mismatches += 1;
            }
            let r = g.part(crate::estimators::Term::Reinforce).unwrap_or(&[]);
            if r.iter().any(|v| *v != 0.0) {
                reinforce_nonzero += 1;
            }
        }
        Ok(Measured {
            worst: (mismatches + reinforce_nonzero) as f64,
            tolerance: 0.0,
            pass: mismatches == 0 && reinforce_nonzero == 0,
            detail: format!(
                "{mismatches} bitwise mismatches and {reinforce_nonzero} nonzero reinforce terms over {} instances",
                self.sizes.sft_instances
            ),
        })
    }

    fn variance_reduction(&self) -> Result<Measured> {
        let exact = MatchFunction::exact();
        let vanilla = Estimator::VanillaPg {
            matcher: &exact,
            cv: ControlVariate::LeaveOneOut,
        };
        let reduced = Estimator::VarReducedPg(ControlVariate::LeaveOneOut);
        let mut worst = f64::INFINITY;
        let mut failures = 0;
        let mut ratios = Vec::new();
        let (mut worse_coords, mut coords) = (0usize, 0usize);
        for i in 0..self.sizes.variance_seeds {
            let (p, a) = default_instance(self.s(i));
            let cfg = VarianceConfig::new(self.sizes.variance_trials, self.s(i));
            let cmp = compare_variance(&vanilla, &reduced, &p, 0, &a, 4, &cfg)?;
            worst = worst.min(cmp.reduction_low);
            if !cmp.candidate_not_worse {
                failures += 1;
            }
            ratios.push(cmp.candidate.trace / cmp.baseline.trace.max(1e-300));
            worse_coords += cmp.coordinates_worse;
            coords += cmp.candidate.per_coordinate.len();
        }
        Ok(Measured {
            worst: -worst,
            tolerance: 0.0,
            pass: failures == 0,
            detail: format!(
                "{failures}/{} policies without a 99% bootstrap trace reduction; mean trace ratio reduced/vanilla {:.4} (se {:.4}); {worse_coords}/{coords} coordinates with larger point-estimate variance",
                self.sizes.variance_seeds,
                mean(&ratios),
                std_error(&ratios)
            ),
        })
    }

    fn control_variate_variance(&self) -> Result<Measured> {
        let with = Estimator::JepoSingle(ControlVariate::LeaveOneOut);
        let without = Estimator::JepoSingle(ControlVariate::None);
        let mut worst = f64::INFINITY;
        let mut failures = 0;
        let seeds = self.sizes.variance_seeds.min(5);
        for i in 0..seeds {
            let (p, a) = default_instance(self.s(i));
            let cfg = VarianceConfig::new(self.sizes.variance_trials, self.s(i) ^ 0xcafe);
            let cmp = compare_variance(&without, &with, &p, 0, &a, 4, &cfg)?;
            worst = worst.min(cmp.reduction_low);
            if !cmp.candidate_not_worse {
                failures += 1;
            }
        }
        Ok(Measured {
            worst: -worst,
            tolerance: 0.0,
            pass: failures == 0,
            detail: format!("{failures}/{seeds} policies where the leave-one-out variate is not 99% no worse"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_suite_passes() {
        let report = Suite::new(Scope::Fast, 0).run();
        for c in &report.checks {
            assert_ne!(c.status, Status::Fail, "{c:?}");
        }
    }
}
