//! Stochastic gradient estimators for the Jensen lower bound, its multi-sample
//! extension, the ELBO, leave-one-out policy gradients, KL regularization and
//! the format penalty.
//!
//! Every estimator is a pure function of `(params, batch)`. None of them
//! normalize advantages; the trainer owns that step. Raw advantages are
//! returned alongside the gradient for inspection.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{log_mean_exp, log_sum_exp, softmax};
use crate::policy::{Generation, PolicyParams, PromptId, ReferencePolicy, Token};
use crate::tasks::MatchFunction;

/// Labels for the sub-gradients carried by a [`GradientVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Term {
    /// Score-function term on the chain-of-thought.
    Reinforce,
    /// Answer-head term: the supervised loss for the bounds, the answer update
    /// for the policy-gradient estimators.
    Supervised,
    /// `grad log pi(c|x)` inside the ELBO policy gradient.
    Prior,
    Kl,
    Format,
}

/// Dense gradient aligned with the flat [`PolicyParams`] layout, with labeled
/// sub-gradients. `total` is always the sum of the parts.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    total: Vec<f64>,
    parts: Vec<(Term, Vec<f64>)>,
    pub advantages: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            total: vec![0.0; len],
            parts: Vec::new(),
            advantages: Vec::new(),
        }
    }

    pub fn from_parts(len: usize, mut parts: Vec<(Term, Vec<f64>)>, advantages: Vec<f64>) -> Self {
        parts.sort_by_key(|(t, _)| *t);
        let mut total = vec![0.0; len];
        for (_, p) in &parts {
            assert_eq!(p.len(), len, "sub-gradient length mismatch");
            for (t, v) in total.iter_mut().zip(p) {
                *t += v;
            }
        }
        Self {
            total,
            parts,
            advantages,
        }
    }

    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }

    pub fn total(&self) -> &[f64] {
        &self.total
    }

    pub fn into_total(self) -> Vec<f64> {
        self.total
    }

    pub fn part(&self, term: Term) -> Option<&[f64]> {
        self.parts
            .iter()
            .find(|(t, _)| *t == term)
            .map(|(_, p)| p.as_slice())
    }

    pub fn terms(&self) -> impl Iterator<Item = Term> + '_ {
        self.parts.iter().map(|(t, _)| *t)
    }

    /// `self += scale * other`, part by part.
    pub fn add_scaled(&mut self, other: &GradientVector, scale: f64) {
        assert_eq!(self.len(), other.len());
        for (t, v) in self.total.iter_mut().zip(&other.total) {
            *t += scale * v;
        }
        for (term, p) in &other.parts {
            let idx = match self.parts.iter().position(|(t, _)| t == term) {
                Some(i) => i,
                None => {
                    self.parts.push((*term, vec![0.0; p.len()]));
                    self.parts.sort_by_key(|(t, _)| *t);
                    self.parts.iter().position(|(t, _)| t == term).unwrap()
                }
            };
            for (d, v) in self.parts[idx].1.iter_mut().zip(p) {
                *d += scale * v;
            }
        }
    }

    pub fn scaled(&self, scale: f64) -> Self {
        let mut out = GradientVector::zeros(self.len());
        out.add_scaled(self, scale);
        out.advantages = self.advantages.clone();
        out
    }

    pub fn is_finite(&self) -> bool {
        self.total.iter().all(|v| v.is_finite())
    }
}

/// Whether leave-one-out control variates are subtracted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ControlVariate {
    LeaveOneOut,
    None,
}

/// `n` generations for one prompt plus the forward evaluations of the
/// ground-truth answer under each sampled chain-of-thought.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub prompt: PromptId,
    pub generations: Vec<Generation>,
    pub a_star: Vec<Token>,
    /// `log pi(a* | x, c_i)` per sample.
    pub logp_astar_given_c: Vec<f64>,
}

impl SampleBatch {
    pub fn new(
        params: &PolicyParams,
        prompt: PromptId,
        a_star: Vec<Token>,
        generations: Vec<Generation>,
    ) -> Result<Self> {
        if generations.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(g) = generations.iter().find(|g| g.prompt != prompt) {
            return Err(Error::MalformedSequence(format!(
                "generation for prompt {} in a batch for prompt {prompt}",
                g.prompt
            )));
        }
        let logp_astar_given_c = generations
            .iter()
            .map(|g| params.logprob_answer(prompt, &g.cot, &a_star))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prompt,
            generations,
            a_star,
            logp_astar_given_c,
        })
    }

    pub fn len(&self) -> usize {
        self.generations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generations.is_empty()
    }

    /// Batch restricted to samples with `keep[i]`; `None` when nothing is kept.
    pub fn select(&self, keep: impl Fn(usize, &Generation) -> bool) -> Option<SampleBatch> {
        let idx: Vec<usize> = self
            .generations
            .iter()
            .enumerate()
            .filter(|(i, g)| keep(*i, g))
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            return None;
        }
        Some(SampleBatch {
            prompt: self.prompt,
            generations: idx.iter().map(|&i| self.generations[i].clone()).collect(),
            a_star: self.a_star.clone(),
            logp_astar_given_c: idx.iter().map(|&i| self.logp_astar_given_c[i]).collect(),
        })
    }

    pub fn format_valid(&self) -> Option<SampleBatch> {
        self.select(|_, g| g.format_valid)
    }
}

/// Mean of the other `n - 1` values for each index; zero when `n == 1`.
pub fn leave_one_out_means(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let sum: f64 = values.iter().sum();
    values.iter().map(|v| (sum - v) / (n - 1) as f64).collect()
}

/// `log((1/(n-1)) * sum_{j != i} exp(values_j))` for each `i`; zero when `n == 1`.
pub fn leave_one_out_log_mean_exp(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut others = Vec::with_capacity(n - 1);
    (0..n)
        .map(|i| {
            others.clear();
            others.extend(values.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v));
            log_mean_exp(&others)
        })
        .collect()
}

/// Raw single-sample advantages `log pi(a*|x,c_i) - v_i`.
pub fn jepo_single_advantages(logp_astar: &[f64], cv: ControlVariate) -> Vec<f64> {
    match cv {
        ControlVariate::None => logp_astar.to_vec(),
        ControlVariate::LeaveOneOut => logp_astar
            .iter()
            .zip(leave_one_out_means(logp_astar))
            .map(|(l, v)| l - v)
            .collect(),
    }
}

/// Raw multi-sample advantages `log-mean-exp_j(L_j) - v~_i`.
pub fn jepo_multi_advantages(logp_astar: &[f64], cv: ControlVariate) -> Vec<f64> {
    let lme = log_mean_exp(logp_astar);
    match cv {
        ControlVariate::None => vec![lme; logp_astar.len()],
        ControlVariate::LeaveOneOut => leave_one_out_log_mean_exp(logp_astar)
            .into_iter()
            .map(|v| lme - v)
            .collect(),
    }
}

/// Weights `pi(a*|x,c_i) / sum_j pi(a*|x,c_j)` of the multi-sample supervised term.
pub fn multi_sample_weights(logp_astar: &[f64]) -> Vec<f64> {
    softmax(logp_astar)
}

fn cot_score_sum(params: &PolicyParams, batch: &SampleBatch, coeffs: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; params.num_params()];
    for (g, &w) in batch.generations.iter().zip(coeffs) {
        if w != 0.0 {
            params.accumulate_grad_cot(batch.prompt, &g.cot, w, &mut out)?;
        }
    }
    Ok(out)
}

fn astar_score_sum(params: &PolicyParams, batch: &SampleBatch, coeffs: &[f64]) -> Result<Vec<f64>> {
    // Identical CoTs share one a* gradient, so their weights are merged first.
    let mut merged: Vec<(&[Token], f64)> = Vec::new();
    for (g, &w) in batch.generations.iter().zip(coeffs) {
        match merged.iter_mut().find(|(c, _)| *c == g.cot.as_slice()) {
            Some(entry) => entry.1 += w,
            None => merged.push((&g.cot, w)),
        }
    }
    let mut out = vec![0.0; params.num_params()];
    for (cot, w) in merged {
        params.accumulate_grad_answer(batch.prompt, cot, &batch.a_star, w, &mut out)?;
    }
    Ok(out)
}

fn check_nonempty(batch: &SampleBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Single-sample Jensen bound gradient averaged over `n` samples:
/// `(1/n) sum_i (L_i - v_i) grad log pi(c_i|x) + (1/n) sum_i grad log pi(a*|x,c_i)`.
pub fn jepo_grad_single(params: &PolicyParams, batch: &SampleBatch, cv: ControlVariate) -> Result<GradientVector> {
    check_nonempty(batch)?;
    let n = batch.len() as f64;
    let adv = jepo_single_advantages(&batch.logp_astar_given_c, cv);
    let coeffs: Vec<f64> = adv.iter().map(|a| a / n).collect();
    let reinforce = cot_score_sum(params, batch, &coeffs)?;
    let supervised = astar_score_sum(params, batch, &vec![1.0 / n; batch.len()])?;
    Ok(GradientVector::from_parts(
        params.num_params(),
        vec![(Term::Reinforce, reinforce), (Term::Supervised, supervised)],
        adv,
    ))
}

/// Multi-sample bound gradient: the REINFORCE part is summed over samples
/// and the supervised part is `grad log((1/n) sum_i pi(a*|x,c_i))`, written as
/// a probability-weighted mix of per-sample answer gradients.
pub fn jepo_grad_multi(params: &PolicyParams, batch: &SampleBatch, cv: ControlVariate) -> Result<GradientVector> {
    check_nonempty(batch)?;
    if batch.len() == 1 {
        return jepo_grad_single(params, batch, cv);
    }
    let adv = jepo_multi_advantages(&batch.logp_astar_given_c, cv);
    let reinforce = cot_score_sum(params, batch, &adv)?;
    let weights = multi_sample_weights(&batch.logp_astar_given_c);
    let supervised = astar_score_sum(params, batch, &weights)?;
    Ok(GradientVector::from_parts(
        params.num_params(),
        vec![(Term::Reinforce, reinforce), (Term::Supervised, supervised)],
        adv,
    ))
}

fn check_loo(name: &'static str, batch: &SampleBatch, cv: ControlVariate) -> Result<()> {
    check_nonempty(batch)?;
    if cv == ControlVariate::LeaveOneOut && batch.len() < 2 {
        return Err(Error::InsufficientSamples {
            estimator: name,
            required: 2,
            got: batch.len(),
        });
    }
    Ok(())
}

/// Leave-one-out REINFORCE over whole generations with a binary match reward.
pub fn vanilla_pg_rloo(
    params: &PolicyParams,
    batch: &SampleBatch,
    matcher: &MatchFunction,
    cv: ControlVariate,
) -> Result<GradientVector> {
    check_loo("vanilla_pg_rloo", batch, cv)?;
    let n = batch.len() as f64;
    let rewards: Vec<f64> = batch
        .generations
        .iter()
        .map(|g| if matcher.matches(&g.answer, &batch.a_star) { 1.0 } else { 0.0 })
        .collect();
    let adv: Vec<f64> = match cv {
        ControlVariate::None => rewards.clone(),
        ControlVariate::LeaveOneOut => rewards
            .iter()
            .zip(leave_one_out_means(&rewards))
            .map(|(r, w)| r - w)
            .collect(),
    };
    let coeffs: Vec<f64> = adv.iter().map(|a| a / n).collect();
    let reinforce = cot_score_sum(params, batch, &coeffs)?;
    let mut answer = vec![0.0; params.num_params()];
    for (g, &c) in batch.generations.iter().zip(&coeffs) {
        if c != 0.0 {
            params.accumulate_grad_answer(batch.prompt, &g.cot, &g.answer, c, &mut answer)?;
        }
    }
    Ok(GradientVector::from_parts(
        params.num_params(),
        vec![(Term::Reinforce, reinforce), (Term::Supervised, answer)],
        adv,
    ))
}

/// Conditional expectation of [`vanilla_pg_rloo`] (exact match) given the
/// chains-of-thought: sampled answers are integrated out analytically.
pub fn var_reduced_pg(params: &PolicyParams, batch: &SampleBatch, cv: ControlVariate) -> Result<GradientVector> {
    check_loo("var_reduced_pg", batch, cv)?;
    let n = batch.len() as f64;
    let probs: Vec<f64> = batch.logp_astar_given_c.iter().map(|l| l.exp()).collect();
    let adv: Vec<f64> = match cv {
        ControlVariate::None => probs.clone(),
        ControlVariate::LeaveOneOut => probs
            .iter()
            .zip(leave_one_out_means(&probs))
            .map(|(p, w)| p - w)
            .collect(),
    };
    let coeffs: Vec<f64> = adv.iter().map(|a| a / n).collect();
    let reinforce = cot_score_sum(params, batch, &coeffs)?;
    // grad pi = pi * grad log pi
    let head: Vec<f64> = probs.iter().map(|p| p / n).collect();
    let supervised = astar_score_sum(params, batch, &head)?;
    Ok(GradientVector::from_parts(
        params.num_params(),
        vec![(Term::Reinforce, reinforce), (Term::Supervised, supervised)],
        adv,
    ))
}

/// ELBO gradients for a batch sampled from the inference policy
/// `q_phi(.|x, a*)`, whose tables for this `(x, a*)` live under `phi_prompt`.
///
/// Returns `(g_theta, g_phi)`, each averaged over the batch. `g_phi` is laid
/// out like `phi`.
pub fn elbo_grads(
    theta: &PolicyParams,
    phi: &PolicyParams,
    phi_prompt: PromptId,
    batch: &SampleBatch,
) -> Result<(GradientVector, GradientVector)> {
    check_nonempty(batch)?;
    if theta.vocab() != phi.vocab()
        || theta.shape().max_cot_len != phi.shape().max_cot_len
        || theta.shape().context_order != phi.shape().context_order
    {
        return Err(Error::ShapeMismatch(
            "inference policy must share vocabulary, context order and chain-of-thought cap".into(),
        ));
    }
    let n = batch.len() as f64;
    let x = batch.prompt;
    let mut head = vec![0.0; theta.num_params()];
    let mut prior = vec![0.0; theta.num_params()];
    let mut q_score = vec![0.0; phi.num_params()];
    let mut q_entropy = vec![0.0; phi.num_params()];
    let mut adv = Vec::with_capacity(batch.len());
    for (g, &l_astar) in batch.generations.iter().zip(&batch.logp_astar_given_c) {
        theta.accumulate_grad_answer(x, &g.cot, &batch.a_star, 1.0 / n, &mut head)?;
        theta.accumulate_grad_cot(x, &g.cot, 1.0 / n, &mut prior)?;
        let log_q = phi.logprob_cot(phi_prompt, &g.cot)?;
        let log_prior = theta.logprob_cot(x, &g.cot)?;
        let a = l_astar - (log_q - log_prior);
        phi.accumulate_grad_cot(phi_prompt, &g.cot, a / n, &mut q_score)?;
        phi.accumulate_grad_cot(phi_prompt, &g.cot, -1.0 / n, &mut q_entropy)?;
        adv.push(a);
    }
    let g_theta = GradientVector::from_parts(
        theta.num_params(),
        vec![(Term::Supervised, head), (Term::Prior, prior)],
        Vec::new(),
    );
    let g_phi = GradientVector::from_parts(
        phi.num_params(),
        vec![(Term::Reinforce, q_score), (Term::Prior, q_entropy)],
        adv,
    );
    Ok((g_theta, g_phi))
}

/// REINFORCE estimate of `grad KL(pi(.|x) || pi_ref(.|x))` over whole
/// generations. The trainer subtracts `beta * ` this.
pub fn kl_reg_grad(params: &PolicyParams, reference: &ReferencePolicy, batch: &SampleBatch) -> Result<GradientVector> {
    check_nonempty(batch)?;
    let q = reference.params();
    params.ensure_same_shape(q)?;
    let n = batch.len() as f64;
    let x = batch.prompt;
    let mut out = vec![0.0; params.num_params()];
    let mut ratios = Vec::with_capacity(batch.len());
    for g in &batch.generations {
        let ratio = params.logprob_generation(x, &g.cot, &g.answer)? - q.logprob_generation(x, &g.cot, &g.answer)?;
        if ratio != 0.0 {
            params.accumulate_grad_cot(x, &g.cot, ratio / n, &mut out)?;
            params.accumulate_grad_answer(x, &g.cot, &g.answer, ratio / n, &mut out)?;
        }
        ratios.push(ratio);
    }
    Ok(GradientVector::from_parts(
        params.num_params(),
        vec![(Term::Kl, out)],
        ratios,
    ))
}

/// Leave-one-out REINFORCE on the chain-of-thought with reward `-penalty` for
/// format-invalid generations and zero otherwise.
pub fn format_penalty_grad(params: &PolicyParams, batch: &SampleBatch, penalty: f64) -> Result<GradientVector> {
    check_nonempty(batch)?;
    let adv = format_advantages(&batch.generations, penalty);
    let n = batch.len() as f64;
    let coeffs: Vec<f64> = adv.iter().map(|a| a / n).collect();
    let grad = cot_score_sum(params, batch, &coeffs)?;
    Ok(GradientVector::from_parts(
        params.num_params(),
        vec![(Term::Format, grad)],
        adv,
    ))
}

/// Raw leave-one-out advantages of the format reward.
pub fn format_advantages(generations: &[Generation], penalty: f64) -> Vec<f64> {
    let rewards: Vec<f64> = generations
        .iter()
        .map(|g| if g.format_valid { 0.0 } else { -penalty })
        .collect();
    rewards
        .iter()
        .zip(leave_one_out_means(&rewards))
        .map(|(r, b)| r - b)
        .collect()
}

/// Default format penalty magnitude.
pub const DEFAULT_FORMAT_PENALTY: f64 = 10.0;

/// A gradient estimator usable by the exact-expectation and variance oracles.
pub trait GradientEstimator: Sync {
    fn name(&self) -> String;

    /// Whether sampled answers affect the output. Estimators that only read
    /// chains-of-thought let the oracle marginalize answers away.
    fn uses_answers(&self) -> bool;

    fn estimate(&self, params: &PolicyParams, batch: &SampleBatch) -> Result<GradientVector>;
}

/// The estimators defined in this module, parameterized for oracle use.
#[derive(Debug, Clone, Copy)]
pub enum Estimator<'a> {
    JepoSingle(ControlVariate),
    JepoMulti(ControlVariate),
    VanillaPg {
        matcher: &'a MatchFunction,
        cv: ControlVariate,
    },
    VarReducedPg(ControlVariate),
    KlReg(&'a ReferencePolicy),
    FormatPenalty(f64),
}

impl GradientEstimator for Estimator<'_> {
    fn name(&self) -> String {
        match self {
            Estimator::JepoSingle(cv) => format!("jepo_single[{cv:?}]"),
            Estimator::JepoMulti(cv) => format!("jepo_multi[{cv:?}]"),
            Estimator::VanillaPg { cv, .. } => format!("vanilla_pg_rloo[{cv:?}]"),
            Estimator::VarReducedPg(cv) => format!("var_reduced_pg[{cv:?}]"),
            Estimator::KlReg(_) => "kl_reg".into(),
            Estimator::FormatPenalty(p) => format!("format_penalty[{p}]"),
        }
    }

    fn uses_answers(&self) -> bool {
        matches!(self, Estimator::VanillaPg { .. } | Estimator::KlReg(_))
    }

    fn estimate(&self, params: &PolicyParams, batch: &SampleBatch) -> Result<GradientVector> {
        match *self {
            Estimator::JepoSingle(cv) => jepo_grad_single(params, batch, cv),
            Estimator::JepoMulti(cv) => jepo_grad_multi(params, batch, cv),
            Estimator::VanillaPg { matcher, cv } => vanilla_pg_rloo(params, batch, matcher, cv),
            Estimator::VarReducedPg(cv) => var_reduced_pg(params, batch, cv),
            Estimator::KlReg(reference) => kl_reg_grad(params, reference, batch),
            Estimator::FormatPenalty(p) => format_penalty_grad(params, batch, p),
        }
    }
}

/// `log((1/n) sum_i exp(L_i))` of a batch: the multi-sample bound integrand.
pub fn batch_log_mean_likelihood(batch: &SampleBatch) -> f64 {
    log_sum_exp(&batch.logp_astar_given_c) - (batch.len() as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fake_batch(params: &PolicyParams, logps: &[f64]) -> SampleBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gens = (0..logps.len())
            .map(|_| params.sample_generation(0, &mut rng).unwrap())
            .collect();
        let mut b = SampleBatch::new(params, 0, vec![params.vocab().eoa()], gens).unwrap();
        b.logp_astar_given_c = logps.to_vec();
        b
    }

    fn small() -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        PolicyParams::random(PolicyShape::new(2, 1, 2, 1, 1).unwrap(), 1.0, &mut rng)
    }

    #[test]
    fn single_sample_leave_one_out_arithmetic() {
        assert_eq!(jepo_single_advantages(&[-1.0, -3.0], ControlVariate::LeaveOneOut), vec![2.0, -2.0]);
        assert_eq!(jepo_single_advantages(&[-1.5], ControlVariate::LeaveOneOut), vec![-1.5]);
    }

    #[test]
    fn multi_sample_symmetric_advantages_vanish() {
        let adv = jepo_multi_advantages(&[-2.0; 4], ControlVariate::LeaveOneOut);
        assert!(adv.iter().all(|a| a.abs() < 1e-15));
    }

    #[test]
    fn multi_sample_weights_recover_probabilities() {
        let w = multi_sample_weights(&[0.9f64.ln(), 0.1f64.ln()]);
        assert!((w[0] - 0.9).abs() < 1e-15 && (w[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn leave_one_out_baselines_for_rewards() {
        let b = leave_one_out_means(&[1.0, 1.0, 0.0, 0.0]);
        let expected = [1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
        for (x, e) in b.iter().zip(expected) {
            assert!((x - e).abs() < 1e-15);
        }
    }

    #[test]
    fn var_reduced_advantages() {
        let p = small();
        let batch = fake_batch(&p, &[0.9f64.ln(), 0.1f64.ln()]);
        let g = var_reduced_pg(&p, &batch, ControlVariate::LeaveOneOut).unwrap();
        assert!((g.advantages[0] - 0.8).abs() < 1e-12 && (g.advantages[1] + 0.8).abs() < 1e-12);
    }

    #[test]
    fn vanilla_pg_needs_two_samples_and_zero_for_equal_rewards() {
        let p = small();
        let exact = MatchFunction::exact();
        let one = fake_batch(&p, &[-1.0]);
        assert!(matches!(
            vanilla_pg_rloo(&p, &one, &exact, ControlVariate::LeaveOneOut),
            Err(Error::InsufficientSamples { .. })
        ));
        let mut batch = fake_batch(&p, &[-1.0, -2.0, -3.0]);
        // Nobody matches an answer that is never generated.
        batch.a_star = vec![9, 9];
        let g = vanilla_pg_rloo(&p, &batch, &exact, ControlVariate::LeaveOneOut).unwrap();
        assert!(g.total().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn vanilla_pg_rewards_one_zero() {
        let p = small();
        let mut batch = fake_batch(&p, &[-1.0, -1.0]);
        batch.generations[0].answer = vec![0, 3];
        batch.generations[1].answer = vec![3];
        batch.a_star = vec![0, 3];
        let g = vanilla_pg_rloo(&p, &batch, &MatchFunction::exact(), ControlVariate::LeaveOneOut).unwrap();
        assert_eq!(g.advantages, vec![1.0, -1.0]);
    }

    #[test]
    fn format_penalty_advantages() {
        let p = small();
        let mut batch = fake_batch(&p, &[-1.0, -1.0]);
        batch.generations[0].format_valid = true;
        batch.generations[1].format_valid = false;
        let g = format_penalty_grad(&p, &batch, DEFAULT_FORMAT_PENALTY).unwrap();
        assert_eq!(g.advantages, vec![10.0, -10.0]);
        batch.generations[1].format_valid = true;
        let g = format_penalty_grad(&p, &batch, 10.0).unwrap();
        assert!(g.total().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kl_grad_vanishes_at_reference() {
        let p = small();
        let r = ReferencePolicy::new(p.clone());
        let batch = fake_batch(&p, &[-1.0, -2.0]);
        let g = kl_reg_grad(&p, &r, &batch).unwrap();
        assert!(g.total().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn totals_equal_sum_of_parts() {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gens = (0..3).map(|_| p.sample_generation(0, &mut rng).unwrap()).collect();
        let batch = SampleBatch::new(&p, 0, vec![1, 3], gens).unwrap();
        let g = jepo_grad_multi(&p, &batch, ControlVariate::LeaveOneOut).unwrap();
        let r = g.part(Term::Reinforce).unwrap();
        let s = g.part(Term::Supervised).unwrap();
        for i in 0..g.len() {
            assert!((g.total()[i] - r[i] - s[i]).abs() < 1e-12);
        }
        let mut acc = GradientVector::zeros(g.len());
        acc.add_scaled(&g, 2.0);
        let r2 = acc.part(Term::Reinforce).unwrap();
        assert!(r2.iter().zip(r).all(|(a, b)| (a - 2.0 * b).abs() < 1e-12));
    }

    #[test]
    fn empty_and_mixed_batches_are_rejected() {
        let p = small();
        assert!(matches!(SampleBatch::new(&p, 0, vec![3], vec![]), Err(Error::EmptyBatch)));
    }
}
