//! Brute-force ground truth over enumerable policies: marginal likelihoods,
//! bounds, posteriors, exact expected gradients and Monte-Carlo variances.
//!
//! Exact operations fail with [`Error::BudgetExceeded`] instead of falling
//! back to sampling.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{GradientEstimator, GradientVector, SampleBatch};
use crate::numerics::{derive_rng, log_mean_exp, log_sum_exp, mean, std_error};
use crate::policy::{Generation, PolicyParams, PromptId, ReferencePolicy, Token};

/// Largest CoT (or generation) outcome space allowed for exact tuple enumeration.
pub const MAX_TUPLE_OUTCOMES: usize = 200;
/// Largest tuple size allowed for exact tuple enumeration.
pub const MAX_TUPLE_SIZE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EnumerationBudget {
    /// Cap on the number of enumerated items (sequences, generations or tuples).
    pub max_sequences: u128,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self {
            max_sequences: 100_000,
        }
    }
}

impl EnumerationBudget {
    pub fn check(&self, what: &'static str, required: u128) -> Result<()> {
        if required > self.max_sequences {
            return Err(Error::BudgetExceeded {
                what,
                required,
                cap: self.max_sequences,
            });
        }
        Ok(())
    }
}

/// A bound value where `-inf` is kept distinct from any finite number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum BoundValue {
    Finite(f64),
    NegInfinite,
}

impl BoundValue {
    pub fn from_f64(v: f64) -> Self {
        if v == f64::NEG_INFINITY {
            BoundValue::NegInfinite
        } else {
            BoundValue::Finite(v)
        }
    }

    pub fn value(self) -> f64 {
        match self {
            BoundValue::Finite(v) => v,
            BoundValue::NegInfinite => f64::NEG_INFINITY,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            BoundValue::Finite(v) => Some(v),
            BoundValue::NegInfinite => None,
        }
    }
}

/// One chain-of-thought with its prior and answer log-likelihoods.
#[derive(Debug, Clone, PartialEq)]
pub struct CotEntry {
    pub cot: Vec<Token>,
    pub log_prior: f64,
    pub log_lik: f64,
}

/// Every chain-of-thought with `log pi(c|x)` and `log pi(a*|x,c)`.
pub fn cot_table(params: &PolicyParams, x: PromptId, a_star: &[Token], budget: &EnumerationBudget) -> Result<Vec<CotEntry>> {
    let shape = params.shape();
    shape.check_prompt(x)?;
    budget.check("chain-of-thought space", shape.cot_space_size())?;
    shape.cot_space()
        .into_iter()
        .map(|cot| {
            let log_prior = params.logprob_cot(x, &cot)?;
            let log_lik = params.logprob_answer(x, &cot, a_star)?;
            Ok(CotEntry {
                cot,
                log_prior,
                log_lik,
            })
        })
        .collect()
}

/// `log sum_c pi(c|x) pi(a*|x,c)`.
pub fn marginal_loglik(params: &PolicyParams, x: PromptId, a_star: &[Token], budget: &EnumerationBudget) -> Result<f64> {
    let table = cot_table(params, x, a_star, budget)?;
    let terms: Vec<f64> = table.iter().map(|e| e.log_prior + e.log_lik).collect();
    Ok(log_sum_exp(&terms))
}

/// `sum_c pi(c|x) log pi(a*|x,c)`.
pub fn jensen_bound_exact(params: &PolicyParams, x: PromptId, a_star: &[Token], budget: &EnumerationBudget) -> Result<BoundValue> {
    let table = cot_table(params, x, a_star, budget)?;
    Ok(jensen_from_table(&table))
}

fn jensen_from_table(table: &[CotEntry]) -> BoundValue {
    let mut total = 0.0;
    for e in table {
        let w = e.log_prior.exp();
        if w == 0.0 {
            continue;
        }
        if e.log_lik == f64::NEG_INFINITY {
            return BoundValue::NegInfinite;
        }
        total += w * e.log_lik;
    }
    BoundValue::Finite(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum BoundMode {
    /// Enumerate every n-tuple of chains-of-thought.
    Exact,
    MonteCarlo { trials: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundEstimate {
    pub value: BoundValue,
    /// Zero in exact mode.
    pub std_error: f64,
}

fn check_tuple_limits(outcomes: usize, n: usize, budget: &EnumerationBudget) -> Result<()> {
    if n > MAX_TUPLE_SIZE {
        return Err(Error::BudgetExceeded {
            what: "tuple size",
            required: n as u128,
            cap: MAX_TUPLE_SIZE as u128,
        });
    }
    if outcomes > MAX_TUPLE_OUTCOMES {
        return Err(Error::BudgetExceeded {
            what: "tuple outcome space",
            required: outcomes as u128,
            cap: MAX_TUPLE_OUTCOMES as u128,
        });
    }
    budget.check("tuple space", (outcomes as u128).pow(n as u32))
}

/// Calls `f` on every `n`-tuple over `0..k` in lexicographic order.
fn for_each_tuple(k: usize, n: usize, mut f: impl FnMut(&[usize])) {
    if k == 0 {
        return;
    }
    let mut idx = vec![0usize; n];
    loop {
        f(&idx);
        let mut pos = n;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < k {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// `E[log((1/n) sum_i pi(a*|x,c_i))]` over `n` i.i.d. chains-of-thought.
pub fn multi_sample_bound(
    params: &PolicyParams,
    x: PromptId,
    a_star: &[Token],
    n: usize,
    mode: BoundMode,
    budget: &EnumerationBudget,
) -> Result<BoundEstimate> {
    if n == 0 {
        return Err(Error::InsufficientSamples {
            estimator: "multi_sample_bound",
            required: 1,
            got: 0,
        });
    }
    match mode {
        BoundMode::Exact => {
            let table = cot_table(params, x, a_star, budget)?;
            if n == 1 {
                return Ok(BoundEstimate {
                    value: jensen_from_table(&table),
                    std_error: 0.0,
                });
            }
            check_tuple_limits(table.len(), n, budget)?;
            let mut total = 0.0;
            let mut neg_inf = false;
            let mut liks = vec![0.0; n];
            for_each_tuple(table.len(), n, |idx| {
                let mut log_w = 0.0;
                for (slot, &i) in idx.iter().enumerate() {
                    log_w += table[i].log_prior;
                    liks[slot] = table[i].log_lik;
                }
                let w = log_w.exp();
                if w == 0.0 {
                    return;
                }
                let v = log_mean_exp(&liks);
                if v == f64::NEG_INFINITY {
                    neg_inf = true;
                } else {
                    total += w * v;
                }
            });
            Ok(BoundEstimate {
                value: if neg_inf { BoundValue::NegInfinite } else { BoundValue::Finite(total) },
                std_error: 0.0,
            })
        }
        BoundMode::MonteCarlo { trials, seed } => {
            let values = sampled_bound_values(params, x, a_star, n, trials, seed)?;
            if values.contains(&f64::NEG_INFINITY) {
                return Ok(BoundEstimate {
                    value: BoundValue::NegInfinite,
                    std_error: 0.0,
                });
            }
            Ok(BoundEstimate {
                value: BoundValue::Finite(mean(&values)),
                std_error: std_error(&values),
            })
        }
    }
}

/// Per-trial `log((1/n) sum_i pi(a*|x,c_i))` with `c_i` sampled from the policy.
pub fn sampled_bound_values(
    params: &PolicyParams,
    x: PromptId,
    a_star: &[Token],
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    params.shape().check_prompt(x)?;
    if trials == 0 {
        return Err(Error::InsufficientSamples {
            estimator: "monte-carlo bound",
            required: 1,
            got: 0,
        });
    }
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = derive_rng(seed, &[x as u64, n as u64, t as u64]);
            let mut liks = Vec::with_capacity(n);
            for _ in 0..n {
                let (cot, _, _) = params.sample_cot(x, &mut rng)?;
                liks.push(params.logprob_answer(x, &cot, a_star)?);
            }
            Ok(log_mean_exp(&liks))
        })
        .collect()
}

/// A normalized distribution over chains-of-thought.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorTable {
    entries: Vec<(Vec<Token>, f64)>,
}

impl PosteriorTable {
    pub fn new(entries: Vec<(Vec<Token>, f64)>) -> Result<Self> {
        let total: f64 = entries.iter().map(|(_, p)| p).sum();
        if entries.iter().any(|(_, p)| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidConfig(format!(
                "distribution must have entries in [0, 1] summing to 1, sum is {total}"
            )));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(Vec<Token>, f64)] {
        &self.entries
    }

    pub fn prob(&self, cot: &[Token]) -> f64 {
        self.entries
            .iter()
            .find(|(c, _)| c.as_slice() == cot)
            .map_or(0.0, |(_, p)| *p)
    }
}

/// The prior `pi(.|x)` as a table.
pub fn prior_exact(params: &PolicyParams, x: PromptId, budget: &EnumerationBudget) -> Result<PosteriorTable> {
    let shape = params.shape();
    shape.check_prompt(x)?;
    budget.check("chain-of-thought space", shape.cot_space_size())?;
    let entries = shape
        .cot_space()
        .into_iter()
        .map(|c| {
            let p = params.logprob_cot(x, &c)?.exp();
            Ok((c, p))
        })
        .collect::<Result<Vec<_>>>()?;
    PosteriorTable::new(entries)
}

/// `p(c|x,a*)` proportional to `pi(c|x) pi(a*|x,c)`.
pub fn posterior_exact(params: &PolicyParams, x: PromptId, a_star: &[Token], budget: &EnumerationBudget) -> Result<PosteriorTable> {
    let table = cot_table(params, x, a_star, budget)?;
    let joint: Vec<f64> = table.iter().map(|e| e.log_prior + e.log_lik).collect();
    let log_z = log_sum_exp(&joint);
    if log_z == f64::NEG_INFINITY {
        return Err(Error::ZeroMarginal);
    }
    let entries = table
        .into_iter()
        .zip(joint)
        .map(|(e, j)| (e.cot, (j - log_z).exp()))
        .collect();
    PosteriorTable::new(entries)
}

/// `KL(p || q)`; infinite when `p` puts mass outside the support of `q`.
pub fn kl_divergence(p: &PosteriorTable, q: &PosteriorTable) -> f64 {
    let mut total = 0.0;
    for (c, pc) in p.entries() {
        if *pc == 0.0 {
            continue;
        }
        let qc = q.prob(c);
        if qc == 0.0 {
            return f64::INFINITY;
        }
        total += pc * (pc.ln() - qc.ln());
    }
    total
}

/// An inference distribution over chains-of-thought for the exact ELBO.
pub trait CotDistribution {
    /// `log q(c)`; `-inf` outside the support.
    fn log_prob(&self, cot: &[Token]) -> Result<f64>;
}

impl CotDistribution for PosteriorTable {
    fn log_prob(&self, cot: &[Token]) -> Result<f64> {
        Ok(self.prob(cot).ln())
    }
}

/// The CoT distribution of a policy's own tables for one prompt key.
#[derive(Debug, Clone, Copy)]
pub struct PolicyCot<'a> {
    pub params: &'a PolicyParams,
    pub prompt: PromptId,
}

impl CotDistribution for PolicyCot<'_> {
    fn log_prob(&self, cot: &[Token]) -> Result<f64> {
        self.params.logprob_cot(self.prompt, cot)
    }
}

/// `E_q[log pi(a*|x,c) + log pi(c|x) - log q(c)]`, exact over the CoT space.
pub fn elbo_exact(
    theta: &PolicyParams,
    q: &dyn CotDistribution,
    x: PromptId,
    a_star: &[Token],
    budget: &EnumerationBudget,
) -> Result<BoundValue> {
    let table = cot_table(theta, x, a_star, budget)?;
    let mut total = 0.0;
    for e in &table {
        let log_q = q.log_prob(&e.cot)?;
        let w = log_q.exp();
        if w == 0.0 {
            continue;
        }
        let v = e.log_lik + e.log_prior - log_q;
        if v == f64::NEG_INFINITY {
            return Ok(BoundValue::NegInfinite);
        }
        total += w * v;
    }
    Ok(BoundValue::Finite(total))
}

/// Central finite differences of `f` at every parameter coordinate.
pub fn finite_difference(
    params: &PolicyParams,
    step: f64,
    f: impl Fn(&PolicyParams) -> Result<f64> + Sync,
) -> Result<Vec<f64>> {
    (0..params.num_params())
        .into_par_iter()
        .map(|i| {
            let mut p = params.clone();
            let orig = p.logits()[i];
            p.logits_mut()[i] = orig + step;
            let up = f(&p)?;
            p.logits_mut()[i] = orig - step;
            let down = f(&p)?;
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}

/// One enumerable outcome for a tuple slot with its log-probability.
struct Outcome {
    generation: Generation,
    log_w: f64,
}

fn outcomes(
    params: &PolicyParams,
    x: PromptId,
    with_answers: bool,
) -> Result<Vec<Outcome>> {
    let shape = params.shape();
    shape.check_prompt(x)?;
    let required = if with_answers {
        shape.generation_space_size()
    } else {
        shape.cot_space_size()
    };
    if required > MAX_TUPLE_OUTCOMES as u128 {
        return Err(Error::BudgetExceeded {
            what: "tuple outcome space",
            required,
            cap: MAX_TUPLE_OUTCOMES as u128,
        });
    }
    let answers = if with_answers {
        shape.answer_space()
    } else {
        vec![vec![shape.vocab.eoa()]]
    };
    let mut out = Vec::new();
    for cot in shape.cot_space() {
        for a in &answers {
            let generation = params.make_generation(x, cot.clone(), a.clone())?;
            let log_w = if with_answers { generation.logp() } else { generation.logp_cot };
            out.push(Outcome { generation, log_w });
        }
    }
    Ok(out)
}

fn weighted_tuple_sum(
    params: &PolicyParams,
    estimator: &dyn GradientEstimator,
    x: PromptId,
    a_star: &[Token],
    slots: &[Vec<Outcome>],
) -> Result<GradientVector> {
    let n = slots.len();
    let mut acc = GradientVector::zeros(params.num_params());
    let mut err = None;
    let mut idx = vec![0usize; n];
    let sizes: Vec<usize> = slots.iter().map(|s| s.len()).collect();
    if sizes.contains(&0) {
        return Ok(acc);
    }
    'outer: loop {
        let log_w: f64 = idx.iter().enumerate().map(|(s, &i)| slots[s][i].log_w).sum();
        let w = log_w.exp();
        if w > 0.0 {
            let gens = idx.iter().enumerate().map(|(s, &i)| slots[s][i].generation.clone()).collect();
            match SampleBatch::new(params, x, a_star.to_vec(), gens).and_then(|b| estimator.estimate(params, &b)) {
                Ok(g) => acc.add_scaled(&g, w),
                Err(e) => {
                    err = Some(e);
                    break 'outer;
                }
            }
        }
        let mut pos = n;
        loop {
            if pos == 0 {
                break 'outer;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < sizes[pos] {
                break;
            }
            idx[pos] = 0;
        }
    }
    match err {
        Some(e) => Err(e),
        None => {
            acc.advantages.clear();
            Ok(acc)
        }
    }
}

/// Exact `E[estimator]` over all `n`-tuples of i.i.d. generations.
///
/// Estimators that ignore sampled answers are enumerated over
/// chains-of-thought only, which marginalizes the answers exactly.
pub fn expected_gradient(
    estimator: &dyn GradientEstimator,
    params: &PolicyParams,
    x: PromptId,
    a_star: &[Token],
    n: usize,
    budget: &EnumerationBudget,
) -> Result<GradientVector> {
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let outs = outcomes(params, x, estimator.uses_answers())?;
    check_tuple_limits(outs.len(), n, budget)?;
    let slots: Vec<Vec<Outcome>> = (0..n)
        .map(|_| {
            outs.iter()
                .map(|o| Outcome {
                    generation: o.generation.clone(),
                    log_w: o.log_w,
                })
                .collect()
        })
        .collect();
    weighted_tuple_sum(params, estimator, x, a_star, &slots)
}

/// Exact `E[estimator | c_1..c_n]`: answers are enumerated for each fixed
/// chain-of-thought with weights `prod_i pi(a_i|x,c_i)`.
pub fn conditional_expected_gradient(
    estimator: &dyn GradientEstimator,
    params: &PolicyParams,
    x: PromptId,
    a_star: &[Token],
    cots: &[Vec<Token>],
    budget: &EnumerationBudget,
) -> Result<GradientVector> {
    if cots.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let shape = params.shape();
    let answers = shape.answer_space();
    budget.check("answer tuple space", (answers.len() as u128).saturating_pow(cots.len() as u32))?;
    let slots = cots
        .iter()
        .map(|c| {
            answers
                .iter()
                .map(|a| {
                    let generation = params.make_generation(x, c.clone(), a.clone())?;
                    let log_w = generation.logp_answer;
                    Ok(Outcome { generation, log_w })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    weighted_tuple_sum(params, estimator, x, a_star, &slots)
}

/// Exact `grad KL(pi(.|x) || pi_ref(.|x))` by enumerating whole generations.
pub fn kl_gradient_exact(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    x: PromptId,
    budget: &EnumerationBudget,
) -> Result<Vec<f64>> {
    let shape = params.shape();
    params.ensure_same_shape(reference.params())?;
    shape.check_prompt(x)?;
    budget.check("generation space", shape.generation_space_size())?;
    let mut out = vec![0.0; params.num_params()];
    let answers = shape.answer_space();
    for cot in shape.cot_space() {
        let lc = params.logprob_cot(x, &cot)?;
        let rc = reference.params().logprob_cot(x, &cot)?;
        for a in &answers {
            let la = params.logprob_answer(x, &cot, a)?;
            let ra = reference.params().logprob_answer(x, &cot, a)?;
            let lp = lc + la;
            let w = lp.exp();
            let ratio = lp - (rc + ra);
            if w == 0.0 || ratio == 0.0 {
                continue;
            }
            params.accumulate_grad_cot(x, &cot, w * ratio, &mut out)?;
            params.accumulate_grad_answer(x, &cot, a, w * ratio, &mut out)?;
        }
    }
    Ok(out)
}

/// Monte-Carlo variance summary of an estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceReport {
    pub estimator: String,
    pub trials: usize,
    /// Trace of the covariance matrix.
    pub trace: f64,
    /// Bootstrap 99% interval of the trace.
    pub ci_low: f64,
    pub ci_high: f64,
    pub per_coordinate: Vec<f64>,
}

/// Paired variance comparison of a baseline and a candidate estimator on
/// common samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceComparison {
    pub baseline: VarianceReport,
    pub candidate: VarianceReport,
    /// `trace(baseline) - trace(candidate)`.
    pub reduction: f64,
    /// Bootstrap 1% quantile of the reduction.
    pub reduction_low: f64,
    /// Coordinates where the candidate's variance exceeds the baseline's.
    pub coordinates_worse: usize,
    /// `reduction_low >= 0`.
    pub candidate_not_worse: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceConfig {
    pub trials: usize,
    pub seed: u64,
    pub blocks: usize,
    pub resamples: usize,
}

impl VarianceConfig {
    pub fn new(trials: usize, seed: u64) -> Self {
        Self {
            trials,
            seed,
            blocks: 100,
            resamples: 2000,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.trials < 1000 {
            return Err(Error::InsufficientSamples {
                estimator: "estimator_variance",
                required: 1000,
                got: self.trials,
            });
        }
        if self.blocks < 2 || self.blocks > self.trials || self.resamples == 0 {
            return Err(Error::InvalidConfig(format!(
                "bootstrap needs 2 <= blocks <= trials and resamples > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-block first and second moment sums of the gradient coordinates.
#[derive(Clone)]
struct Moments {
    count: usize,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            count: 0,
            s1: vec![0.0; dim],
            s2: vec![0.0; dim],
        }
    }

    fn push(&mut self, g: &[f64]) {
        self.count += 1;
        for ((a, b), v) in self.s1.iter_mut().zip(self.s2.iter_mut()).zip(g) {
            *a += v;
            *b += v * v;
        }
    }

    fn add(&mut self, other: &Moments) {
        self.count += other.count;
        for (a, b) in self.s1.iter_mut().zip(&other.s1) {
            *a += b;
        }
        for (a, b) in self.s2.iter_mut().zip(&other.s2) {
            *a += b;
        }
    }

    fn variances(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.s1
            .iter()
            .zip(&self.s2)
            .map(|(s1, s2)| ((s2 - s1 * s1 / n) / (n - 1.0)).max(0.0))
            .collect()
    }

    fn trace(&self) -> f64 {
        self.variances().iter().sum()
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[pos.min(sorted.len() - 1)]
}

/// Gradient samples of several estimators on common batches, grouped into blocks.
fn block_moments(
    estimators: &[&dyn GradientEstimator],
    params: &PolicyParams,
    x: PromptId,
    a_star: &[Token],
    n: usize,
    cfg: &VarianceConfig,
) -> Result<Vec<Vec<Moments>>> {
    let dim = params.num_params();
    let per_block = cfg.trials / cfg.blocks;
    let extra = cfg.trials % cfg.blocks;
    (0..cfg.blocks)
        .into_par_iter()
        .map(|b| {
            let start = b * per_block + b.min(extra);
            let len = per_block + usize::from(b < extra);
            let mut moments = vec![Moments::new(dim); estimators.len()];
            for t in start..start + len {
                let mut rng = derive_rng(cfg.seed, &[x as u64, n as u64, t as u64]);
                let gens = (0..n)
                    .map(|_| params.sample_generation(x, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let batch = SampleBatch::new(params, x, a_star.to_vec(), gens)?;
                for (m, e) in moments.iter_mut().zip(estimators) {
                    m.push(e.estimate(params, &batch)?.total());
                }
            }
            Ok(moments)
        })
        .collect()
}

fn bootstrap<T: Send>(cfg: &VarianceConfig, stream: u64, blocks: &[Vec<Moments>], stat: impl Fn(&[Moments]) -> T + Sync) -> Vec<T> {
    (0..cfg.resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = derive_rng(cfg.seed, &[u64::MAX - stream, r as u64]);
            let dim = blocks[0][0].s1.len();
            let mut acc = vec![Moments::new(dim); blocks[0].len()];
            for _ in 0..blocks.len() {
                let pick = rand::Rng::random_range(&mut rng, 0..blocks.len());
                for (a, m) in acc.iter_mut().zip(&blocks[pick]) {
                    a.add(m);
                }
            }
            stat(&acc)
        })
        .collect()
}

fn totals(blocks: &[Vec<Moments>], k: usize) -> Moments {
    let dim = blocks[0][k].s1.len();
    let mut m = Moments::new(dim);
    for b in blocks {
        m.add(&b[k]);
    }
    m
}

fn report(estimator: &dyn GradientEstimator, cfg: &VarianceConfig, total: &Moments, mut boots: Vec<f64>) -> VarianceReport {
    boots.sort_by(f64::total_cmp);
    VarianceReport {
        estimator: estimator.name(),
        trials: cfg.trials,
        trace: total.trace(),
        ci_low: quantile(&boots, 0.005),
        ci_high: quantile(&boots, 0.995),
        per_coordinate: total.variances(),
    }
}

/// Monte-Carlo trace of the covariance of an estimator with a block-bootstrap interval.
pub fn estimator_variance(
    estimator: &dyn GradientEstimator,
    params: &PolicyParams,
    x: PromptId,
    a_star: &[Token],
    n: usize,
    cfg: &VarianceConfig,
) -> Result<VarianceReport> {
    cfg.validate()?;
    let blocks = block_moments(&[estimator], params, x, a_star, n, cfg)?;
    let boots = bootstrap(cfg, 1, &blocks, |acc| acc[0].trace());
    Ok(report(estimator, cfg, &totals(&blocks, 0), boots))
}

/// Paired comparison on common samples; the candidate passes when the
/// bootstrap 1% quantile of `trace(baseline) - trace(candidate)` is `>= 0`.
pub fn compare_variance(
    baseline: &dyn GradientEstimator,
    candidate: &dyn GradientEstimator,
    params: &PolicyParams,
    x: PromptId,
    a_star: &[Token],
    n: usize,
    cfg: &VarianceConfig,
) -> Result<VarianceComparison> {
    cfg.validate()?;
    let blocks = block_moments(&[baseline, candidate], params, x, a_star, n, cfg)?;
    let boots = bootstrap(cfg, 2, &blocks, |acc| (acc[0].trace(), acc[1].trace()));
    let (ba, bb): (Vec<f64>, Vec<f64>) = boots.iter().copied().unzip();
    let mut diffs: Vec<f64> = boots.iter().map(|(a, b)| a - b).collect();
    diffs.sort_by(f64::total_cmp);
    let ta = totals(&blocks, 0);
    let tb = totals(&blocks, 1);
    let base = report(baseline, cfg, &ta, ba);
    let cand = report(candidate, cfg, &tb, bb);
    let reduction_low = quantile(&diffs, 0.01);
    let coordinates_worse = base
        .per_coordinate
        .iter()
        .zip(&cand.per_coordinate)
        .filter(|(a, b)| b > a)
        .count();
    Ok(VarianceComparison {
        reduction: base.trace - cand.trace,
        reduction_low,
        coordinates_worse,
        candidate_not_worse: reduction_low >= 0.0,
        baseline: base,
        candidate: cand,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{ControlVariate, Estimator};
    use crate::numerics::relative_error;
    use crate::policy::{Phase, PolicyShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// One ordinary CoT token choice `c0 = [eoc]` vs `c1 = [0, eoc]` with prior
    /// (0.5, 0.5) and answer likelihoods (0.9, 0.1) for `a* = [eoa]`.
    fn two_cot_policy() -> PolicyParams {
        // V = 2, k = 1, L_c = 1 (only [eoc] is valid, [t, eoc] is forced).
        let shape = PolicyShape::new(2, 1, 1, 1, 1).unwrap();
        let mut p = PolicyParams::zeros(shape);
        let init = shape.initial_context();
        // Prior: eoc with 0.5, token 0 with 0.5, token 1 never.
        let row = p.row_mut(Phase::Cot, 0, init);
        row.copy_from_slice(&[0.0, -1e4, 0.0]);
        // Answer after [eoc] keeps the initial context; after [0, eoc] it is 0.
        let ans0 = p.row_mut(Phase::Answer, 0, init);
        ans0.copy_from_slice(&[(0.1f64).ln(), -1e4, (0.9f64).ln()]);
        let ctx1 = shape.push_context(init, 0);
        let ans1 = p.row_mut(Phase::Answer, 0, ctx1);
        ans1.copy_from_slice(&[(0.9f64).ln(), -1e4, (0.1f64).ln()]);
        p
    }

    fn eoa(p: &PolicyParams) -> Vec<Token> {
        vec![p.vocab().eoa()]
    }

    fn budget() -> EnumerationBudget {
        EnumerationBudget::default()
    }

    #[test]
    fn two_cot_marginal_and_bounds() {
        let p = two_cot_policy();
        let a = eoa(&p);
        let m = marginal_loglik(&p, 0, &a, &budget()).unwrap();
        assert!((m - 0.5f64.ln()).abs() < 1e-9, "{m}");
        let j = jensen_bound_exact(&p, 0, &a, &budget()).unwrap().value();
        assert!((j - (0.5 * 0.9f64.ln() + 0.5 * 0.1f64.ln())).abs() < 1e-9);
        assert!((j + 1.20397).abs() < 1e-5);
        let l2 = multi_sample_bound(&p, 0, &a, 2, BoundMode::Exact, &budget()).unwrap();
        let expected = 0.25 * 0.9f64.ln() + 0.5 * 0.5f64.ln() + 0.25 * 0.1f64.ln();
        assert!((l2.value.value() - expected).abs() < 1e-9, "{l2:?}");
        assert!((l2.value.value() + 0.948_560).abs() < 1e-6);
        let post = posterior_exact(&p, 0, &a, &budget()).unwrap();
        assert!((post.prob(&[p.vocab().eoc()]) - 0.9).abs() < 1e-9);
        assert!((post.prob(&[0, p.vocab().eoc()]) - 0.1).abs() < 1e-9);
    }

    fn random_small(seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicyParams::random(PolicyShape::new(3, 2, 3, 2, 1).unwrap(), 1.0, &mut rng)
    }

    #[test]
    fn gap_identity_and_sandwich() {
        for seed in 0..5 {
            let p = random_small(seed);
            let a = vec![1, p.vocab().eoa()];
            let m = marginal_loglik(&p, 0, &a, &budget()).unwrap();
            let j = jensen_bound_exact(&p, 0, &a, &budget()).unwrap().value();
            let prior = prior_exact(&p, 0, &budget()).unwrap();
            let post = posterior_exact(&p, 0, &a, &budget()).unwrap();
            assert!((m - j - kl_divergence(&prior, &post)).abs() < 1e-10);
            let l2 = multi_sample_bound(&p, 0, &a, 2, BoundMode::Exact, &budget()).unwrap().value.value();
            assert!(j <= l2 + 1e-10 && l2 <= m + 1e-10);
        }
    }

    #[test]
    fn elbo_with_posterior_is_tight_and_with_prior_is_jensen() {
        let p = random_small(11);
        let a = vec![0, 2, p.vocab().eoa()];
        let m = marginal_loglik(&p, 0, &a, &budget()).unwrap();
        let post = posterior_exact(&p, 0, &a, &budget()).unwrap();
        let e = elbo_exact(&p, &post, 0, &a, &budget()).unwrap().value();
        assert!((e - m).abs() < 1e-10);
        let prior = PolicyCot { params: &p, prompt: 0 };
        let e = elbo_exact(&p, &prior, 0, &a, &budget()).unwrap().value();
        let j = jensen_bound_exact(&p, 0, &a, &budget()).unwrap().value();
        assert!((e - j).abs() < 1e-12);
    }

    #[test]
    fn expected_single_gradient_matches_finite_differences() {
        let p = random_small(3);
        let a = vec![2, p.vocab().eoa()];
        let est = Estimator::JepoSingle(ControlVariate::LeaveOneOut);
        let g = expected_gradient(&est, &p, 0, &a, 2, &budget()).unwrap();
        let fd = finite_difference(&p, 1e-5, |q| Ok(jensen_bound_exact(q, 0, &a, &budget())?.value())).unwrap();
        assert!(relative_error(g.total(), &fd) < 1e-4);
    }

    #[test]
    fn budget_errors_are_explicit() {
        let shape = PolicyShape::new(4, 2, 4, 3, 1).unwrap();
        let p = PolicyParams::zeros(shape);
        let a = vec![p.vocab().eoa()];
        let est = Estimator::JepoSingle(ControlVariate::None);
        assert!(matches!(
            expected_gradient(&est, &p, 0, &a, 2, &budget()),
            Err(Error::BudgetExceeded { .. })
        ));
        let tight = EnumerationBudget { max_sequences: 10 };
        assert!(matches!(marginal_loglik(&p, 0, &a, &tight), Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn neg_infinite_bound_is_flagged() {
        let shape = PolicyShape::new(2, 1, 1, 1, 1).unwrap();
        let mut p = PolicyParams::zeros(shape);
        let init = shape.initial_context();
        p.row_mut(Phase::Answer, 0, init)[2] = f64::NEG_INFINITY;
        let a = eoa(&p);
        assert_eq!(jensen_bound_exact(&p, 0, &a, &budget()).unwrap(), BoundValue::NegInfinite);
    }

    #[test]
    fn deterministic_policy_has_zero_variance() {
        let shape = PolicyShape::new(2, 1, 2, 1, 1).unwrap();
        let mut p = PolicyParams::zeros(shape);
        for (i, l) in p.logits_mut().iter_mut().enumerate() {
            *l = if i % 3 == 2 { 0.0 } else { -1000.0 };
        }
        let a = eoa(&p);
        let est = Estimator::JepoSingle(ControlVariate::LeaveOneOut);
        let r = estimator_variance(&est, &p, 0, &a, 2, &VarianceConfig::new(1000, 1)).unwrap();
        assert_eq!(r.trace, 0.0);
    }

    #[test]
    fn variance_is_reproducible() {
        let p = random_small(4);
        let a = vec![1, p.vocab().eoa()];
        let cfg = VarianceConfig {
            resamples: 200,
            ..VarianceConfig::new(1000, 9)
        };
        let est = Estimator::VarReducedPg(ControlVariate::LeaveOneOut);
        let r1 = estimator_variance(&est, &p, 0, &a, 2, &cfg).unwrap();
        let r2 = estimator_variance(&est, &p, 0, &a, 2, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.ci_low <= r1.trace && r1.trace <= r1.ci_high);
    }

    #[test]
    fn tuple_odometer_visits_everything() {
        let mut seen = Vec::new();
        for_each_tuple(3, 2, |t| seen.push(t.to_vec()));
        assert_eq!(seen.len(), 9);
        assert_eq!(seen[0], vec![0, 0]);
        assert_eq!(seen[8], vec![2, 2]);
    }
}
