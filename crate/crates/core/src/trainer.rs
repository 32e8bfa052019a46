//! Training loop: batch assembly, loss masking, advantage normalization,
//! JEPO / RL / hybrid / SFT updates, KL regularization and metrics.
//!
//! Updates are ascent directions on the regularized objective. A metrics
//! record for step `t` is measured on the parameters before update `t`; the
//! run ends with a record for the final parameters, so `steps = 0` yields
//! exactly one record.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    format_advantages, jepo_multi_advantages, jepo_single_advantages, kl_reg_grad, leave_one_out_means,
    multi_sample_weights, ControlVariate, GradientVector, SampleBatch, Term,
};
use crate::numerics::{derive_rng, derive_seed, mean, population_std, std_error};
use crate::oracle::{
    jensen_bound_exact, kl_gradient_exact, marginal_loglik, multi_sample_bound, sampled_bound_values, BoundMode,
    BoundValue, EnumerationBudget,
};
use crate::policy::{sequence_kl, Generation, PolicyParams, PromptId, ReferencePolicy};
use crate::tasks::{score_generations, Regime, TaskSpec};

pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_BATCH: u64 = 2;
pub const STREAM_EVAL: u64 = 3;
pub const STREAM_PROXY: u64 = 4;

/// Floor applied to group standard deviations before dividing.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    JepoSingle,
    JepoMulti,
    Rl,
    Sft,
    Hybrid,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::JepoSingle => "jepo-single",
            Algorithm::JepoMulti => "jepo-multi",
            Algorithm::Rl => "rl",
            Algorithm::Sft => "sft",
            Algorithm::Hybrid => "hybrid",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

/// Prefactor of the CoT REINFORCE term of the JEPO update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReinforceScaling {
    /// `(1/n) sum_i`.
    Averaged,
    /// `sum_i`, the gradient of the multi-sample bound.
    Summed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlGradient {
    /// Full-generation REINFORCE estimate on the sampled batch.
    Reinforce,
    /// Exact enumeration over the generation space.
    Exact,
}

/// Sequence-level normalization of the CoT REINFORCE coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LengthNorm {
    None,
    /// `1 / |c_i|`.
    Cot,
    /// `1 / (|c_i| + |a*|)`.
    CotAndAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SftTarget {
    /// No-CoT when the CoT cap is 0, golden CoT otherwise.
    Auto,
    NoCot,
    GoldenCot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    /// Samples per prompt.
    pub n: usize,
    /// Prompts per update; all training prompts when at least their count.
    pub batch_prompts: usize,
    pub beta_kl: f64,
    pub beta_sup: f64,
    pub penalty_p: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub steps: usize,
    pub seed: u64,
    pub reinforce_scaling: ReinforceScaling,
    pub kl_gradient: KlGradient,
    pub length_norm: LengthNorm,
    pub sft_target: SftTarget,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::JepoMulti,
            n: 4,
            batch_prompts: 16,
            beta_kl: 1e-3,
            beta_sup: 1.0,
            penalty_p: 10.0,
            clip_lo: -1.0,
            clip_hi: 1.0,
            lr: 1e-2,
            optimizer: Optimizer::Sgd,
            steps: 100,
            seed: 0,
            reinforce_scaling: ReinforceScaling::Averaged,
            kl_gradient: KlGradient::Reinforce,
            length_norm: LengthNorm::None,
            sft_target: SftTarget::Auto,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.clip_lo.partial_cmp(&self.clip_hi) != Some(std::cmp::Ordering::Less) {
            return bad(format!("clip_lo {} must be below clip_hi {}", self.clip_lo, self.clip_hi));
        }
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if matches!(self.algorithm, Algorithm::Rl | Algorithm::Hybrid) && self.n < 2 {
            return bad(format!("{} needs n >= 2 for leave-one-out baselines", self.algorithm));
        }
        if self.batch_prompts == 0 {
            return bad("batch_prompts must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, v) in [
            ("beta_kl", self.beta_kl),
            ("beta_sup", self.beta_sup),
            ("penalty_p", self.penalty_p),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps.is_nan() || eps <= 0.0 {
                return bad("adam needs beta1, beta2 in [0, 1) and eps > 0".into());
            }
        }
        Ok(())
    }

    /// Rejects algorithm/regime combinations that cannot run.
    pub fn check_regime(&self, task: &TaskSpec) -> Result<()> {
        if matches!(self.algorithm, Algorithm::Rl | Algorithm::Hybrid) && task.regime == Regime::Unverifiable {
            return Err(Error::RegimeMismatch {
                algorithm: self.algorithm.to_string(),
                regime: task.regime.to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    Train,
    Test,
    All,
}

impl EvalSplit {
    pub fn prompts(self, task: &TaskSpec) -> Vec<PromptId> {
        match self {
            EvalSplit::Train => task.train_prompts.clone(),
            EvalSplit::Test => task.test_prompts.clone(),
            EvalSplit::All => task.prompts.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Evaluation cadence in steps; 0 evaluates only the first and final records.
    pub every: usize,
    pub split: EvalSplit,
    /// Samples per proxy-NLL bound evaluation.
    pub proxy_n: usize,
    /// Monte-Carlo trials per prompt for the proxy NLL.
    pub proxy_trials: usize,
    /// Generations per prompt for scoring.
    pub samples: usize,
    pub max_sequences: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            every: 10,
            split: EvalSplit::Train,
            proxy_n: 4,
            proxy_trials: 32,
            samples: 16,
            max_sequences: 100_000,
        }
    }
}

impl EvalSettings {
    pub fn budget(&self) -> EnumerationBudget {
        EnumerationBudget {
            max_sequences: self.max_sequences as u128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.proxy_n == 0 || self.proxy_trials == 0 || self.samples == 0 {
            return Err(Error::InvalidConfig(
                "eval proxy_n, proxy_trials and samples must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// `clip(A_i / max(std(A), 1e-6), lo, hi)` with the population std of the group.
pub fn normalize_advantages(advantages: &[f64], clip_lo: f64, clip_hi: f64) -> Result<Vec<f64>> {
    if advantages.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let std = population_std(advantages).max(STD_FLOOR);
    Ok(advantages.iter().map(|a| (a / std).clamp(clip_lo, clip_hi)).collect())
}

/// RL advantages `clip((r_i - mean_{j != i} r_j) / std(r), lo, hi)`.
pub fn rl_advantages(rewards: &[f64], clip_lo: f64, clip_hi: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let std = population_std(rewards).max(STD_FLOOR);
    Ok(rewards
        .iter()
        .zip(leave_one_out_means(rewards))
        .map(|(r, b)| ((r - b) / std).clamp(clip_lo, clip_hi))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    Jepo,
    Rl,
    Sft,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptBranch {
    pub prompt: PromptId,
    pub branch: Branch,
    /// Some format-valid generation got a positive training match.
    pub matched: bool,
}

/// Per-prompt details of one update.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptOutcome {
    pub prompt: PromptId,
    pub branch: Branch,
    pub matched: bool,
    pub generations: Vec<Generation>,
    /// Raw advantages of the format-valid generations for the selected loss.
    pub raw_advantages: Vec<f64>,
    pub normalized_advantages: Vec<f64>,
    pub gradient: GradientVector,
}

/// Ascent direction averaged over the batch prompts, plus per-prompt details.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    pub direction: GradientVector,
    pub prompts: Vec<PromptOutcome>,
}

fn sample_batch(params: &PolicyParams, task: &TaskSpec, prompt: PromptId, n: usize, step: usize, seed: u64) -> Result<SampleBatch> {
    let mut rng = derive_rng(seed, &[STREAM_TRAIN, step as u64, prompt as u64]);
    let gens = (0..n)
        .map(|_| params.sample_generation(prompt, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    SampleBatch::new(params, prompt, task.truth(prompt)?.to_vec(), gens)
}

fn length_factor(cfg: &TrainerConfig, g: &Generation, a_star_len: usize) -> f64 {
    match cfg.length_norm {
        LengthNorm::None => 1.0,
        LengthNorm::Cot => 1.0 / g.cot.len() as f64,
        LengthNorm::CotAndAnswer => 1.0 / (g.cot.len() + a_star_len) as f64,
    }
}

/// Gradient parts with the raw and normalized advantages behind them.
type BranchTerms = (Vec<(Term, Vec<f64>)>, Vec<f64>, Vec<f64>);

/// Valid positions and their sub-batch.
fn valid_subset(batch: &SampleBatch) -> Option<SampleBatch> {
    batch.format_valid()
}

fn jepo_terms(
    params: &PolicyParams,
    batch: &SampleBatch,
    cfg: &TrainerConfig,
    multi: bool,
) -> Result<BranchTerms> {
    let dim = params.num_params();
    let n = batch.len() as f64;
    let Some(valid) = valid_subset(batch) else {
        return Ok((Vec::new(), Vec::new(), Vec::new()));
    };
    let m = valid.len();
    let logps = &valid.logp_astar_given_c;
    let raw = if multi && m >= 2 {
        jepo_multi_advantages(logps, ControlVariate::LeaveOneOut)
    } else {
        jepo_single_advantages(logps, ControlVariate::LeaveOneOut)
    };
    let norm = normalize_advantages(&raw, cfg.clip_lo, cfg.clip_hi)?;
    let scale = match cfg.reinforce_scaling {
        ReinforceScaling::Averaged => 1.0 / n,
        ReinforceScaling::Summed => 1.0,
    };
    let mut reinforce = vec![0.0; dim];
    let mut supervised = vec![0.0; dim];
    let weights = if multi {
        multi_sample_weights(logps).into_iter().map(|w| w * m as f64 / n).collect()
    } else {
        vec![1.0 / n; m]
    };
    for ((g, a), w) in valid.generations.iter().zip(&norm).zip(&weights) {
        let c = a * scale * length_factor(cfg, g, batch.a_star.len());
        if c != 0.0 {
            params.accumulate_grad_cot(batch.prompt, &g.cot, c, &mut reinforce)?;
        }
        if cfg.beta_sup != 0.0 {
            params.accumulate_grad_answer(batch.prompt, &g.cot, &batch.a_star, cfg.beta_sup * w, &mut supervised)?;
        }
    }
    Ok((vec![(Term::Reinforce, reinforce), (Term::Supervised, supervised)], raw, norm))
}

fn rl_terms(
    params: &PolicyParams,
    task: &TaskSpec,
    batch: &SampleBatch,
    cfg: &TrainerConfig,
) -> Result<BranchTerms> {
    let dim = params.num_params();
    let n = batch.len() as f64;
    let Some(valid) = valid_subset(batch) else {
        return Ok((Vec::new(), Vec::new(), Vec::new()));
    };
    let rewards = valid
        .generations
        .iter()
        .map(|g| Ok(task.train_score(batch.prompt, &g.answer)?.unwrap_or(0.0)))
        .collect::<Result<Vec<f64>>>()?;
    let norm = rl_advantages(&rewards, cfg.clip_lo, cfg.clip_hi)?;
    let raw: Vec<f64> = rewards
        .iter()
        .zip(leave_one_out_means(&rewards))
        .map(|(r, b)| r - b)
        .collect();
    let mut cot = vec![0.0; dim];
    let mut answer = vec![0.0; dim];
    for (g, a) in valid.generations.iter().zip(&norm) {
        let c = a / n;
        if c != 0.0 {
            params.accumulate_grad_cot(batch.prompt, &g.cot, c * length_factor(cfg, g, batch.a_star.len()), &mut cot)?;
            params.accumulate_grad_answer(batch.prompt, &g.cot, &g.answer, c, &mut answer)?;
        }
    }
    Ok((vec![(Term::Reinforce, cot), (Term::Supervised, answer)], raw, norm))
}

fn shared_terms(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    batch: &SampleBatch,
    cfg: &TrainerConfig,
) -> Result<Vec<(Term, Vec<f64>)>> {
    let dim = params.num_params();
    let n = batch.len() as f64;
    let mut out = Vec::new();
    let raw = format_advantages(&batch.generations, cfg.penalty_p);
    if raw.iter().any(|a| *a != 0.0) {
        let norm = normalize_advantages(&raw, cfg.clip_lo, cfg.clip_hi)?;
        let mut format = vec![0.0; dim];
        for (g, a) in batch.generations.iter().zip(&norm) {
            if *a != 0.0 {
                params.accumulate_grad_cot(batch.prompt, &g.cot, a / n, &mut format)?;
            }
        }
        out.push((Term::Format, format));
    }
    if cfg.beta_kl > 0.0 {
        let kl = match cfg.kl_gradient {
            KlGradient::Reinforce => kl_reg_grad(params, reference, batch)?.into_total(),
            KlGradient::Exact => kl_gradient_exact(params, reference, batch.prompt, &EnumerationBudget::default())?,
        };
        out.push((Term::Kl, kl.into_iter().map(|v| -cfg.beta_kl * v).collect()));
    }
    Ok(out)
}

fn prompt_update(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    task: &TaskSpec,
    prompt: PromptId,
    cfg: &TrainerConfig,
    step: usize,
) -> Result<PromptOutcome> {
    let batch = sample_batch(params, task, prompt, cfg.n, step, cfg.seed)?;
    let matched = batch
        .generations
        .iter()
        .filter(|g| g.format_valid)
        .map(|g| task.train_score(prompt, &g.answer))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .any(|s| s.unwrap_or(0.0) > 0.0);
    let branch = match cfg.algorithm {
        Algorithm::JepoSingle | Algorithm::JepoMulti => Branch::Jepo,
        Algorithm::Rl => Branch::Rl,
        Algorithm::Hybrid if matched => Branch::Rl,
        Algorithm::Hybrid => Branch::Jepo,
        Algorithm::Sft => Branch::Sft,
    };
    let (mut parts, raw, norm) = match branch {
        Branch::Jepo => jepo_terms(params, &batch, cfg, cfg.algorithm != Algorithm::JepoSingle)?,
        Branch::Rl => rl_terms(params, task, &batch, cfg)?,
        Branch::Sft => (vec![(Term::Supervised, sft_gradient(params, task, prompt, cfg)?)], Vec::new(), Vec::new()),
    };
    if branch != Branch::Sft {
        parts.extend(shared_terms(params, reference, &batch, cfg)?);
    }
    Ok(PromptOutcome {
        prompt,
        branch,
        matched,
        generations: batch.generations,
        raw_advantages: raw,
        normalized_advantages: norm,
        gradient: GradientVector::from_parts(params.num_params(), parts, Vec::new()),
    })
}

/// `grad log pi(a*|x)` with the CoT disabled, or
/// `grad [log pi(c_gold|x) + log pi(a*|x,c_gold)]`.
pub fn sft_gradient(params: &PolicyParams, task: &TaskSpec, prompt: PromptId, cfg: &TrainerConfig) -> Result<Vec<f64>> {
    let shape = params.shape();
    let a_star = task.truth(prompt)?;
    let no_cot = vec![shape.vocab.eoc()];
    let cot = match cfg.sft_target {
        SftTarget::NoCot if shape.max_cot_len != 0 => {
            return Err(Error::InvalidConfig(
                "no-CoT SFT needs max_cot_len = 0".into(),
            ))
        }
        SftTarget::NoCot => &no_cot,
        SftTarget::Auto if shape.max_cot_len == 0 => &no_cot,
        SftTarget::Auto | SftTarget::GoldenCot => task
            .golden_cots
            .get(prompt)
            .ok_or(Error::UnknownPrompt {
                prompt,
                num_prompts: task.golden_cots.len(),
            })?,
    };
    let mut out = params.grad_logprob(prompt, cot, None)?;
    params.accumulate_grad_answer(prompt, cot, a_star, 1.0, &mut out)?;
    Ok(out)
}

fn batch_update(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    task: &TaskSpec,
    prompts: &[PromptId],
    cfg: &TrainerConfig,
    step: usize,
) -> Result<UpdateOutcome> {
    if prompts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let outcomes = prompts
        .par_iter()
        .map(|&p| prompt_update(params, reference, task, p, cfg, step))
        .collect::<Result<Vec<_>>>()?;
    let mut direction = GradientVector::zeros(params.num_params());
    let scale = 1.0 / prompts.len() as f64;
    for o in &outcomes {
        direction.add_scaled(&o.gradient, scale);
    }
    Ok(UpdateOutcome {
        direction,
        prompts: outcomes,
    })
}

fn require(cfg: &TrainerConfig, allowed: &[Algorithm], what: &str) -> Result<()> {
    if !allowed.contains(&cfg.algorithm) {
        return Err(Error::InvalidConfig(format!(
            "{what} cannot run algorithm {}",
            cfg.algorithm
        )));
    }
    cfg.validate()
}

/// JEPO ascent direction for one batch of prompts.
pub fn jepo_update(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    task: &TaskSpec,
    prompts: &[PromptId],
    cfg: &TrainerConfig,
    step: usize,
) -> Result<UpdateOutcome> {
    require(cfg, &[Algorithm::JepoSingle, Algorithm::JepoMulti], "jepo_update")?;
    batch_update(params, reference, task, prompts, cfg, step)
}

/// Online RL ascent direction with leave-one-out baselines.
pub fn rl_update(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    task: &TaskSpec,
    prompts: &[PromptId],
    cfg: &TrainerConfig,
    step: usize,
) -> Result<UpdateOutcome> {
    require(cfg, &[Algorithm::Rl], "rl_update")?;
    cfg.check_regime(task)?;
    batch_update(params, reference, task, prompts, cfg, step)
}

/// Per prompt: RL when some valid generation matches, JEPO otherwise.
pub fn hybrid_update(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    task: &TaskSpec,
    prompts: &[PromptId],
    cfg: &TrainerConfig,
    step: usize,
) -> Result<UpdateOutcome> {
    require(cfg, &[Algorithm::Hybrid], "hybrid_update")?;
    cfg.check_regime(task)?;
    batch_update(params, reference, task, prompts, cfg, step)
}

/// Supervised ascent direction on `(x, a*)` or `(x, c_gold, a*)` pairs.
pub fn sft_update(params: &PolicyParams, task: &TaskSpec, prompts: &[PromptId], cfg: &TrainerConfig) -> Result<Vec<f64>> {
    require(cfg, &[Algorithm::Sft], "sft_update")?;
    if prompts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut out = vec![0.0; params.num_params()];
    let scale = 1.0 / prompts.len() as f64;
    for &p in prompts {
        for (o, g) in out.iter_mut().zip(sft_gradient(params, task, p, cfg)?) {
            *o += scale * g;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProxyNll {
    pub mc: f64,
    pub std_error: f64,
    /// Exact counterpart when the tuple space is enumerable.
    pub exact: Option<f64>,
}

/// `-E[log((1/n) sum_i pi(a*|x,c_i))]` averaged over prompts.
pub fn proxy_nll(
    params: &PolicyParams,
    task: &TaskSpec,
    prompts: &[PromptId],
    n: usize,
    trials: usize,
    seed: u64,
    budget: &EnumerationBudget,
) -> Result<ProxyNll> {
    if prompts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut per_prompt = Vec::with_capacity(prompts.len());
    let mut all = Vec::new();
    let mut exact = Some(0.0);
    for &p in prompts {
        let a = task.truth(p)?;
        let values = sampled_bound_values(params, p, a, n, trials, derive_seed(seed, &[p as u64]))?;
        per_prompt.push(-mean(&values));
        all.extend(values.iter().map(|v| -v));
        exact = match (exact, multi_sample_bound(params, p, a, n, BoundMode::Exact, budget)) {
            (Some(acc), Ok(b)) => Some(acc - b.value.value()),
            _ => None,
        };
    }
    let k = prompts.len() as f64;
    Ok(ProxyNll {
        mc: mean(&per_prompt),
        std_error: std_error(&all),
        exact: exact.map(|e| e / k),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdvantageStats {
    pub raw_mean: f64,
    pub raw_std: f64,
    pub normalized_min: f64,
    pub normalized_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean training match score (oracle match when there is no training verifier).
    pub train_reward: f64,
    pub kl_to_ref: f64,
    pub jensen_bound: Option<BoundValue>,
    pub marginal_loglik: Option<f64>,
    pub proxy_nll: Option<f64>,
    pub proxy_nll_std_error: Option<f64>,
    pub proxy_nll_exact: Option<f64>,
    pub format_valid_rate: f64,
    pub branch_jepo_fraction: Option<f64>,
    pub eval_combined: Option<f64>,
    pub eval_unverifiable_combined: Option<f64>,
    pub advantages: Option<AdvantageStats>,
    pub branches: Vec<PromptBranch>,
}

pub const METRICS_HEADER: &str =
    "step,train_reward,kl_to_ref,jensen_bound,marginal_loglik,proxy_nll,format_valid_rate,branch_jepo_fraction";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| if x == f64::NEG_INFINITY { "-inf".to_string() } else { x.to_string() })
        .unwrap_or_default()
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.train_reward,
            self.kl_to_ref,
            fmt_opt(self.jensen_bound.map(BoundValue::value)),
            fmt_opt(self.marginal_loglik),
            fmt_opt(self.proxy_nll),
            self.format_valid_rate,
            fmt_opt(self.branch_jepo_fraction),
        )
    }
}

/// Oracle and sampling measurements on a prompt set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub jensen_bound: Option<BoundValue>,
    pub marginal_loglik: Option<f64>,
    pub proxy: ProxyNll,
    pub combined: f64,
    pub unverifiable_combined: Option<f64>,
}

/// Exact bounds (when enumerable), proxy NLL and combined scores.
pub fn evaluate_prompts(
    params: &PolicyParams,
    task: &TaskSpec,
    prompts: &[PromptId],
    settings: &EvalSettings,
    seed: u64,
    step: usize,
) -> Result<EvalMetrics> {
    if prompts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let budget = settings.budget();
    let mut jensen = Some(0.0);
    let mut neg_inf = false;
    let mut marginal = Some(0.0);
    for &p in prompts {
        let a = task.truth(p)?;
        jensen = match (jensen, jensen_bound_exact(params, p, a, &budget)) {
            (Some(acc), Ok(BoundValue::Finite(v))) => Some(acc + v),
            (Some(acc), Ok(BoundValue::NegInfinite)) => {
                neg_inf = true;
                Some(acc)
            }
            (_, Err(Error::BudgetExceeded { .. })) | (None, _) => None,
            (_, Err(e)) => return Err(e),
        };
        marginal = match (marginal, marginal_loglik(params, p, a, &budget)) {
            (Some(acc), Ok(v)) => Some(acc + v),
            (_, Err(Error::BudgetExceeded { .. })) | (None, _) => None,
            (_, Err(e)) => return Err(e),
        };
    }
    let k = prompts.len() as f64;
    let jensen_bound = jensen.map(|j| if neg_inf { BoundValue::NegInfinite } else { BoundValue::Finite(j / k) });
    let proxy = proxy_nll(
        params,
        task,
        prompts,
        settings.proxy_n,
        settings.proxy_trials,
        derive_seed(seed, &[STREAM_PROXY, step as u64]),
        &budget,
    )?;
    let gens = prompts
        .par_iter()
        .map(|&p| {
            let mut rng = derive_rng(seed, &[STREAM_EVAL, step as u64, p as u64]);
            (0..settings.samples)
                .map(|_| params.sample_generation(p, &mut rng))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    let report = score_generations(task, prompts, &gens)?;
    Ok(EvalMetrics {
        jensen_bound,
        marginal_loglik: marginal.map(|m| m / k),
        proxy,
        combined: report.all.r_combined,
        unverifiable_combined: report.unverifiable.map(|u| u.r_combined),
    })
}

enum OptimizerState {
    Sgd,
    Adam {
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerState {
    fn new(opt: Optimizer, dim: usize) -> Self {
        match opt {
            Optimizer::Sgd => OptimizerState::Sgd,
            Optimizer::Adam { beta1, beta2, eps } => OptimizerState::Adam {
                m: vec![0.0; dim],
                v: vec![0.0; dim],
                t: 0,
                beta1,
                beta2,
                eps,
            },
        }
    }

    /// Ascent step `theta += lr * step(direction)`.
    fn apply(&mut self, params: &mut PolicyParams, direction: &[f64], lr: f64) {
        match self {
            OptimizerState::Sgd => {
                for (p, d) in params.logits_mut().iter_mut().zip(direction) {
                    *p += lr * d;
                }
            }
            OptimizerState::Adam {
                m,
                v,
                t,
                beta1,
                beta2,
                eps,
            } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (((p, d), mi), vi) in params.logits_mut().iter_mut().zip(direction).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = *beta1 * *mi + (1.0 - *beta1) * d;
                    *vi = *beta2 * *vi + (1.0 - *beta2) * d * d;
                    *p += lr * (*mi / c1) / ((*vi / c2).sqrt() + *eps);
                }
            }
        }
    }
}

/// Stateful training loop over a task.
pub struct Trainer {
    config: TrainerConfig,
    eval: EvalSettings,
    task: TaskSpec,
    params: PolicyParams,
    reference: ReferencePolicy,
    optimizer: OptimizerState,
    step: usize,
}

impl Trainer {
    /// The reference policy is a frozen copy of `init`.
    pub fn new(task: TaskSpec, init: PolicyParams, config: TrainerConfig, eval: EvalSettings) -> Result<Self> {
        config.validate()?;
        eval.validate()?;
        config.check_regime(&task)?;
        task.validate()?;
        if *init.shape() != task.policy_shape()? {
            return Err(Error::ShapeMismatch(format!(
                "policy shape {:?} does not match task shape {:?}",
                init.shape(),
                task.policy_shape()?
            )));
        }
        if task.train_prompts.is_empty() {
            return Err(Error::InvalidConfig("task has no training prompts".into()));
        }
        if config.algorithm == Algorithm::Sft {
            sft_gradient(&init, &task, task.train_prompts[0], &config)?;
        }
        if config.algorithm == Algorithm::JepoMulti && config.n < 2 {
            return Err(Error::InvalidConfig("jepo-multi needs n >= 2; use jepo-single for n = 1".into()));
        }
        let optimizer = OptimizerState::new(config.optimizer, init.num_params());
        Ok(Self {
            reference: ReferencePolicy::new(init.clone()),
            params: init,
            config,
            eval,
            task,
            optimizer,
            step: 0,
        })
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn reference(&self) -> &ReferencePolicy {
        &self.reference
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Prompts used by update `step`.
    pub fn batch_prompts(&self, step: usize) -> Vec<PromptId> {
        let train = &self.task.train_prompts;
        if self.config.batch_prompts >= train.len() {
            return train.clone();
        }
        let mut rng = derive_rng(self.config.seed, &[STREAM_BATCH, step as u64]);
        let mut picked: Vec<PromptId> = rand::seq::index::sample(&mut rng, train.len(), self.config.batch_prompts)
            .into_iter()
            .map(|i| train[i])
            .collect();
        picked.sort_unstable();
        picked
    }

    fn is_eval_step(&self, step: usize, last: bool) -> bool {
        last || step == 0 || (self.eval.every > 0 && step.is_multiple_of(self.eval.every))
    }

    fn kl_to_ref(&self, prompts: &[PromptId]) -> Result<f64> {
        let kls = prompts
            .iter()
            .map(|&p| sequence_kl(&self.params, &self.reference, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean(&kls))
    }

    fn record(&self, step: usize, prompts: &[PromptId], gens: &[Generation], update: Option<&UpdateOutcome>, last: bool) -> Result<MetricsRecord> {
        let rewards = gens
            .iter()
            .map(|g| match self.task.train_score(g.prompt, &g.answer)? {
                Some(r) => Ok(r),
                None => self.task.eval_score(g.prompt, &g.answer),
            })
            .collect::<Result<Vec<_>>>()?;
        let valid = gens.iter().filter(|g| g.format_valid).count() as f64 / gens.len() as f64;
        let mut rec = MetricsRecord {
            step,
            train_reward: mean(&rewards),
            kl_to_ref: self.kl_to_ref(prompts)?,
            jensen_bound: None,
            marginal_loglik: None,
            proxy_nll: None,
            proxy_nll_std_error: None,
            proxy_nll_exact: None,
            format_valid_rate: valid,
            branch_jepo_fraction: None,
            eval_combined: None,
            eval_unverifiable_combined: None,
            advantages: None,
            branches: Vec::new(),
        };
        if let Some(u) = update {
            if self.config.algorithm != Algorithm::Sft {
                let jepo = u.prompts.iter().filter(|p| p.branch == Branch::Jepo).count();
                rec.branch_jepo_fraction = Some(jepo as f64 / u.prompts.len() as f64);
            }
            rec.branches = u
                .prompts
                .iter()
                .map(|p| PromptBranch {
                    prompt: p.prompt,
                    branch: p.branch,
                    matched: p.matched,
                })
                .collect();
            let raw: Vec<f64> = u.prompts.iter().flat_map(|p| p.raw_advantages.iter().copied()).collect();
            let norm: Vec<f64> = u.prompts.iter().flat_map(|p| p.normalized_advantages.iter().copied()).collect();
            if !raw.is_empty() {
                rec.advantages = Some(AdvantageStats {
                    raw_mean: mean(&raw),
                    raw_std: population_std(&raw),
                    normalized_min: norm.iter().copied().fold(f64::INFINITY, f64::min),
                    normalized_max: norm.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                });
            }
        }
        if self.is_eval_step(step, last) {
            let prompts = self.eval.split.prompts(&self.task);
            if !prompts.is_empty() {
                let ev = evaluate_prompts(&self.params, &self.task, &prompts, &self.eval, self.config.seed, step)?;
                rec.jensen_bound = ev.jensen_bound;
                rec.marginal_loglik = ev.marginal_loglik;
                rec.proxy_nll = Some(ev.proxy.mc);
                rec.proxy_nll_std_error = Some(ev.proxy.std_error);
                rec.proxy_nll_exact = ev.proxy.exact;
                rec.eval_combined = Some(ev.combined);
                rec.eval_unverifiable_combined = ev.unverifiable_combined;
            }
        }
        Ok(rec)
    }

    /// Measures the current parameters, applies one update and returns the record.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let step = self.step;
        let prompts = self.batch_prompts(step);
        let update = batch_update(&self.params, &self.reference, &self.task, &prompts, &self.config, step)?;
        let gens: Vec<Generation> = update.prompts.iter().flat_map(|p| p.generations.iter().cloned()).collect();
        let rec = self.record(step, &prompts, &gens, Some(&update), false)?;
        if !update.direction.is_finite() {
            return Err(Error::InvalidConfig(format!("non-finite update at step {step}")));
        }
        self.optimizer.apply(&mut self.params, update.direction.total(), self.config.lr);
        self.step += 1;
        Ok(rec)
    }

    /// Record for the current parameters without updating them.
    pub fn evaluate(&self) -> Result<MetricsRecord> {
        let step = self.step;
        let prompts = self.batch_prompts(step);
        let mut gens = Vec::new();
        for &p in &prompts {
            gens.extend(sample_batch(&self.params, &self.task, p, self.config.n, step, self.config.seed)?.generations);
        }
        self.record(step, &prompts, &gens, None, true)
    }

    /// Runs all configured steps, then the final record.
    pub fn run(&mut self, mut sink: impl FnMut(&MetricsRecord, &PolicyParams) -> Result<()>) -> Result<MetricsRecord> {
        while self.step < self.config.steps {
            let rec = self.step()?;
            sink(&rec, &self.params)?;
        }
        let last = self.evaluate()?;
        sink(&last, &self.params)?;
        Ok(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{make_semi_verifiable_task, make_unverifiable_task, make_verifiable_task, TaskSizes};

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_advantages(&[2.0, -2.0], -1.0, 1.0).unwrap(), vec![1.0, -1.0]);
        assert_eq!(normalize_advantages(&[0.0, 0.0], -1.0, 1.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(normalize_advantages(&[5.0, 1.0], -1.0, 1.0).unwrap(), vec![1.0, 0.5]);
        assert!(normalize_advantages(&[], -1.0, 1.0).is_err());
    }

    #[test]
    fn rl_leave_one_out_example() {
        let r = [1.0, 1.0, 0.0, 0.0];
        let raw: Vec<f64> = r.iter().zip(leave_one_out_means(&r)).map(|(a, b)| a - b).collect();
        for (x, e) in raw.iter().zip([2.0 / 3.0, 2.0 / 3.0, -2.0 / 3.0, -2.0 / 3.0]) {
            assert!((x - e).abs() < 1e-15);
        }
        let a = rl_advantages(&r, -1.0, 1.0).unwrap();
        assert!(a.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainerConfig::default();
        c.validate().unwrap();
        c.clip_lo = 1.0;
        assert!(c.validate().is_err());
        let c = TrainerConfig {
            algorithm: Algorithm::Rl,
            n: 1,
            ..TrainerConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn rl_on_unverifiable_task_is_refused() {
        let task = make_unverifiable_task(0, TaskSizes::default()).unwrap();
        let init = PolicyParams::zeros(task.policy_shape().unwrap());
        let cfg = TrainerConfig {
            algorithm: Algorithm::Rl,
            ..TrainerConfig::default()
        };
        assert!(matches!(
            Trainer::new(task, init, cfg, EvalSettings::default()),
            Err(Error::RegimeMismatch { .. })
        ));
    }

    #[test]
    fn zero_steps_yield_one_record_with_zero_kl() {
        let task = make_verifiable_task(0, TaskSizes::default()).unwrap();
        let init = PolicyParams::zeros(task.policy_shape().unwrap());
        let cfg = TrainerConfig {
            steps: 0,
            ..TrainerConfig::default()
        };
        let mut t = Trainer::new(task, init, cfg, EvalSettings::default()).unwrap();
        let mut recs = Vec::new();
        t.run(|r, _| {
            recs.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].step, 0);
        assert_eq!(recs[0].kl_to_ref, 0.0);
        assert!(recs[0].marginal_loglik.is_some());
    }

    #[test]
    fn hybrid_branches_follow_matches() {
        let task = make_semi_verifiable_task(1, TaskSizes::default(), 0.4).unwrap();
        let params = PolicyParams::zeros(task.policy_shape().unwrap());
        let reference = ReferencePolicy::new(params.clone());
        let cfg = TrainerConfig {
            algorithm: Algorithm::Hybrid,
            n: 8,
            ..TrainerConfig::default()
        };
        let prompts = task.train_prompts.clone();
        let u = hybrid_update(&params, &reference, &task, &prompts, &cfg, 0).unwrap();
        for p in &u.prompts {
            let hit = p
                .generations
                .iter()
                .any(|g| g.format_valid && task.train_score(p.prompt, &g.answer).unwrap() == Some(1.0));
            assert_eq!(hit, p.matched);
            assert_eq!(p.branch, if hit { Branch::Rl } else { Branch::Jepo });
        }
    }

    #[test]
    fn normalized_advantages_stay_clipped() {
        let task = make_verifiable_task(2, TaskSizes::default()).unwrap();
        let mut rng = crate::numerics::derive_rng(0, &[]);
        let params = PolicyParams::random(task.policy_shape().unwrap(), 2.0, &mut rng);
        let reference = ReferencePolicy::new(params.clone());
        let cfg = TrainerConfig::default();
        let u = jepo_update(&params, &reference, &task, &task.train_prompts, &cfg, 0).unwrap();
        for p in &u.prompts {
            assert!(p.normalized_advantages.iter().all(|a| (-1.0..=1.0).contains(a)));
        }
    }
}
