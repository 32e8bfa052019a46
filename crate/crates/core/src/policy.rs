//! Order-k tabular softmax policies over token sequences.
//!
//! A generation is a chain-of-thought `c` (ordinary tokens closed by `eoc`)
//! followed by an answer `a` (ordinary tokens closed by `eoa`). Each phase has
//! its own logits table keyed by `(prompt, last k tokens)`. The answer phase
//! starts from the context left by the chain-of-thought body, so the answer
//! head sees the tail of `c`.
//!
//! Sequences are finite: the chain-of-thought may hold at most `max_cot_len`
//! ordinary tokens and the answer at most `max_ans_len`. When a phase reaches
//! its cap the terminator is forced; forced terminators carry log-probability
//! zero and no gradient. A forced `eoc` marks the generation as format-invalid.
//! With `max_cot_len == 0` the chain-of-thought phase is disabled entirely and
//! every generation uses the (valid) empty chain `[eoc]`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax_at, log_softmax_into, softmax_into};

pub type Token = u32;
pub type PromptId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidVocab { size });
        }
        Ok(Self { size })
    }

    /// Number of ordinary tokens; they are `0..size`.
    pub fn size(&self) -> usize {
        self.size
    }

    /// End-of-chain-of-thought marker.
    pub fn eoc(&self) -> Token {
        self.size as Token
    }

    /// End-of-answer marker.
    pub fn eoa(&self) -> Token {
        self.size as Token + 1
    }

    /// Padding token used to fill contexts shorter than `k`. Never emitted.
    pub fn bos(&self) -> Token {
        self.size as Token + 2
    }

    pub fn is_ordinary(&self, t: Token) -> bool {
        (t as usize) < self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Cot,
    Answer,
}

/// Static layout of a policy: vocabulary, context order, length caps and the
/// number of prompts with their own tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub vocab: Vocab,
    pub context_order: usize,
    pub max_cot_len: usize,
    pub max_ans_len: usize,
    pub num_prompts: usize,
}

impl PolicyShape {
    pub fn new(
        vocab_size: usize,
        context_order: usize,
        max_cot_len: usize,
        max_ans_len: usize,
        num_prompts: usize,
    ) -> Result<Self> {
        let vocab = Vocab::new(vocab_size)?;
        if num_prompts == 0 {
            return Err(Error::InvalidShape("need at least one prompt".into()));
        }
        if context_order > 6 {
            return Err(Error::InvalidShape(format!(
                "context order {context_order} is too large for tabular storage"
            )));
        }
        let shape = Self {
            vocab,
            context_order,
            max_cot_len,
            max_ans_len,
            num_prompts,
        };
        if shape.table_len() > 50_000_000 {
            return Err(Error::InvalidShape(format!(
                "tables would hold {} entries",
                shape.table_len()
            )));
        }
        Ok(shape)
    }

    /// Logits per row: ordinary tokens plus the phase terminator (last column).
    pub fn row_width(&self) -> usize {
        self.vocab.size() + 1
    }

    /// Context slots hold an ordinary token or the padding token.
    fn context_base(&self) -> usize {
        self.vocab.size() + 1
    }

    pub fn contexts_per_prompt(&self) -> usize {
        self.context_base().pow(self.context_order as u32)
    }

    /// Entries in one phase table.
    pub fn table_len(&self) -> usize {
        self.num_prompts * self.contexts_per_prompt() * self.row_width()
    }

    /// Length of the flat parameter vector (chain-of-thought table first).
    pub fn num_params(&self) -> usize {
        2 * self.table_len()
    }

    /// Context with every slot set to the padding token.
    pub fn initial_context(&self) -> usize {
        self.contexts_per_prompt() - 1
    }

    /// Shifts an ordinary token into a context.
    pub fn push_context(&self, ctx: usize, token: Token) -> usize {
        debug_assert!(self.vocab.is_ordinary(token));
        (ctx * self.context_base() + token as usize) % self.contexts_per_prompt()
    }

    /// Context after consuming a history of ordinary tokens from the start.
    pub fn context_after(&self, history: &[Token]) -> usize {
        history
            .iter()
            .fold(self.initial_context(), |ctx, &t| self.push_context(ctx, t))
    }

    /// Offset of a row in the flat parameter vector.
    pub fn row_offset(&self, phase: Phase, prompt: PromptId, ctx: usize) -> usize {
        let base = match phase {
            Phase::Cot => 0,
            Phase::Answer => self.table_len(),
        };
        base + (prompt * self.contexts_per_prompt() + ctx) * self.row_width()
    }

    pub fn terminator(&self, phase: Phase) -> Token {
        match phase {
            Phase::Cot => self.vocab.eoc(),
            Phase::Answer => self.vocab.eoa(),
        }
    }

    pub fn max_len(&self, phase: Phase) -> usize {
        match phase {
            Phase::Cot => self.max_cot_len,
            Phase::Answer => self.max_ans_len,
        }
    }

    fn space_size(&self, max_len: usize) -> u128 {
        let v = self.vocab.size() as u128;
        let mut total: u128 = 0;
        let mut term: u128 = 1;
        for _ in 0..=max_len {
            total = total.saturating_add(term);
            term = term.saturating_mul(v);
        }
        total
    }

    /// Number of distinct chain-of-thought sequences.
    pub fn cot_space_size(&self) -> u128 {
        if self.max_cot_len == 0 {
            1
        } else {
            self.space_size(self.max_cot_len)
        }
    }

    pub fn answer_space_size(&self) -> u128 {
        self.space_size(self.max_ans_len)
    }

    pub fn generation_space_size(&self) -> u128 {
        self.cot_space_size()
            .saturating_mul(self.answer_space_size())
    }

    fn space(&self, max_len: usize, terminator: Token) -> Vec<Vec<Token>> {
        let v = self.vocab.size() as Token;
        let mut out = vec![vec![terminator]];
        let mut layer: Vec<Vec<Token>> = vec![Vec::new()];
        for _ in 0..max_len {
            let mut next = Vec::with_capacity(layer.len() * v as usize);
            for body in &layer {
                for t in 0..v {
                    let mut b = body.clone();
                    b.push(t);
                    next.push(b);
                }
            }
            out.extend(next.iter().map(|b| {
                let mut s = b.clone();
                s.push(terminator);
                s
            }));
            layer = next;
        }
        out
    }

    /// Every chain-of-thought sequence, shortest first.
    pub fn cot_space(&self) -> Vec<Vec<Token>> {
        self.space(self.max_cot_len, self.vocab.eoc())
    }

    /// Every answer sequence, shortest first.
    pub fn answer_space(&self) -> Vec<Vec<Token>> {
        self.space(self.max_ans_len, self.vocab.eoa())
    }

    /// Strips and checks the terminator of a phase sequence, returning the body.
    pub fn split_body<'a>(&self, phase: Phase, seq: &'a [Token]) -> Result<&'a [Token]> {
        let term = self.terminator(phase);
        let (last, body) = seq
            .split_last()
            .ok_or_else(|| Error::MalformedSequence(format!("empty {phase:?} sequence")))?;
        if *last != term {
            return Err(Error::MalformedSequence(format!(
                "{phase:?} sequence {seq:?} does not end with terminator {term}"
            )));
        }
        if let Some(bad) = body.iter().find(|&&t| !self.vocab.is_ordinary(t)) {
            return Err(Error::MalformedSequence(format!(
                "{phase:?} sequence {seq:?} contains non-ordinary token {bad} before its end"
            )));
        }
        if body.len() > self.max_len(phase) {
            return Err(Error::MalformedSequence(format!(
                "{phase:?} sequence has {} tokens, cap is {}",
                body.len(),
                self.max_len(phase)
            )));
        }
        Ok(body)
    }

    /// True iff the chain-of-thought ended with a sampled (not forced) `eoc`.
    pub fn is_format_valid(&self, cot: &[Token]) -> bool {
        match self.split_body(Phase::Cot, cot) {
            Ok(body) => self.max_cot_len == 0 || body.len() < self.max_cot_len,
            Err(_) => false,
        }
    }

    pub fn check_prompt(&self, prompt: PromptId) -> Result<()> {
        if prompt >= self.num_prompts {
            return Err(Error::UnknownPrompt {
                prompt,
                num_prompts: self.num_prompts,
            });
        }
        Ok(())
    }
}

/// A sampled `(chain-of-thought, answer)` pair with cached log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub prompt: PromptId,
    pub cot: Vec<Token>,
    pub answer: Vec<Token>,
    pub format_valid: bool,
    pub logp_cot: f64,
    pub logp_answer: f64,
}

impl Generation {
    pub fn logp(&self) -> f64 {
        self.logp_cot + self.logp_answer
    }
}

/// Policy parameters: both logits tables in one flat vector, chain-of-thought
/// table first, each row-major over `(prompt, context, token)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: PolicyShape,
    logits: Vec<f64>,
}

impl PolicyParams {
    /// Uniform policy (all logits zero).
    pub fn zeros(shape: PolicyShape) -> Self {
        Self {
            shape,
            logits: vec![0.0; shape.num_params()],
        }
    }

    /// Logits drawn i.i.d. from `N(0, scale^2)`.
    pub fn random<R: Rng + ?Sized>(shape: PolicyShape, scale: f64, rng: &mut R) -> Self {
        let logits = (0..shape.num_params())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
            .collect();
        Self { shape, logits }
    }

    pub fn from_logits(shape: PolicyShape, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != shape.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} logits, got {}",
                shape.num_params(),
                logits.len()
            )));
        }
        Ok(Self { shape, logits })
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn vocab(&self) -> Vocab {
        self.shape.vocab
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn row(&self, phase: Phase, prompt: PromptId, ctx: usize) -> &[f64] {
        let off = self.shape.row_offset(phase, prompt, ctx);
        &self.logits[off..off + self.shape.row_width()]
    }

    pub fn row_mut(&mut self, phase: Phase, prompt: PromptId, ctx: usize) -> &mut [f64] {
        let off = self.shape.row_offset(phase, prompt, ctx);
        let w = self.shape.row_width();
        &mut self.logits[off..off + w]
    }

    pub fn ensure_same_shape(&self, other: &PolicyParams) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Visits every modeled (non-forced) step of one phase as
    /// `(row offset, chosen column)` and returns the context after the body.
    fn walk(
        &self,
        phase: Phase,
        prompt: PromptId,
        start_ctx: usize,
        body: &[Token],
        mut visit: impl FnMut(usize, usize),
    ) -> usize {
        let shape = &self.shape;
        let mut ctx = start_ctx;
        for &t in body {
            visit(shape.row_offset(phase, prompt, ctx), t as usize);
            ctx = shape.push_context(ctx, t);
        }
        let cap = shape.max_len(phase);
        // With the chain-of-thought disabled there is no modeled step at all.
        let disabled = phase == Phase::Cot && cap == 0;
        if body.len() < cap && !disabled {
            visit(shape.row_offset(phase, prompt, ctx), shape.vocab.size());
        }
        ctx
    }

    fn phase_logprob(&self, phase: Phase, prompt: PromptId, start_ctx: usize, body: &[Token]) -> (f64, usize) {
        let w = self.shape.row_width();
        let mut total = 0.0;
        let end_ctx = self.walk(phase, prompt, start_ctx, body, |off, col| {
            total += log_softmax_at(&self.logits[off..off + w], col);
        });
        (total, end_ctx)
    }

    fn check_cot<'a>(&self, prompt: PromptId, cot: &'a [Token]) -> Result<&'a [Token]> {
        self.shape.check_prompt(prompt)?;
        let body = self.shape.split_body(Phase::Cot, cot)?;
        if self.shape.max_cot_len == 0 && !body.is_empty() {
            return Err(Error::MalformedSequence(
                "chain-of-thought is disabled but sequence has a body".into(),
            ));
        }
        Ok(body)
    }

    /// `log pi(c | x)`: per-sequence sum of token log-probabilities.
    pub fn logprob_cot(&self, prompt: PromptId, cot: &[Token]) -> Result<f64> {
        let body = self.check_cot(prompt, cot)?;
        Ok(self
            .phase_logprob(Phase::Cot, prompt, self.shape.initial_context(), body)
            .0)
    }

    /// `log pi(a | x, c)`; the answer context is seeded from the tail of `c`.
    pub fn logprob_answer(&self, prompt: PromptId, cot: &[Token], answer: &[Token]) -> Result<f64> {
        let cot_body = self.check_cot(prompt, cot)?;
        let ans_body = self.shape.split_body(Phase::Answer, answer)?;
        let ctx = self.shape.context_after(cot_body);
        Ok(self.phase_logprob(Phase::Answer, prompt, ctx, ans_body).0)
    }

    /// `log pi(c, a | x)`.
    pub fn logprob_generation(&self, prompt: PromptId, cot: &[Token], answer: &[Token]) -> Result<f64> {
        Ok(self.logprob_cot(prompt, cot)? + self.logprob_answer(prompt, cot, answer)?)
    }

    fn accumulate_phase_grad(
        &self,
        phase: Phase,
        prompt: PromptId,
        start_ctx: usize,
        body: &[Token],
        scale: f64,
        out: &mut [f64],
    ) {
        let w = self.shape.row_width();
        let mut probs = vec![0.0; w];
        self.walk(phase, prompt, start_ctx, body, |off, col| {
            softmax_into(&self.logits[off..off + w], &mut probs);
            for (j, p) in probs.iter().enumerate() {
                let indicator = if j == col { 1.0 } else { 0.0 };
                out[off + j] += scale * (indicator - p);
            }
        });
    }

    /// `out += scale * grad log pi(c | x)`.
    pub fn accumulate_grad_cot(&self, prompt: PromptId, cot: &[Token], scale: f64, out: &mut [f64]) -> Result<()> {
        self.check_out(out)?;
        let body = self.check_cot(prompt, cot)?;
        self.accumulate_phase_grad(Phase::Cot, prompt, self.shape.initial_context(), body, scale, out);
        Ok(())
    }

    /// `out += scale * grad log pi(a | x, c)`.
    pub fn accumulate_grad_answer(
        &self,
        prompt: PromptId,
        cot: &[Token],
        answer: &[Token],
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_out(out)?;
        let cot_body = self.check_cot(prompt, cot)?;
        let ans_body = self.shape.split_body(Phase::Answer, answer)?;
        let ctx = self.shape.context_after(cot_body);
        self.accumulate_phase_grad(Phase::Answer, prompt, ctx, ans_body, scale, out);
        Ok(())
    }

    fn check_out(&self, out: &[f64]) -> Result<()> {
        if out.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "gradient buffer has {} entries, policy has {}",
                out.len(),
                self.num_params()
            )));
        }
        Ok(())
    }

    /// Dense `grad log pi(c | x)` when `answer` is `None`, otherwise
    /// `grad log pi(a | x, c)`.
    pub fn grad_logprob(&self, prompt: PromptId, cot: &[Token], answer: Option<&[Token]>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.num_params()];
        match answer {
            None => self.accumulate_grad_cot(prompt, cot, 1.0, &mut out)?,
            Some(a) => self.accumulate_grad_answer(prompt, cot, a, 1.0, &mut out)?,
        }
        Ok(out)
    }

    /// Samples one phase; returns `(sequence, log-prob, terminated without forcing, end context)`.
    fn sample_phase<R: Rng + ?Sized>(
        &self,
        phase: Phase,
        prompt: PromptId,
        start_ctx: usize,
        rng: &mut R,
    ) -> (Vec<Token>, f64, bool, usize) {
        let shape = &self.shape;
        let cap = shape.max_len(phase);
        let term = shape.terminator(phase);
        let w = shape.row_width();
        if phase == Phase::Cot && cap == 0 {
            return (vec![term], 0.0, true, start_ctx);
        }
        let mut probs = vec![0.0; w];
        let mut seq = Vec::new();
        let mut logp = 0.0;
        let mut ctx = start_ctx;
        loop {
            if seq.len() == cap {
                seq.push(term);
                return (seq, logp, false, ctx);
            }
            let row = self.row(phase, prompt, ctx);
            softmax_into(row, &mut probs);
            let col = sample_index(&probs, rng);
            logp += log_softmax_at(row, col);
            if col == shape.vocab.size() {
                seq.push(term);
                return (seq, logp, true, ctx);
            }
            let t = col as Token;
            seq.push(t);
            ctx = shape.push_context(ctx, t);
        }
    }

    /// Samples `c ~ pi(.|x)`; returns the sequence, its log-prob and format validity.
    pub fn sample_cot<R: Rng + ?Sized>(&self, prompt: PromptId, rng: &mut R) -> Result<(Vec<Token>, f64, bool)> {
        self.shape.check_prompt(prompt)?;
        let (c, lp, valid, _) = self.sample_phase(Phase::Cot, prompt, self.shape.initial_context(), rng);
        Ok((c, lp, valid))
    }

    /// Samples `a ~ pi(.|x, c)` and returns it with its log-prob.
    pub fn sample_answer<R: Rng + ?Sized>(&self, prompt: PromptId, cot: &[Token], rng: &mut R) -> Result<(Vec<Token>, f64)> {
        let body = self.check_cot(prompt, cot)?;
        let ctx = self.shape.context_after(body);
        let (a, lp, _, _) = self.sample_phase(Phase::Answer, prompt, ctx, rng);
        Ok((a, lp))
    }

    /// Samples `c ~ pi(.|x)` then `a ~ pi(.|x, c)`.
    pub fn sample_generation<R: Rng + ?Sized>(&self, prompt: PromptId, rng: &mut R) -> Result<Generation> {
        self.shape.check_prompt(prompt)?;
        let (cot, logp_cot, format_valid, ctx) =
            self.sample_phase(Phase::Cot, prompt, self.shape.initial_context(), rng);
        let (answer, logp_answer, _, _) = self.sample_phase(Phase::Answer, prompt, ctx, rng);
        Ok(Generation {
            prompt,
            cot,
            answer,
            format_valid,
            logp_cot,
            logp_answer,
        })
    }

    /// Builds a generation record for given sequences, computing the cached fields.
    pub fn make_generation(&self, prompt: PromptId, cot: Vec<Token>, answer: Vec<Token>) -> Result<Generation> {
        let logp_cot = self.logprob_cot(prompt, &cot)?;
        let logp_answer = self.logprob_answer(prompt, &cot, &answer)?;
        Ok(Generation {
            prompt,
            format_valid: self.shape.is_format_valid(&cot),
            cot,
            answer,
            logp_cot,
            logp_answer,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let t = self.shape.table_len();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            vocab_size: self.shape.vocab.size(),
            eoc: self.shape.vocab.eoc(),
            eoa: self.shape.vocab.eoa(),
            bos: self.shape.vocab.bos(),
            context_order: self.shape.context_order,
            max_cot_len: self.shape.max_cot_len,
            max_ans_len: self.shape.max_ans_len,
            num_prompts: self.shape.num_prompts,
            contexts_per_prompt: self.shape.contexts_per_prompt(),
            row_width: self.shape.row_width(),
            logits_cot: self.logits[..t].to_vec(),
            logits_ans: self.logits[t..].to_vec(),
        }
    }

    pub fn from_checkpoint(doc: Checkpoint) -> Result<Self> {
        if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidShape(format!(
                "unsupported checkpoint {} v{}",
                doc.format, doc.version
            )));
        }
        let shape = PolicyShape::new(
            doc.vocab_size,
            doc.context_order,
            doc.max_cot_len,
            doc.max_ans_len,
            doc.num_prompts,
        )?;
        let derived_ok = doc.eoc == shape.vocab.eoc()
            && doc.eoa == shape.vocab.eoa()
            && doc.bos == shape.vocab.bos()
            && doc.contexts_per_prompt == shape.contexts_per_prompt()
            && doc.row_width == shape.row_width();
        if !derived_ok {
            return Err(Error::InvalidShape(
                "checkpoint header fields are inconsistent".into(),
            ));
        }
        if doc.logits_cot.len() != shape.table_len() || doc.logits_ans.len() != shape.table_len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint tables must each hold {} entries",
                shape.table_len()
            )));
        }
        let mut logits = doc.logits_cot;
        logits.extend(doc.logits_ans);
        Self::from_logits(shape, logits)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_checkpoint())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(text)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "jepo-policy-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing checkpoint document. Tables are row-major over
/// `(prompt, context, token)`; the last column of each row is the phase
/// terminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub vocab_size: usize,
    pub eoc: Token,
    pub eoa: Token,
    pub bos: Token,
    pub context_order: usize,
    pub max_cot_len: usize,
    pub max_ans_len: usize,
    pub num_prompts: usize,
    pub contexts_per_prompt: usize,
    pub row_width: usize,
    pub logits_cot: Vec<f64>,
    pub logits_ans: Vec<f64>,
}

/// Frozen copy of the policy used as the KL anchor.
#[derive(Debug, Clone)]
pub struct ReferencePolicy(Arc<PolicyParams>);

impl ReferencePolicy {
    pub fn new(params: PolicyParams) -> Self {
        Self(Arc::new(params))
    }

    pub fn params(&self) -> &PolicyParams {
        &self.0
    }
}

/// Inverse-CDF draw; falls back to the last positive entry on rounding.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

fn row_kl(p_logits: &[f64], q_logits: &[f64], lp: &mut [f64], lq: &mut [f64]) -> f64 {
    log_softmax_into(p_logits, lp);
    log_softmax_into(q_logits, lq);
    lp.iter()
        .zip(lq.iter())
        .map(|(&a, &b)| {
            let p = a.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (a - b)
            }
        })
        .sum()
}

/// Exact `KL(pi(.|x) || pi_ref(.|x))` over whole generations.
///
/// The policy is Markov in `(phase, position, context)`, so the sequence KL
/// equals the sum of per-row KLs weighted by state occupancy; this forward
/// pass is exact without enumerating sequences.
pub fn sequence_kl(params: &PolicyParams, reference: &ReferencePolicy, prompt: PromptId) -> Result<f64> {
    let q = reference.params();
    params.ensure_same_shape(q)?;
    let shape = *params.shape();
    shape.check_prompt(prompt)?;
    let n_ctx = shape.contexts_per_prompt();
    let w = shape.row_width();
    let v = shape.vocab.size();
    let (mut lp, mut lq) = (vec![0.0; w], vec![0.0; w]);
    let mut probs = vec![0.0; w];
    let mut kl = 0.0;

    let mut answer_start = vec![0.0; n_ctx];
    if shape.max_cot_len == 0 {
        answer_start[shape.initial_context()] = 1.0;
    } else {
        let mut occ = vec![0.0; n_ctx];
        occ[shape.initial_context()] = 1.0;
        for _ in 0..shape.max_cot_len {
            let mut next = vec![0.0; n_ctx];
            for (ctx, &mass) in occ.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                let pr = params.row(Phase::Cot, prompt, ctx);
                kl += mass * row_kl(pr, q.row(Phase::Cot, prompt, ctx), &mut lp, &mut lq);
                softmax_into(pr, &mut probs);
                for t in 0..v {
                    next[shape.push_context(ctx, t as Token)] += mass * probs[t];
                }
                answer_start[ctx] += mass * probs[v];
            }
            occ = next;
        }
        for (ctx, &mass) in occ.iter().enumerate() {
            answer_start[ctx] += mass;
        }
    }

    let mut occ = answer_start;
    for _ in 0..shape.max_ans_len {
        let mut next = vec![0.0; n_ctx];
        for (ctx, &mass) in occ.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let pr = params.row(Phase::Answer, prompt, ctx);
            kl += mass * row_kl(pr, q.row(Phase::Answer, prompt, ctx), &mut lp, &mut lq);
            softmax_into(pr, &mut probs);
            for t in 0..v {
                next[shape.push_context(ctx, t as Token)] += mass * probs[t];
            }
        }
        occ = next;
    }
    Ok(kl.max(0.0))
}

/// Brute-force sequence KL over the full generation space.
pub fn sequence_kl_enumerated(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    prompt: PromptId,
    max_sequences: u128,
) -> Result<f64> {
    let q = reference.params();
    params.ensure_same_shape(q)?;
    let shape = params.shape();
    let required = shape.generation_space_size();
    if required > max_sequences {
        return Err(Error::BudgetExceeded {
            what: "sequence KL enumeration",
            required,
            cap: max_sequences,
        });
    }
    let answers = shape.answer_space();
    let mut kl = 0.0;
    for c in shape.cot_space() {
        let lpc = params.logprob_cot(prompt, &c)?;
        let lqc = q.logprob_cot(prompt, &c)?;
        for a in &answers {
            let lp = lpc + params.logprob_answer(prompt, &c, a)?;
            let lq = lqc + q.logprob_answer(prompt, &c, a)?;
            let p = lp.exp();
            if p > 0.0 {
                kl += p * (lp - lq);
            }
        }
    }
    Ok(kl)
}

/// Monte-Carlo sequence KL: per-step exact row KLs summed along sampled
/// trajectories. Returns `(mean, standard error)`.
pub fn sequence_kl_sampled<R: Rng + ?Sized>(
    params: &PolicyParams,
    reference: &ReferencePolicy,
    prompt: PromptId,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let q = reference.params();
    params.ensure_same_shape(q)?;
    let shape = *params.shape();
    let w = shape.row_width();
    let (mut lp, mut lq) = (vec![0.0; w], vec![0.0; w]);
    let mut values = Vec::with_capacity(samples);
    for _ in 0..samples {
        let g = params.sample_generation(prompt, rng)?;
        let mut total = 0.0;
        let cot_body = shape.split_body(Phase::Cot, &g.cot)?;
        let ctx = params.walk(Phase::Cot, prompt, shape.initial_context(), cot_body, |off, _| {
            total += row_kl(&params.logits[off..off + w], &q.logits[off..off + w], &mut lp, &mut lq);
        });
        let ans_body = shape.split_body(Phase::Answer, &g.answer)?;
        params.walk(Phase::Answer, prompt, ctx, ans_body, |off, _| {
            total += row_kl(&params.logits[off..off + w], &q.logits[off..off + w], &mut lp, &mut lq);
        });
        values.push(total);
    }
    Ok((
        crate::numerics::mean(&values),
        crate::numerics::std_error(&values),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(v: usize, k: usize, lc: usize, la: usize) -> PolicyShape {
        PolicyShape::new(v, k, lc, la, 2).unwrap()
    }

    #[test]
    fn vocab_rejects_tiny_sizes_and_reserves_ids() {
        assert!(Vocab::new(1).is_err());
        let v = Vocab::new(4).unwrap();
        assert_eq!((v.eoc(), v.eoa(), v.bos()), (4, 5, 6));
        assert!(v.is_ordinary(3) && !v.is_ordinary(4));
    }

    #[test]
    fn uniform_cot_logprobs() {
        let p = PolicyParams::zeros(shape(2, 1, 3, 2));
        let third = (1.0f64 / 3.0).ln();
        assert!((p.logprob_cot(0, &[2]).unwrap() - third).abs() < 1e-15);
        assert!((p.logprob_cot(0, &[0, 2]).unwrap() - 2.0 * third).abs() < 1e-15);
    }

    #[test]
    fn uniform_answer_logprobs() {
        let p = PolicyParams::zeros(shape(2, 1, 3, 2));
        let third = (1.0f64 / 3.0).ln();
        assert!((p.logprob_answer(0, &[2], &[0, 3]).unwrap() - 2.0 * third).abs() < 1e-15);
        assert!((p.logprob_answer(0, &[1, 2], &[3]).unwrap() - third).abs() < 1e-15);
    }

    #[test]
    fn forced_terminators_cost_nothing() {
        let p = PolicyParams::zeros(shape(2, 2, 2, 1));
        let third = (1.0f64 / 3.0).ln();
        // Two ordinary tokens hit the cap, so eoc is forced.
        assert!((p.logprob_cot(0, &[0, 1, 2]).unwrap() - 2.0 * third).abs() < 1e-15);
        assert!(!p.shape().is_format_valid(&[0, 1, 2]));
        assert!(p.shape().is_format_valid(&[0, 2]));
        // With k = 2 the context after [0, 1] is its own row; forcing leaves it untouched.
        let g = p.grad_logprob(0, &[0, 1, 2], None).unwrap();
        let off = p.shape().row_offset(Phase::Cot, 0, p.shape().context_after(&[0, 1]));
        assert!(g[off..off + 3].iter().all(|&x| x == 0.0));
        assert!(g.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn malformed_sequences_are_rejected() {
        let p = PolicyParams::zeros(shape(2, 1, 2, 1));
        assert!(matches!(p.logprob_cot(0, &[0, 1]), Err(Error::MalformedSequence(_))));
        assert!(matches!(p.logprob_cot(0, &[]), Err(Error::MalformedSequence(_))));
        assert!(matches!(p.logprob_cot(0, &[0, 1, 0, 2]), Err(Error::MalformedSequence(_))));
        assert!(matches!(p.logprob_cot(5, &[2]), Err(Error::UnknownPrompt { .. })));
        assert!(matches!(p.logprob_answer(0, &[2], &[0, 2]), Err(Error::MalformedSequence(_))));
    }

    #[test]
    fn single_step_score_identity() {
        let p = PolicyParams::zeros(shape(2, 0, 1, 1));
        let g = p.grad_logprob(0, &[0, 2], None).unwrap();
        let off = p.shape().row_offset(Phase::Cot, 0, 0);
        let expected = [2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0];
        for j in 0..3 {
            assert!((g[off + j] - expected[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn score_function_has_zero_mean_on_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PolicyParams::random(shape(3, 1, 1, 1), 1.0, &mut rng);
        let row = p.row(Phase::Cot, 1, p.shape().initial_context()).to_vec();
        let probs = crate::numerics::softmax(&row);
        let mut acc = vec![0.0; p.num_params()];
        for t in 0..4u32 {
            let seq: Vec<Token> = if t == 3 { vec![3] } else { vec![t, 3] };
            p.accumulate_grad_cot(1, &seq, probs[t as usize], &mut acc).unwrap();
        }
        // Sequences [t, eoc] also take a forced step (cap 1), which adds nothing.
        assert!(acc.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn disabled_cot_is_deterministic_and_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PolicyParams::random(shape(3, 2, 0, 2), 1.0, &mut rng);
        let g = p.sample_generation(1, &mut rng).unwrap();
        assert_eq!(g.cot, vec![3]);
        assert!(g.format_valid);
        assert_eq!(g.logp_cot, 0.0);
        assert!(p.grad_logprob(1, &[3], None).unwrap().iter().all(|&x| x == 0.0));
        assert!(p.logprob_cot(1, &[0, 3]).is_err());
    }

    #[test]
    fn sampled_logprobs_match_recomputation_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = PolicyParams::random(shape(3, 2, 3, 2), 1.5, &mut rng);
        for _ in 0..200 {
            let g = p.sample_generation(1, &mut rng).unwrap();
            assert_eq!(g.logp_cot, p.logprob_cot(1, &g.cot).unwrap());
            assert_eq!(g.logp_answer, p.logprob_answer(1, &g.cot, &g.answer).unwrap());
            assert_eq!(g.format_valid, p.shape().is_format_valid(&g.cot));
        }
    }

    #[test]
    fn one_hot_policy_is_deterministic() {
        let s = shape(2, 1, 3, 2);
        let mut p = PolicyParams::zeros(s);
        let n_ctx = s.contexts_per_prompt();
        for ctx in 0..n_ctx {
            p.row_mut(Phase::Cot, 0, ctx).copy_from_slice(&[0.0, -1000.0, -1000.0]);
            p.row_mut(Phase::Answer, 0, ctx).copy_from_slice(&[-1000.0, 0.0, -1000.0]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let first = p.sample_generation(0, &mut rng).unwrap();
        // Always token 0 until the cap, so eoc is forced.
        assert_eq!(first.cot, vec![0, 0, 0, 2]);
        assert!(!first.format_valid);
        assert_eq!(first.answer, vec![1, 1, 3]);
        for _ in 0..20 {
            assert_eq!(p.sample_generation(0, &mut rng).unwrap(), first);
        }
    }

    #[test]
    fn spaces_have_expected_sizes() {
        let s = shape(3, 1, 2, 1);
        assert_eq!(s.cot_space().len() as u128, s.cot_space_size());
        assert_eq!(s.cot_space_size(), 1 + 3 + 9);
        assert_eq!(s.answer_space().len(), 4);
        assert_eq!(shape(4, 2, 4, 3).generation_space_size(), 341 * 85);
    }

    #[test]
    fn kl_to_self_is_zero_and_two_point_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PolicyParams::random(shape(2, 1, 2, 1), 1.0, &mut rng);
        let r = ReferencePolicy::new(p.clone());
        assert_eq!(sequence_kl(&p, &r, 0).unwrap(), 0.0);

        // Only the first chain-of-thought row carries a choice between
        // token 0 and eoc; everything else is forced or identical.
        let s = PolicyShape::new(2, 0, 1, 0, 1).unwrap();
        let mut a = PolicyParams::zeros(s);
        let mut b = PolicyParams::zeros(s);
        a.row_mut(Phase::Cot, 0, 0).copy_from_slice(&[0.0, -1000.0, 0.0]);
        b.row_mut(Phase::Cot, 0, 0).copy_from_slice(&[0.9f64.ln(), -1000.0, 0.1f64.ln()]);
        let kl = sequence_kl(&a, &ReferencePolicy::new(b), 0).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl - expected).abs() < 1e-12, "{kl} vs {expected}");
        assert!((kl - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn kl_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = shape(3, 1, 3, 2);
        let p = PolicyParams::random(s, 1.0, &mut rng);
        let r = ReferencePolicy::new(PolicyParams::random(s, 1.0, &mut rng));
        let dp = sequence_kl(&p, &r, 1).unwrap();
        let en = sequence_kl_enumerated(&p, &r, 1, 1_000_000).unwrap();
        assert!((dp - en).abs() < 1e-12, "{dp} vs {en}");
        let (mc, se) = sequence_kl_sampled(&p, &r, 1, 20_000, &mut rng).unwrap();
        assert!((mc - dp).abs() < 3.0 * se, "{mc} ± {se} vs {dp}");
        assert!(matches!(
            sequence_kl_enumerated(&p, &r, 1, 10),
            Err(Error::BudgetExceeded { .. })
        ));
        let other = PolicyParams::zeros(shape(2, 1, 3, 2));
        assert!(sequence_kl(&other, &r, 0).is_err());
    }

    #[test]
    fn checkpoint_rejects_inconsistent_headers() {
        let p = PolicyParams::zeros(shape(2, 1, 2, 1));
        let mut doc = p.to_checkpoint();
        doc.eoc = 9;
        assert!(PolicyParams::from_checkpoint(doc).is_err());
        let mut doc = p.to_checkpoint();
        doc.logits_ans.pop();
        assert!(PolicyParams::from_checkpoint(doc).is_err());
        let text = p.to_json().unwrap().replace("\"version\"", "\"extra\": 1, \"version\"");
        assert!(PolicyParams::from_json(&text).is_err());
    }
}
