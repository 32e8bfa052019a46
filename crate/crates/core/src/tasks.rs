//! Synthetic tasks for the verifiable, semi-verifiable and unverifiable
//! regimes, answer match functions and combined scoring.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_rng, mean};
use crate::policy::{Generation, PolicyShape, PromptId, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchKind {
    Exact,
    EquivalenceClass,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatchFunctionDoc {
    kind: MatchKind,
    #[serde(default)]
    classes: Vec<Vec<Vec<Token>>>,
}

/// Binary answer-equivalence predicate.
///
/// Answers outside every class only match themselves, so the predicate stays
/// reflexive on arbitrary inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatchFunctionDoc", into = "MatchFunctionDoc")]
pub struct MatchFunction {
    kind: MatchKind,
    classes: Vec<Vec<Vec<Token>>>,
    class_of: HashMap<Vec<Token>, usize>,
}

impl TryFrom<MatchFunctionDoc> for MatchFunction {
    type Error = Error;

    fn try_from(doc: MatchFunctionDoc) -> Result<Self> {
        match doc.kind {
            MatchKind::Exact if doc.classes.is_empty() => Ok(Self::exact()),
            MatchKind::Exact => Err(Error::InvalidConfig("exact match function cannot carry classes".into())),
            MatchKind::EquivalenceClass => Self::from_classes(doc.classes),
        }
    }
}

impl From<MatchFunction> for MatchFunctionDoc {
    fn from(m: MatchFunction) -> Self {
        Self {
            kind: m.kind,
            classes: m.classes,
        }
    }
}

impl MatchFunction {
    pub fn exact() -> Self {
        Self {
            kind: MatchKind::Exact,
            classes: Vec::new(),
            class_of: HashMap::new(),
        }
    }

    /// Equivalence-class match over disjoint classes.
    pub fn from_classes(classes: Vec<Vec<Vec<Token>>>) -> Result<Self> {
        let mut class_of = HashMap::new();
        for (i, class) in classes.iter().enumerate() {
            if class.is_empty() {
                return Err(Error::InvalidConfig(format!("equivalence class {i} is empty")));
            }
            for a in class {
                if class_of.insert(a.clone(), i).is_some() {
                    return Err(Error::InvalidConfig(format!("answer {a:?} appears in more than one class")));
                }
            }
        }
        Ok(Self {
            kind: MatchKind::EquivalenceClass,
            classes,
            class_of,
        })
    }

    pub fn kind(&self) -> MatchKind {
        self.kind
    }

    pub fn classes(&self) -> &[Vec<Vec<Token>>] {
        &self.classes
    }

    pub fn class_of(&self, answer: &[Token]) -> Option<usize> {
        self.class_of.get(answer).copied()
    }

    pub fn matches(&self, answer: &[Token], truth: &[Token]) -> bool {
        if answer == truth {
            return true;
        }
        match self.kind {
            MatchKind::Exact => false,
            MatchKind::EquivalenceClass => match (self.class_of(answer), self.class_of(truth)) {
                (Some(x), Some(y)) => x == y,
                _ => false,
            },
        }
    }

    /// Every answer scored as correct for `truth`.
    pub fn equivalent_set(&self, truth: &[Token]) -> Vec<Vec<Token>> {
        match self.class_of(truth) {
            Some(c) if self.kind == MatchKind::EquivalenceClass => self.classes[c].clone(),
            _ => vec![truth.to_vec()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Verifiable,
    SemiVerifiable,
    Unverifiable,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Verifiable => "verifiable",
            Regime::SemiVerifiable => "semi-verifiable",
            Regime::Unverifiable => "unverifiable",
        })
    }
}

/// Generator parameters shared by the three task constructors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSizes {
    pub num_prompts: usize,
    pub vocab_size: usize,
    pub context_order: usize,
    pub max_cot_len: usize,
    pub max_ans_len: usize,
    /// Fraction of prompts held out as the test split.
    pub test_fraction: f64,
}

impl Default for TaskSizes {
    fn default() -> Self {
        Self {
            num_prompts: 16,
            vocab_size: 4,
            context_order: 2,
            max_cot_len: 4,
            max_ans_len: 3,
            test_fraction: 0.25,
        }
    }
}

impl TaskSizes {
    pub fn policy_shape(&self) -> Result<PolicyShape> {
        PolicyShape::new(
            self.vocab_size,
            self.context_order,
            self.max_cot_len,
            self.max_ans_len,
            self.num_prompts,
        )
    }

    fn validate(&self) -> Result<PolicyShape> {
        let shape = self.policy_shape()?;
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::InvalidConfig(format!(
                "test_fraction {} must lie in [0, 1)",
                self.test_fraction
            )));
        }
        if self.max_ans_len == 0 {
            return Err(Error::InvalidConfig("max_ans_len must be at least 1".into()));
        }
        Ok(shape)
    }
}

pub const TASK_FORMAT: &str = "jepo-task";
pub const TASK_VERSION: u32 = 1;

/// Prompt set, ground truth, regime and match functions of a synthetic task.
///
/// Prompts are the ids `0..sizes.num_prompts`, one policy table each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub regime: Regime,
    pub sizes: TaskSizes,
    pub prompts: Vec<PromptId>,
    /// Ground-truth answer per prompt, terminated with `eoa`.
    pub truth: Vec<Vec<Token>>,
    /// Whether the training-time match function covers each prompt.
    pub train_verifiable: Vec<bool>,
    pub train_match: Option<MatchFunction>,
    pub eval_match: MatchFunction,
    pub train_prompts: Vec<PromptId>,
    pub test_prompts: Vec<PromptId>,
    /// Synthetic golden chain-of-thought per prompt for the golden-CoT SFT baseline.
    pub golden_cots: Vec<Vec<Token>>,
}

fn random_answer<R: Rng + ?Sized>(rng: &mut R, shape: &PolicyShape, len: usize) -> Vec<Token> {
    let v = shape.vocab.size() as Token;
    let mut a: Vec<Token> = (0..len).map(|_| rng.random_range(0..v)).collect();
    a.push(shape.vocab.eoa());
    a
}

fn golden_cots<R: Rng + ?Sized>(rng: &mut R, shape: &PolicyShape) -> Vec<Vec<Token>> {
    let v = shape.vocab.size() as Token;
    (0..shape.num_prompts)
        .map(|_| {
            let len = if shape.max_cot_len == 0 {
                0
            } else {
                rng.random_range(0..shape.max_cot_len)
            };
            let mut c: Vec<Token> = (0..len).map(|_| rng.random_range(0..v)).collect();
            c.push(shape.vocab.eoc());
            c
        })
        .collect()
}

fn split<R: Rng + ?Sized>(rng: &mut R, n: usize, test_fraction: f64) -> (Vec<PromptId>, Vec<PromptId>) {
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut ids: Vec<PromptId> = (0..n).collect();
    ids.shuffle(rng);
    let mut test = ids[..n_test].to_vec();
    let mut train = ids[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

fn distinct_answers<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &PolicyShape,
    lengths: impl Fn(&mut R, usize) -> usize,
) -> Result<Vec<Vec<Token>>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(shape.num_prompts);
    for i in 0..shape.num_prompts {
        let mut tries = 0;
        loop {
            let len = lengths(rng, i);
            let a = random_answer(rng, shape, len);
            if seen.insert(a.clone()) {
                out.push(a);
                break;
            }
            tries += 1;
            if tries > 10_000 {
                return Err(Error::InvalidConfig(format!(
                    "cannot draw {} distinct answers from vocabulary {} with answer cap {}",
                    shape.num_prompts,
                    shape.vocab.size(),
                    shape.max_ans_len
                )));
            }
        }
    }
    Ok(out)
}

fn check_capacity(shape: &PolicyShape, usable: u128) -> Result<()> {
    if (shape.num_prompts as u128) > usable {
        return Err(Error::InvalidConfig(format!(
            "{} prompts need distinct answers but only {usable} are available",
            shape.num_prompts
        )));
    }
    Ok(())
}

/// Random prompt-to-answer table with exact match for training and evaluation.
pub fn make_verifiable_task(seed: u64, sizes: TaskSizes) -> Result<TaskSpec> {
    let shape = sizes.validate()?;
    // Answers have between 1 and L_a body tokens.
    check_capacity(&shape, shape.answer_space_size() - 1)?;
    let mut rng = derive_rng(seed, &[0x7461_736b, 1]);
    let la = shape.max_ans_len;
    let truth = distinct_answers(&mut rng, &shape, |r, _| r.random_range(1..=la))?;
    let (train_prompts, test_prompts) = split(&mut rng, shape.num_prompts, sizes.test_fraction);
    Ok(TaskSpec {
        format: TASK_FORMAT.into(),
        version: TASK_VERSION,
        name: format!("verifiable-{seed}"),
        seed,
        regime: Regime::Verifiable,
        sizes,
        prompts: (0..shape.num_prompts).collect(),
        truth,
        train_verifiable: vec![true; shape.num_prompts],
        train_match: Some(MatchFunction::exact()),
        eval_match: MatchFunction::exact(),
        train_prompts,
        test_prompts,
        golden_cots: golden_cots(&mut rng, &shape),
    })
}

/// Random partition of `items` into classes of 2 to 4 members.
fn partition_into_classes<R: Rng + ?Sized>(rng: &mut R, mut items: Vec<Vec<Token>>) -> Vec<Vec<Vec<Token>>> {
    items.shuffle(rng);
    let mut classes = Vec::new();
    let mut rest = items.as_slice();
    while !rest.is_empty() {
        let remaining = rest.len();
        let take = if remaining <= 4 {
            remaining
        } else {
            let mut s = rng.random_range(2..=4);
            if remaining - s == 1 {
                s = if s < 4 { s + 1 } else { s - 1 };
            }
            s
        };
        let (head, tail) = rest.split_at(take);
        let mut class = head.to_vec();
        class.sort();
        classes.push(class);
        rest = tail;
    }
    classes
}

/// Task whose answers come in equivalence classes; a fraction of prompts has
/// no training-time verifier (their train reward is always 0).
pub fn make_semi_verifiable_task(seed: u64, sizes: TaskSizes, unverifiable_fraction: f64) -> Result<TaskSpec> {
    if !(0.0..=1.0).contains(&unverifiable_fraction) || unverifiable_fraction.is_nan() {
        return Err(Error::InvalidConfig(format!(
            "unverifiable_fraction {unverifiable_fraction} must lie in [0, 1]"
        )));
    }
    let shape = sizes.validate()?;
    check_capacity(&shape, shape.answer_space_size() - 1)?;
    let mut rng = derive_rng(seed, &[0x7461_736b, 2]);
    let la = shape.max_ans_len;
    let truth = distinct_answers(&mut rng, &shape, |r, _| r.random_range(1..=la))?;
    let classes = partition_into_classes(&mut rng, shape.answer_space());
    let n = shape.num_prompts;
    let n_unverifiable = (unverifiable_fraction * n as f64).round() as usize;
    let mut ids: Vec<PromptId> = (0..n).collect();
    ids.shuffle(&mut rng);
    let mut train_verifiable = vec![true; n];
    for &p in &ids[..n_unverifiable] {
        train_verifiable[p] = false;
    }
    let (train_prompts, test_prompts) = split(&mut rng, n, sizes.test_fraction);
    Ok(TaskSpec {
        format: TASK_FORMAT.into(),
        version: TASK_VERSION,
        name: format!("semi-verifiable-{seed}"),
        seed,
        regime: Regime::SemiVerifiable,
        sizes,
        prompts: (0..n).collect(),
        truth,
        train_verifiable,
        train_match: Some(MatchFunction::exact()),
        eval_match: MatchFunction::from_classes(classes)?,
        train_prompts,
        test_prompts,
        golden_cots: golden_cots(&mut rng, &shape),
    })
}

/// Long-form answers (at or one below the answer cap) with no training verifier.
pub fn make_unverifiable_task(seed: u64, sizes: TaskSizes) -> Result<TaskSpec> {
    let shape = sizes.validate()?;
    let la = shape.max_ans_len;
    let v = shape.vocab.size() as u128;
    check_capacity(&shape, v.pow(la as u32) + if la > 1 { v.pow(la as u32 - 1) } else { 0 })?;
    let mut rng = derive_rng(seed, &[0x7461_736b, 3]);
    let n = shape.num_prompts;
    // Four of every five answers use the full cap.
    let mut long: Vec<bool> = (0..n).map(|i| i % 5 != 4).collect();
    long.shuffle(&mut rng);
    let truth = distinct_answers(&mut rng, &shape, |_, i| if long[i] || la == 1 { la } else { la - 1 })?;
    let (train_prompts, test_prompts) = split(&mut rng, n, sizes.test_fraction);
    Ok(TaskSpec {
        format: TASK_FORMAT.into(),
        version: TASK_VERSION,
        name: format!("unverifiable-{seed}"),
        seed,
        regime: Regime::Unverifiable,
        sizes,
        prompts: (0..n).collect(),
        truth,
        train_verifiable: vec![false; n],
        train_match: None,
        eval_match: MatchFunction::exact(),
        train_prompts,
        test_prompts,
        golden_cots: golden_cots(&mut rng, &shape),
    })
}

impl TaskSpec {
    pub fn policy_shape(&self) -> Result<PolicyShape> {
        self.sizes.policy_shape()
    }

    pub fn truth(&self, prompt: PromptId) -> Result<&[Token]> {
        self.truth
            .get(prompt)
            .map(|a| a.as_slice())
            .ok_or(Error::UnknownPrompt {
                prompt,
                num_prompts: self.truth.len(),
            })
    }

    pub fn is_train_verifiable(&self, prompt: PromptId) -> bool {
        self.train_match.is_some() && self.train_verifiable.get(prompt).copied().unwrap_or(false)
    }

    /// Training-time match score, `None` when the task has no verifier at all.
    /// Prompts outside the verifiable subset always score 0.
    pub fn train_score(&self, prompt: PromptId, answer: &[Token]) -> Result<Option<f64>> {
        let truth = self.truth(prompt)?;
        Ok(self.train_match.as_ref().map(|m| {
            if self.is_train_verifiable(prompt) && m.matches(answer, truth) {
                1.0
            } else {
                0.0
            }
        }))
    }

    pub fn eval_score(&self, prompt: PromptId, answer: &[Token]) -> Result<f64> {
        let truth = self.truth(prompt)?;
        Ok(if self.eval_match.matches(answer, truth) { 1.0 } else { 0.0 })
    }

    /// Prompts without training-time verification.
    pub fn unverifiable_prompts(&self) -> Vec<PromptId> {
        self.prompts
            .iter()
            .copied()
            .filter(|&p| !self.is_train_verifiable(p))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != TASK_FORMAT || self.version != TASK_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported task document {} v{}",
                self.format, self.version
            )));
        }
        let shape = self.sizes.validate()?;
        let n = shape.num_prompts;
        if self.prompts != (0..n).collect::<Vec<_>>()
            || self.truth.len() != n
            || self.train_verifiable.len() != n
            || self.golden_cots.len() != n
        {
            return Err(Error::InvalidConfig(format!("task tables must cover prompts 0..{n}")));
        }
        for a in &self.truth {
            shape.split_body(crate::policy::Phase::Answer, a)?;
        }
        for c in &self.golden_cots {
            if !shape.is_format_valid(c) {
                return Err(Error::InvalidConfig(format!("golden chain-of-thought {c:?} is not format-valid")));
            }
        }
        let mut seen = vec![false; n];
        for &p in self.train_prompts.iter().chain(&self.test_prompts) {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidConfig(format!(
                    "prompt {p} is out of range or appears in both splits"
                )));
            }
        }
        if self.regime == Regime::Unverifiable && self.train_match.is_some() {
            return Err(Error::InvalidConfig("unverifiable tasks have no training match".into()));
        }
        if self.regime != Regime::Unverifiable && self.train_match.is_none() {
            return Err(Error::InvalidConfig(format!("{} tasks need a training match", self.regime)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let task: TaskSpec = serde_json::from_str(text)?;
        task.validate()?;
        Ok(task)
    }
}

/// Mean scores of one prompt's generations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptScore {
    pub prompt: PromptId,
    pub train_verifiable: bool,
    pub samples: usize,
    pub r_train: Option<f64>,
    pub r_eval: f64,
    pub r_combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreAggregate {
    pub prompts: usize,
    pub r_train: Option<f64>,
    pub r_eval: f64,
    pub r_combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub rows: Vec<PromptScore>,
    pub all: ScoreAggregate,
    /// Aggregate over prompts without training-time verification, if any.
    pub unverifiable: Option<ScoreAggregate>,
}

fn aggregate<'a>(rows: impl Iterator<Item = &'a PromptScore>) -> Option<ScoreAggregate> {
    let rows: Vec<&PromptScore> = rows.collect();
    if rows.is_empty() {
        return None;
    }
    let r_train = rows
        .iter()
        .map(|r| r.r_train)
        .collect::<Option<Vec<f64>>>()
        .map(|v| mean(&v));
    Some(ScoreAggregate {
        prompts: rows.len(),
        r_train,
        r_eval: mean(&rows.iter().map(|r| r.r_eval).collect::<Vec<_>>()),
        r_combined: mean(&rows.iter().map(|r| r.r_combined).collect::<Vec<_>>()),
    })
}

/// Scores generations per prompt with `r_combined = r_train + r_eval * 1{r_train = 0}`.
pub fn score_generations(task: &TaskSpec, prompts: &[PromptId], generations: &[Generation]) -> Result<ScoreReport> {
    if prompts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut by_prompt: BTreeMap<PromptId, Vec<&Generation>> = BTreeMap::new();
    for g in generations {
        by_prompt.entry(g.prompt).or_default().push(g);
    }
    let missing: Vec<PromptId> = prompts.iter().copied().filter(|p| !by_prompt.contains_key(p)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingPrompts(missing));
    }
    let mut rows = Vec::with_capacity(prompts.len());
    for &p in prompts {
        let gens = &by_prompt[&p];
        let mut train = Vec::with_capacity(gens.len());
        let mut eval = Vec::with_capacity(gens.len());
        let mut combined = Vec::with_capacity(gens.len());
        let mut has_train = true;
        for g in gens {
            let rt = task.train_score(p, &g.answer)?;
            let re = task.eval_score(p, &g.answer)?;
            let rt0 = rt.unwrap_or(0.0);
            has_train &= rt.is_some();
            train.push(rt0);
            eval.push(re);
            combined.push(rt0 + re * if rt0 == 0.0 { 1.0 } else { 0.0 });
        }
        rows.push(PromptScore {
            prompt: p,
            train_verifiable: task.is_train_verifiable(p),
            samples: gens.len(),
            r_train: has_train.then(|| mean(&train)),
            r_eval: mean(&eval),
            r_combined: mean(&combined),
        });
    }
    let all = aggregate(rows.iter()).expect("non-empty prompts");
    let unverifiable = aggregate(rows.iter().filter(|r| !r.train_verifiable));
    Ok(ScoreReport {
        rows,
        all,
        unverifiable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn generation(prompt: PromptId, answer: Vec<Token>) -> Generation {
        Generation {
            prompt,
            cot: vec![4],
            answer,
            format_valid: true,
            logp_cot: 0.0,
            logp_answer: 0.0,
        }
    }

    #[test]
    fn verifiable_task_is_deterministic_and_split_exactly() {
        let a = make_verifiable_task(3, TaskSizes::default()).unwrap();
        let b = make_verifiable_task(3, TaskSizes::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.test_prompts.len(), 4);
        assert_eq!(a.train_prompts.len(), 12);
        a.validate().unwrap();
        assert_ne!(a.truth, make_verifiable_task(4, TaskSizes::default()).unwrap().truth);
    }

    #[test]
    fn capacity_is_enforced() {
        let sizes = TaskSizes {
            num_prompts: 50,
            vocab_size: 2,
            max_ans_len: 2,
            ..TaskSizes::default()
        };
        assert!(matches!(make_verifiable_task(0, sizes), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn semi_verifiable_classes_partition_answer_space() {
        let task = make_semi_verifiable_task(5, TaskSizes::default(), 0.4).unwrap();
        let shape = task.policy_shape().unwrap();
        let all = shape.answer_space();
        for a in &all {
            assert!(task.eval_match.class_of(a).is_some());
        }
        let total: usize = task.eval_match.classes().iter().map(|c| c.len()).sum();
        assert_eq!(total, all.len());
        assert!(task.eval_match.classes().iter().all(|c| (2..=4).contains(&c.len())));
        let unverifiable = task.unverifiable_prompts().len() as f64;
        assert!((unverifiable - 0.4 * 16.0).abs() <= 1.0);
    }

    #[test]
    fn fraction_outside_unit_interval_is_rejected() {
        assert!(make_semi_verifiable_task(0, TaskSizes::default(), 1.5).is_err());
        assert!(make_semi_verifiable_task(0, TaskSizes::default(), -0.1).is_err());
    }

    #[test]
    fn sibling_answer_scores_combined_only() {
        let task = make_semi_verifiable_task(1, TaskSizes::default(), 0.0).unwrap();
        let p = 0;
        let truth = task.truth[p].clone();
        let sibling = task
            .eval_match
            .equivalent_set(&truth)
            .into_iter()
            .find(|a| *a != truth)
            .unwrap();
        let report = score_generations(&task, &[p], &[generation(p, sibling)]).unwrap();
        let row = &report.rows[0];
        assert_eq!((row.r_train, row.r_eval, row.r_combined), (Some(0.0), 1.0, 1.0));
        let report = score_generations(&task, &[p], &[generation(p, truth)]).unwrap();
        let row = &report.rows[0];
        assert_eq!((row.r_train, row.r_eval, row.r_combined), (Some(1.0), 1.0, 1.0));
    }

    #[test]
    fn unverifiable_prompt_with_correct_class() {
        let task = make_semi_verifiable_task(2, TaskSizes::default(), 0.5).unwrap();
        let p = task.unverifiable_prompts()[0];
        let report = score_generations(&task, &[p], &[generation(p, task.truth[p].clone())]).unwrap();
        let row = &report.rows[0];
        assert_eq!((row.r_train, row.r_eval, row.r_combined), (Some(0.0), 1.0, 1.0));
        assert_eq!(report.unverifiable.as_ref().unwrap().prompts, 1);
    }

    #[test]
    fn unverifiable_task_uses_long_answers() {
        let task = make_unverifiable_task(9, TaskSizes::default()).unwrap();
        let la = task.sizes.max_ans_len as f64;
        let mean_len = mean(&task.truth.iter().map(|a| (a.len() - 1) as f64).collect::<Vec<_>>());
        assert!(mean_len >= 0.8 * la);
        assert!(task.train_match.is_none());
        assert_eq!(task, make_unverifiable_task(9, TaskSizes::default()).unwrap());
    }

    #[test]
    fn missing_prompts_are_listed() {
        let task = make_verifiable_task(0, TaskSizes::default()).unwrap();
        let err = score_generations(&task, &[0, 1, 2], &[generation(1, task.truth[1].clone())]).unwrap_err();
        assert!(matches!(err, Error::MissingPrompts(ref v) if *v == vec![0, 2]));
    }

    #[test]
    fn aggregate_is_mean_of_rows() {
        let task = make_verifiable_task(0, TaskSizes::default()).unwrap();
        let gens = vec![
            generation(0, task.truth[0].clone()),
            generation(1, vec![task.sizes.vocab_size as Token + 1]),
            generation(1, task.truth[1].clone()),
        ];
        let report = score_generations(&task, &[0, 1], &gens).unwrap();
        assert_eq!(report.rows[1].r_combined, 0.5);
        assert_eq!(report.all.r_combined, 0.75);
    }

    #[test]
    fn task_json_roundtrip() {
        let task = make_semi_verifiable_task(7, TaskSizes::default(), 0.4).unwrap();
        let back = TaskSpec::from_json(&task.to_json().unwrap()).unwrap();
        assert_eq!(task, back);
    }
}
