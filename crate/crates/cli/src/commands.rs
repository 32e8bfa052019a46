//! Subcommand implementations shared by the binary and the tests.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use jepo_core::numerics::{derive_rng, derive_seed};
use jepo_core::oracle::{jensen_bound_exact, marginal_loglik, BoundValue};
use jepo_core::policy::{PolicyParams, PromptId};
use jepo_core::tasks::{score_generations, ScoreReport, TaskSpec};
use jepo_core::trainer::{
    proxy_nll, Algorithm, EvalSettings, EvalSplit, MetricsRecord, ProxyNll, Trainer, METRICS_HEADER, STREAM_EVAL,
    STREAM_PROXY,
};
use jepo_core::verify::{Scope, Suite, VerifyReport};
use serde::Serialize;

use crate::artifacts::{write_atomic, LineLog, RunLock};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub algorithm: Algorithm,
    pub task: String,
    pub regime: String,
    pub steps: usize,
    pub seed: u64,
    pub initial: MetricsRecord,
    pub last: MetricsRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_seconds: Option<f64>,
}

pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub summary: Summary,
}

fn mkdir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))
}

struct RunWriter {
    dir: std::path::PathBuf,
    csv: LineLog,
    jsonl: LineLog,
    every: usize,
    _lock: RunLock,
}

impl RunWriter {
    fn open(dir: &Path, cfg: &RunConfig, task: &TaskSpec, init: &PolicyParams) -> Result<Self, CliError> {
        mkdir(dir)?;
        let lock = RunLock::acquire(dir)?;
        mkdir(&dir.join("checkpoints"))?;
        write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
        write_atomic(&dir.join("task.json"), task.to_json()?.as_bytes())?;
        write_atomic(&dir.join("checkpoints/init.json"), init.to_json()?.as_bytes())?;
        Ok(Self {
            dir: dir.to_path_buf(),
            csv: LineLog::create(&dir.join("metrics.csv"), Some(METRICS_HEADER))?,
            jsonl: LineLog::create(&dir.join("metrics.jsonl"), None)?,
            every: cfg.output.checkpoint_every,
            _lock: lock,
        })
    }

    /// `params` are the parameters after the update recorded in `rec`.
    fn record(&mut self, rec: &MetricsRecord, params: &PolicyParams, steps: usize) -> Result<(), CliError> {
        self.csv.push(&rec.csv_row())?;
        self.jsonl.push(&serde_json::to_string(rec)?)?;
        let done = rec.step + 1;
        if rec.step < steps && self.every > 0 && done.is_multiple_of(self.every) {
            let path = self.dir.join(format!("checkpoints/step-{done:06}.json"));
            write_atomic(&path, params.to_json()?.as_bytes())?;
        }
        Ok(())
    }

    fn finish(self, params: &PolicyParams, summary: &Summary) -> Result<(), CliError> {
        self.csv.sync()?;
        self.jsonl.sync()?;
        write_atomic(&self.dir.join("checkpoints/final.json"), params.to_json()?.as_bytes())?;
        write_atomic(&self.dir.join("summary.json"), serde_json::to_string_pretty(summary)?.as_bytes())?;
        Ok(())
    }
}

/// Trains per `cfg`; writes run artifacts when `out` is given.
pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome, CliError> {
    let start = Instant::now();
    let task = cfg.build_task()?;
    let init = cfg.init_policy(&task)?;
    let mut trainer = Trainer::new(task.clone(), init.clone(), cfg.trainer.clone(), cfg.eval)?;
    let mut writer = out.map(|d| RunWriter::open(d, cfg, &task, &init)).transpose()?;
    let steps = cfg.trainer.steps;
    let mut records = Vec::with_capacity(steps + 1);
    let mut failure: Option<CliError> = None;
    trainer.run(|rec, params| {
        if let Some(w) = writer.as_mut() {
            if let Err(e) = w.record(rec, params, steps) {
                failure = Some(e);
                return Err(jepo_core::Error::InvalidConfig("artifact write failed".into()));
            }
        }
        records.push(rec.clone());
        Ok(())
    })
    .map_err(|e| failure.take().unwrap_or(CliError::Core(e)))?;
    let summary = Summary {
        algorithm: cfg.trainer.algorithm,
        task: task.name.clone(),
        regime: task.regime.to_string(),
        steps,
        seed: cfg.trainer.seed,
        initial: records[0].clone(),
        last: records[records.len() - 1].clone(),
        elapsed_seconds: (!cfg.output.reproducible).then(|| start.elapsed().as_secs_f64()),
    };
    if let Some(w) = writer {
        w.finish(trainer.params(), &summary)?;
    }
    Ok(TrainOutcome {
        records,
        params: trainer.params().clone(),
        reference: init,
        summary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub split: EvalSplit,
    pub seed: u64,
    pub settings: EvalSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: EvalSplit,
    pub seed: u64,
    pub prompts: Vec<PromptId>,
    pub scores: ScoreReport,
    pub proxy_nll: ProxyNll,
    pub jensen_bound: Option<BoundValue>,
    pub marginal_loglik: Option<f64>,
}

/// Scores sampled answers, the proxy NLL and exact bounds on one split.
pub fn evaluate(params: &PolicyParams, task: &TaskSpec, opts: &EvalOptions) -> Result<EvalReport, CliError> {
    let shape = params.shape();
    let want = task.policy_shape()?;
    if shape.vocab != want.vocab {
        return Err(CliError::Config(format!(
            "checkpoint vocabulary has {} tokens, task has {}",
            shape.vocab.size(),
            want.vocab.size()
        )));
    }
    if *shape != want {
        return Err(CliError::Config(format!(
            "checkpoint shape {shape:?} does not match task shape {want:?}"
        )));
    }
    let prompts = opts.split.prompts(task);
    if prompts.is_empty() {
        return Err(CliError::Config(format!("split {} has no prompts", serde_json::to_string(&opts.split)?.trim_matches('"'))));
    }
    let s = &opts.settings;
    let mut gens = Vec::with_capacity(prompts.len() * s.samples);
    for &p in &prompts {
        let mut rng = derive_rng(opts.seed, &[STREAM_EVAL, p as u64]);
        for _ in 0..s.samples {
            gens.push(params.sample_generation(p, &mut rng)?);
        }
    }
    let scores = score_generations(task, &prompts, &gens)?;
    let budget = s.budget();
    let proxy = proxy_nll(
        params,
        task,
        &prompts,
        s.proxy_n,
        s.proxy_trials,
        derive_seed(opts.seed, &[STREAM_PROXY]),
        &budget,
    )?;
    let mut jensen = Some(0.0);
    let mut marginal = Some(0.0);
    let mut neg_inf = false;
    for &p in &prompts {
        let a = task.truth(p)?;
        jensen = match (jensen, jensen_bound_exact(params, p, a, &budget)) {
            (Some(acc), Ok(BoundValue::Finite(v))) => Some(acc + v),
            (Some(acc), Ok(BoundValue::NegInfinite)) => {
                neg_inf = true;
                Some(acc)
            }
            (_, Err(jepo_core::Error::BudgetExceeded { .. })) | (None, _) => None,
            (_, Err(e)) => return Err(e.into()),
        };
        marginal = match (marginal, marginal_loglik(params, p, a, &budget)) {
            (Some(acc), Ok(v)) => Some(acc + v),
            (_, Err(jepo_core::Error::BudgetExceeded { .. })) | (None, _) => None,
            (_, Err(e)) => return Err(e.into()),
        };
    }
    let k = prompts.len() as f64;
    Ok(EvalReport {
        split: opts.split,
        seed: opts.seed,
        prompts,
        scores,
        proxy_nll: proxy,
        jensen_bound: jensen.map(|j| if neg_inf { BoundValue::NegInfinite } else { BoundValue::Finite(j / k) }),
        marginal_loglik: marginal.map(|m| m / k),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(format!("reading {}", path.display())))?;
    PolicyParams::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Runs the invariant suite; errors with the failing check names.
pub fn verify(suite: &Suite) -> VerifyReport {
    suite.run()
}

pub fn verify_scope(scope: Scope, seed: u64) -> VerifyReport {
    verify(&Suite::new(scope, seed))
}

pub fn ensure_passed(report: &VerifyReport) -> Result<(), CliError> {
    if report.passed {
        Ok(())
    } else {
        Err(CliError::VerifyFailed(report.failed().into_iter().map(String::from).collect()))
    }
}

/// Writes a JSON document to `out`, or prints it when `out` is `None`.
pub fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                mkdir(dir)?;
            }
            write_atomic(p, format!("{text}\n").as_bytes())
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Io {
                    context: "writing to stdout".into(),
                    source: e,
                }),
                _ => Ok(()),
            }
        }
    }
}
