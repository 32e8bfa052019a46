use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jepo_cli::commands::{evaluate, load_checkpoint, train, EvalOptions};
use jepo_cli::config::load_task;
use jepo_cli::{CliError, Overrides, RunConfig};
use jepo_core::numerics::mean;
use jepo_core::trainer::{EvalSettings, EvalSplit, METRICS_HEADER};

fn jepo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jepo"))
        .args(args)
        .current_dir(cwd)
        .env_remove("JEPO_SEED")
        .env_remove("JEPO_RUN_DIR")
        .output()
        .expect("binary runs")
}

fn sample(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

const TINY: &str = r#"
[task]
generator = "verifiable"
seed = 4

[task.sizes]
num_prompts = 4
vocab_size = 3
context_order = 1
max_cot_len = 2
max_ans_len = 2
test_fraction = 0.5

[trainer]
algorithm = "jepo-multi"
n = 2
steps = 6
lr = 0.1

[eval]
every = 2
proxy_trials = 8
samples = 4
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn all_sample_configs_parse_and_validate() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = RunConfig::load(&path).unwrap();
            let task = cfg.build_task().unwrap();
            cfg.trainer.check_regime(&task).unwrap();
            count += 1;
        }
    }
    assert!(count >= 9);
}

#[test]
fn unknown_keys_are_rejected_with_line_numbers() {
    let err = RunConfig::parse("[trainer]\nn = 4\nlearning_rate = 0.1\n", "x.toml").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("line 3"), "{msg}");
    assert!(msg.contains("learning_rate"), "{msg}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn task_block_needs_exactly_one_source() {
    let dir = tempfile::tempdir().unwrap();
    let both = write(dir.path(), "both.toml", "[task]\ngenerator = \"verifiable\"\nfile = \"t.json\"\n");
    assert!(matches!(RunConfig::load(&both), Err(CliError::Config(_))));
    let missing = write(dir.path(), "missing.toml", "[task]\nfile = \"nope.json\"\n");
    let msg = RunConfig::load(&missing).unwrap_err().to_string();
    assert!(msg.contains("does not exist"), "{msg}");
}

#[test]
fn seed_override_reseeds_task_policy_and_trainer() {
    let mut cfg = RunConfig::parse(TINY, "tiny").unwrap();
    cfg.apply(&Overrides {
        seed: Some(9),
        ..Overrides::default()
    });
    assert_eq!((cfg.task.seed, cfg.policy.seed, cfg.trainer.seed), (9, 9, 9));
}

#[test]
fn zero_steps_emit_only_the_step_zero_record() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(TINY, "tiny").unwrap();
    cfg.trainer.steps = 0;
    let out = train(&cfg, Some(dir.path())).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].step, 0);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0,"));
}

#[test]
fn train_writes_all_artifacts_and_releases_the_lock() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write(dir.path(), "run.toml", TINY);
    let run = dir.path().join("run");
    let o = jepo(&["train", "--config", cfg_path.to_str().unwrap(), "--out", run.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "metrics.csv",
        "metrics.jsonl",
        "summary.json",
        "config.toml",
        "task.json",
        "checkpoints/init.json",
        "checkpoints/final.json",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert!(!run.join(".lock").exists());
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let jsonl = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 7);
    assert_eq!(jsonl.lines().count(), 7);
    let resolved = RunConfig::parse(&std::fs::read_to_string(run.join("config.toml")).unwrap(), "resolved").unwrap();
    assert_eq!(resolved.trainer.steps, 6);
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".lock"), "1").unwrap();
    let cfg = RunConfig::parse(TINY, "tiny").unwrap();
    assert!(matches!(train(&cfg, Some(dir.path())), Err(CliError::Locked(_))));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "[trainer]\nbogus = 1\n");
    let o = jepo(&["train", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    let rl = write(dir.path(), "rl.toml", "[task]\ngenerator = \"unverifiable\"\n[trainer]\nalgorithm = \"rl\"\n");
    let o = jepo(&["train", "--config", rl.to_str().unwrap(), "--out", "never"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("never").exists());
}

#[test]
fn environment_overrides_seed_and_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write(dir.path(), "run.toml", TINY);
    let o = Command::new(env!("CARGO_BIN_EXE_jepo"))
        .args(["train", "--config", cfg_path.to_str().unwrap()])
        .current_dir(dir.path())
        .env("JEPO_SEED", "5")
        .env("JEPO_RUN_DIR", "from-env")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = RunConfig::parse(
        &std::fs::read_to_string(dir.path().join("from-env/config.toml")).unwrap(),
        "resolved",
    )
    .unwrap();
    assert_eq!(resolved.trainer.seed, 5);
}

#[test]
fn eval_is_reproducible_and_aggregates_match_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(TINY, "tiny").unwrap();
    train(&cfg, Some(dir.path())).unwrap();
    let task = load_task(&dir.path().join("task.json")).unwrap();
    let params = load_checkpoint(&dir.path().join("checkpoints/final.json")).unwrap();
    let opts = EvalOptions {
        split: EvalSplit::Test,
        seed: 3,
        settings: EvalSettings::default(),
    };
    let a = evaluate(&params, &task, &opts).unwrap();
    let b = evaluate(&params, &task, &opts).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.prompts, task.test_prompts);
    let rows: Vec<f64> = a.scores.rows.iter().map(|r| r.r_combined).collect();
    assert_eq!(a.scores.all.r_combined, mean(&rows));
    assert!(a.marginal_loglik.is_some());
}

#[test]
fn eval_rejects_vocabulary_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(TINY, "tiny").unwrap();
    train(&cfg, Some(dir.path())).unwrap();
    let o = jepo(&["make-task", "--generator", "verifiable", "--out", "big.json"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = jepo(
        &["eval", "--checkpoint", "checkpoints/final.json", "--task", "big.json", "--split", "all"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("vocabulary"));
}

#[test]
fn eval_of_the_reference_runs_from_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(TINY, "tiny").unwrap();
    train(&cfg, Some(dir.path())).unwrap();
    let o = jepo(
        &["eval", "--checkpoint", "checkpoints/init.json", "--task", "task.json", "--out", "report.json"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(report["scores"]["all"]["r_combined"].is_number());
    assert!(report["proxy_nll"]["mc"].is_number());
}

#[test]
fn make_task_from_a_config_matches_training_task() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = sample("semi-verifiable-hybrid.toml");
    let o = jepo(
        &["make-task", "--config", cfg_path.to_str().unwrap(), "--seed", "2", "--out", "t.json"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let task = load_task(&dir.path().join("t.json")).unwrap();
    let mut cfg = RunConfig::load(&cfg_path).unwrap();
    cfg.apply(&Overrides {
        seed: Some(2),
        ..Overrides::default()
    });
    assert_eq!(task, cfg.build_task().unwrap());
    assert!(!task.unverifiable_prompts().is_empty());
}

#[test]
fn task_file_source_resolves_relative_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = jepo(&["make-task", "--generator", "unverifiable", "--out", "u.json"], dir.path());
    assert!(o.status.success());
    let cfg_path = write(
        dir.path(),
        "file.toml",
        "[task]\nfile = \"u.json\"\n[trainer]\nalgorithm = \"jepo-multi\"\nsteps = 2\n",
    );
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let out = train(&cfg, None).unwrap();
    assert_eq!(out.summary.regime, "unverifiable");
}

#[test]
fn fast_verify_passes_and_reports_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = jepo(&["verify", "--scope", "fast", "--out", "verify.json"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    let checks = report["checks"].as_array().unwrap();
    assert_eq!(checks.len(), jepo_core::verify::Suite::names().len());
    for c in checks {
        assert_eq!(c["status"], "pass", "{c}");
        assert!(c["tolerance"].is_number());
    }
}

#[test]
fn failed_verification_maps_to_exit_code_three() {
    let err = CliError::VerifyFailed(vec!["estimators.jepo_single_gradient".into()]);
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("estimators.jepo_single_gradient"));
}
