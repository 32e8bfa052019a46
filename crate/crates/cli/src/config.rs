//! Strict run configuration.

use std::path::{Path, PathBuf};

use jepo_core::numerics::derive_rng;
use jepo_core::policy::PolicyParams;
use jepo_core::tasks::{
    make_semi_verifiable_task, make_unverifiable_task, make_verifiable_task, TaskSizes, TaskSpec,
};
use jepo_core::trainer::{EvalSettings, TrainerConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Rng stream for policy initialization.
pub const STREAM_INIT: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    Verifiable,
    SemiVerifiable,
    Unverifiable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskBlock {
    /// Generated task kind; exclusive with `file`.
    pub generator: Option<Generator>,
    /// Task document path, relative to the config file.
    pub file: Option<PathBuf>,
    pub seed: u64,
    pub unverifiable_fraction: f64,
    pub sizes: TaskSizes,
}

impl Default for TaskBlock {
    fn default() -> Self {
        Self {
            generator: None,
            file: None,
            seed: 0,
            unverifiable_fraction: 0.4,
            sizes: TaskSizes::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    Zeros,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyBlock {
    pub init: Init,
    /// Standard deviation of random initial logits.
    pub scale: f64,
    pub seed: u64,
}

impl Default for PolicyBlock {
    fn default() -> Self {
        Self {
            init: Init::Zeros,
            scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub run_dir: PathBuf,
    /// Leaves wall-clock fields out of artifacts.
    pub reproducible: bool,
    /// Checkpoint cadence in steps; 0 writes only the initial and final policies.
    pub checkpoint_every: usize,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/default"),
            reproducible: false,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskBlock,
    pub policy: PolicyBlock,
    pub trainer: TrainerConfig,
    pub eval: EvalSettings,
    pub output: OutputBlock,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Command-line and environment overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub run_dir: Option<PathBuf>,
    pub reproducible: bool,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    /// A seed override reseeds the task generator, the initial policy and the trainer.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.task.seed = seed;
            self.policy.seed = seed;
            self.trainer.seed = seed;
        }
        if let Some(dir) = &o.run_dir {
            self.output.run_dir = dir.clone();
        }
        if o.reproducible {
            self.output.reproducible = true;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        match (&self.task.generator, &self.task.file) {
            (Some(_), Some(_)) => return bad("[task] sets both generator and file".into()),
            (None, None) => return bad("[task] needs a generator or a file".into()),
            (None, Some(f)) => {
                let p = self.base_dir.join(f);
                if !p.is_file() {
                    return bad(format!("[task] file {} does not exist", p.display()));
                }
            }
            (Some(_), None) => {}
        }
        if !(0.0..=1.0).contains(&self.task.unverifiable_fraction) {
            return bad(format!(
                "[task] unverifiable_fraction {} is outside [0, 1]",
                self.task.unverifiable_fraction
            ));
        }
        if !(self.policy.scale.is_finite() && self.policy.scale >= 0.0) {
            return bad(format!("[policy] scale {} must be finite and non-negative", self.policy.scale));
        }
        self.trainer.validate().map_err(|e| CliError::Config(format!("[trainer] {e}")))?;
        self.eval.validate().map_err(|e| CliError::Config(format!("[eval] {e}")))?;
        Ok(())
    }

    pub fn build_task(&self) -> Result<TaskSpec, CliError> {
        block_task(&self.task, &self.base_dir)
    }

    pub fn init_policy(&self, task: &TaskSpec) -> Result<PolicyParams, CliError> {
        let shape = task.policy_shape()?;
        Ok(match self.policy.init {
            Init::Zeros => PolicyParams::zeros(shape),
            Init::Random => {
                let mut rng = derive_rng(self.policy.seed, &[STREAM_INIT]);
                PolicyParams::random(shape, self.policy.scale, &mut rng)
            }
        })
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }
}

pub fn block_task(block: &TaskBlock, base: &Path) -> Result<TaskSpec, CliError> {
    let task = match (block.generator, &block.file) {
        (Some(Generator::Verifiable), None) => make_verifiable_task(block.seed, block.sizes)?,
        (Some(Generator::SemiVerifiable), None) => {
            make_semi_verifiable_task(block.seed, block.sizes, block.unverifiable_fraction)?
        }
        (Some(Generator::Unverifiable), None) => make_unverifiable_task(block.seed, block.sizes)?,
        (None, Some(f)) => load_task(&base.join(f))?,
        _ => return Err(CliError::Config("[task] needs exactly one of generator and file".into())),
    };
    Ok(task)
}

pub fn load_task(path: &Path) -> Result<TaskSpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read task {}: {e}", path.display())))?;
    TaskSpec::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
