//! Run configuration: defaults, then the TOML file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use weft_core::decode::{DecodeConfig, Remasking};
use weft_core::model::{DenoiserConfig, InitScheme};
use weft_core::tasks::{generate_split, read_jsonl, Split, TaskInstance, TaskSpec, Vocab};
use weft_core::trainer::TrainConfig;
use weft_core::verify::Profile;

pub const OUT_DIR_ENV: &str = "WEFT_OUT_DIR";
pub const RESOLVED_NAME: &str = "run_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub name: String,
    pub modulus: u32,
    pub min_givens: usize,
    pub max_givens: usize,
    pub train_size: usize,
    pub eval_size: usize,
    /// Line-delimited JSON datasets used instead of generated ones.
    pub train_file: Option<PathBuf>,
    pub eval_file: Option<PathBuf>,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            name: "modadd".into(),
            modulus: 10,
            min_givens: 8,
            max_givens: 11,
            train_size: 2000,
            eval_size: 200,
            train_file: None,
            eval_file: None,
        }
    }
}

impl TaskSection {
    pub fn spec(&self) -> Result<TaskSpec> {
        let spec = match TaskSpec::parse(&self.name)? {
            TaskSpec::Modadd { .. } => TaskSpec::Modadd { modulus: self.modulus },
            TaskSpec::Sudoku4 { .. } => TaskSpec::Sudoku4 { min_givens: self.min_givens, max_givens: self.max_givens },
            TaskSpec::Countdown => TaskSpec::Countdown,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(&self, split: Split, seed: u64) -> Result<Vec<TaskInstance>> {
        let (file, n) = match split {
            Split::Train => (&self.train_file, self.train_size),
            Split::Eval => (&self.eval_file, self.eval_size),
        };
        match file {
            Some(path) => read_jsonl(path).with_context(|| format!("reading {}", path.display())),
            None => Ok(generate_split(&self.spec()?, seed, split, n)?),
        }
    }
}

/// Denoiser shape; vocabulary, special ids and init seed come from the task
/// vocabulary and the root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    pub rms_norm_eps: f64,
    pub rope_theta: f64,
    pub init: InitScheme,
    pub init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::desk(Vocab.size(), Vocab.mask_id(), Vocab.pad_id());
        ModelSection {
            d_model: d.d_model,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            ffn_hidden: d.ffn_hidden,
            max_seq_len: d.max_seq_len,
            rms_norm_eps: d.rms_norm_eps,
            rope_theta: d.rope_theta,
            init: d.init,
            init_std: d.init_std,
        }
    }
}

impl ModelSection {
    pub fn denoiser(&self, seed: u64) -> DenoiserConfig {
        DenoiserConfig {
            vocab_size: Vocab.size(),
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_hidden: self.ffn_hidden,
            max_seq_len: self.max_seq_len,
            rms_norm_eps: self.rms_norm_eps,
            rope_theta: self.rope_theta,
            init_std: self.init_std,
            init: self.init,
            mask_token_id: Vocab.mask_id(),
            pad_token_id: Vocab.pad_id(),
            seed,
        }
    }
}

/// Decoding options; unset lengths follow the task's answer slot.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub gen_length: Option<usize>,
    pub block_length: Option<usize>,
    pub n_steps: Option<usize>,
}

impl DecodeSection {
    pub fn resolve(&self, spec: &TaskSpec, seed: u64) -> Result<DecodeConfig> {
        let gen_length = self.gen_length.unwrap_or(spec.answer_len());
        let cfg = DecodeConfig {
            gen_length,
            block_length: self.block_length.unwrap_or(gen_length),
            n_steps: self.n_steps.unwrap_or((gen_length / 2).max(1)),
            remasking: Remasking::LowConfidence,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub profile: Profile,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection { profile: Profile::Fast }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub steps: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection { steps: 20 }
    }
}

/// Everything a command needs, fully resolved before it runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub decode: DecodeSection,
    pub verify: VerifySection,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn from_file(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.spec()?;
        self.train.validate()?;
        self.model.denoiser(self.train.seed).validate()?;
        if self.task.train_file.is_none() && self.task.train_size == 0 {
            bail!("task.train_size must be positive");
        }
        Ok(())
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_NAME);
        fs::write(&path, toml::to_string_pretty(self)?)?;
        Ok(path)
    }
}

/// `--out` flag, then the environment override, then `runs/<command>`.
pub fn out_dir(flag: Option<&Path>, command: &str) -> Result<PathBuf> {
    let dir = match (flag, std::env::var_os(OUT_DIR_ENV)) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(env)) => PathBuf::from(env),
        (None, None) => Path::new("runs").join(command),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}
