//! Block-wise low-confidence remasking decoder and exact-match evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WeftError};
use crate::model::MaskPredictor;
use crate::tasks::TaskInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Remasking {
    #[default]
    LowConfidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub gen_length: usize,
    pub block_length: usize,
    pub n_steps: usize,
    #[serde(default)]
    pub remasking: Remasking,
    /// Recorded for provenance; the low-confidence rule is deterministic.
    #[serde(default)]
    pub seed: u64,
}

impl DecodeConfig {
    /// `n_steps = gen_length / 2` (at least 1), one block unless
    /// `block_length` is given.
    pub fn new(gen_length: usize, block_length: Option<usize>) -> Result<Self> {
        let cfg = DecodeConfig {
            gen_length,
            block_length: block_length.unwrap_or(gen_length),
            n_steps: (gen_length / 2).max(1),
            remasking: Remasking::LowConfidence,
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(WeftError::Config(m));
        if self.gen_length == 0 || self.block_length == 0 || self.n_steps == 0 {
            return fail("gen_length, block_length and n_steps must be positive".into());
        }
        if self.gen_length % self.block_length != 0 {
            return fail(format!("block_length {} does not divide gen_length {}", self.block_length, self.gen_length));
        }
        let blocks = self.gen_length / self.block_length;
        if self.n_steps % blocks != 0 {
            return fail(format!("n_steps {} not divisible across {blocks} blocks", self.n_steps));
        }
        if self.block_length % (self.n_steps / blocks) != 0 {
            return fail(format!("{} steps per block do not divide block_length {}", self.n_steps / blocks, self.block_length));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.gen_length / self.block_length
    }

    pub fn steps_per_block(&self) -> usize {
        self.n_steps / self.blocks()
    }

    /// Tokens finalized at every step.
    pub fn tokens_per_step(&self) -> usize {
        self.block_length / self.steps_per_block()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub answer: Vec<u32>,
    /// Answer positions finalized at each step, in order of selection.
    pub finalized: Vec<Vec<usize>>,
}

/// Greedy argmax over non-mask symbols and its softmax probability (over
/// the same symbols). Ties go to the lowest id.
fn best_token(row: &[f64], mask_id: u32) -> (u32, f64) {
    let mut best = usize::MAX;
    let mut max = f64::NEG_INFINITY;
    for (j, &z) in row.iter().enumerate() {
        if j as u32 != mask_id && (z > max || best == usize::MAX) {
            best = j;
            max = z;
        }
    }
    let denom: f64 = row.iter().enumerate().filter(|&(j, _)| j as u32 != mask_id).map(|(_, &z)| (z - max).exp()).sum();
    (best as u32, 1.0 / denom)
}

/// Fills `cfg.gen_length` answer slots after `prompt`, left to right by
/// block. Each step runs one forward pass, predicts every still-masked
/// position of the current block, keeps the most confident predictions and
/// leaves the rest masked.
pub fn decode<M: MaskPredictor + ?Sized>(model: &M, prompt: &[u32], cfg: &DecodeConfig) -> Result<DecodeTrace> {
    cfg.validate()?;
    let mask = model.mask_token_id();
    let vocab = model.vocab_size();
    let start = prompt.len();
    let mut seq = prompt.to_vec();
    seq.extend(std::iter::repeat_n(mask, cfg.gen_length));
    let k = cfg.tokens_per_step();
    let mut finalized = Vec::with_capacity(cfg.n_steps);

    for block in 0..cfg.blocks() {
        let lo = start + block * cfg.block_length;
        let hi = lo + cfg.block_length;
        for _ in 0..cfg.steps_per_block() {
            let logits = model.predict(&seq)?;
            if logits.len() != seq.len() * vocab {
                return Err(WeftError::Shape(format!("predictor returned {} logits for {} positions", logits.len(), seq.len())));
            }
            let mut cands: Vec<(usize, u32, f64)> = (lo..hi)
                .filter(|&p| seq[p] == mask)
                .map(|p| {
                    let (tok, conf) = best_token(&logits[p * vocab..(p + 1) * vocab], mask);
                    (p, tok, conf)
                })
                .collect();
            // stable: equal confidence keeps left-to-right order
            cands.sort_by(|a, b| b.2.total_cmp(&a.2));
            let chosen: Vec<usize> = cands
                .iter()
                .take(k)
                .map(|&(p, tok, _)| {
                    seq[p] = tok;
                    p - start
                })
                .collect();
            finalized.push(chosen);
        }
    }
    Ok(DecodeTrace { answer: seq[start..].to_vec(), finalized })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub accuracy: f64,
    pub correct: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: BTreeMap<String, TaskAccuracy>,
    pub samples: usize,
    pub decode: DecodeConfig,
    pub checkpoint: Option<String>,
}

impl EvalReport {
    /// Accuracy over all samples.
    pub fn accuracy(&self) -> f64 {
        let correct: usize = self.per_task.values().map(|a| a.correct).sum();
        correct as f64 / self.samples as f64
    }
}

/// Decodes every instance and counts exact-match successes per task.
pub fn evaluate<M: MaskPredictor + ?Sized>(
    model: &M,
    data: &[TaskInstance],
    cfg: &DecodeConfig,
    checkpoint: Option<String>,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(WeftError::InvalidArgument("empty evaluation set".into()));
    }
    let mut per_task: BTreeMap<String, TaskAccuracy> = BTreeMap::new();
    for inst in data {
        if inst.answer_ids.len() != cfg.gen_length {
            return Err(WeftError::Config(format!(
                "gen_length {} does not match answer slot {}",
                cfg.gen_length,
                inst.answer_ids.len()
            )));
        }
        let trace = decode(model, &inst.prompt_ids, cfg)?;
        let entry = per_task.entry(inst.task_name().to_string()).or_insert(TaskAccuracy { accuracy: 0.0, correct: 0, samples: 0 });
        entry.samples += 1;
        entry.correct += inst.verify(&trace.answer) as usize;
    }
    for a in per_task.values_mut() {
        a.accuracy = a.correct as f64 / a.samples as f64;
    }
    Ok(EvalReport { per_task, samples: data.len(), decode: *cfg, checkpoint })
}
