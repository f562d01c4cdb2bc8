//! Desk-scale reasoning tasks: generators, tokenization and exact verifiers.

pub mod countdown;
pub mod sudoku;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WeftError};
use crate::rng::{self, Stream};

/// Single-character vocabulary shared by every task.
const SYMBOLS: &[u8; 20] = b"0123456789+-*=%_,>.#";
pub const PAD: u32 = 18;
pub const MASK: u32 = 19;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Vocab;

impl Vocab {
    pub fn size(&self) -> usize {
        SYMBOLS.len()
    }

    pub fn mask_id(&self) -> u32 {
        MASK
    }

    pub fn pad_id(&self) -> u32 {
        PAD
    }

    pub fn id(&self, c: char) -> Result<u32> {
        SYMBOLS
            .iter()
            .position(|&s| s as char == c)
            .map(|p| p as u32)
            .ok_or_else(|| WeftError::InvalidArgument(format!("symbol {c:?} not in vocabulary")))
    }

    pub fn symbol(&self, id: u32) -> Result<char> {
        SYMBOLS
            .get(id as usize)
            .map(|&b| b as char)
            .ok_or(WeftError::TokenOutOfRange { id: id as usize, vocab: SYMBOLS.len() })
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars().map(|c| self.id(c)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        ids.iter().map(|&i| self.symbol(i)).collect()
    }
}

/// Answer tokens with trailing padding removed; `None` if a pad or mask
/// appears before the end of the content.
pub fn strip_padding(answer: &[u32]) -> Option<&[u32]> {
    let end = answer.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1);
    let body = &answer[..end];
    if body.iter().any(|&t| t == PAD || t == MASK) {
        return None;
    }
    Some(body)
}

fn pad_to(mut ids: Vec<u32>, len: usize) -> Vec<u32> {
    debug_assert!(ids.len() <= len);
    ids.resize(len, PAD);
    ids
}

/// Ground truth and checking data carried with each instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Payload {
    Modadd { a: u32, b: u32, modulus: u32 },
    Sudoku4 { puzzle: Vec<u8>, solution: Vec<u8> },
    Countdown { operands: Vec<u32>, target: i64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt_ids: Vec<u32>,
    pub answer_ids: Vec<u32>,
    pub payload: Payload,
}

impl TaskInstance {
    pub fn task_name(&self) -> &'static str {
        match self.payload {
            Payload::Modadd { .. } => "modadd",
            Payload::Sudoku4 { .. } => "sudoku4",
            Payload::Countdown { .. } => "countdown",
        }
    }

    pub fn seq_len(&self) -> usize {
        self.prompt_ids.len() + self.answer_ids.len()
    }

    /// Prompt followed by the clean answer.
    pub fn tokens(&self) -> Vec<u32> {
        let mut t = self.prompt_ids.clone();
        t.extend_from_slice(&self.answer_ids);
        t
    }

    /// Exact check of a decoded answer. Malformed answers are rejected.
    pub fn verify(&self, answer: &[u32]) -> bool {
        match &self.payload {
            Payload::Modadd { a, b, modulus } => verify_modadd(*a, *b, *modulus, answer),
            Payload::Sudoku4 { puzzle, .. } => sudoku::verify(puzzle, answer),
            Payload::Countdown { operands, target } => countdown::verify(operands, *target, answer),
        }
    }
}

/// Which task to generate, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum TaskSpec {
    Modadd { modulus: u32 },
    Sudoku4 { min_givens: usize, max_givens: usize },
    Countdown,
}

impl TaskSpec {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "modadd" => Ok(TaskSpec::Modadd { modulus: 10 }),
            "sudoku4" | "sudoku" => Ok(TaskSpec::Sudoku4 { min_givens: 8, max_givens: 11 }),
            "countdown" => Ok(TaskSpec::Countdown),
            other => Err(WeftError::Config(format!("unknown task {other:?} (modadd, sudoku4, countdown)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::Modadd { .. } => "modadd",
            TaskSpec::Sudoku4 { .. } => "sudoku4",
            TaskSpec::Countdown => "countdown",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskSpec::Modadd { modulus } if !(2..=50).contains(&modulus) => {
                Err(WeftError::Config(format!("modulus {modulus} outside 2..=50")))
            }
            TaskSpec::Sudoku4 { min_givens, max_givens } if !(4 <= min_givens && min_givens <= max_givens && max_givens <= 12) => {
                Err(WeftError::Config(format!("givens range {min_givens}..={max_givens} outside 4..=12")))
            }
            _ => Ok(()),
        }
    }

    /// Fixed answer slot length.
    pub fn answer_len(&self) -> usize {
        match self {
            TaskSpec::Modadd { .. } => MODADD_ANSWER_LEN,
            TaskSpec::Sudoku4 { .. } => 16,
            TaskSpec::Countdown => countdown::ANSWER_LEN,
        }
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TaskInstance> {
        self.validate()?;
        match *self {
            TaskSpec::Modadd { modulus } => gen_modadd(rng, modulus),
            TaskSpec::Sudoku4 { min_givens, max_givens } => {
                let n = rng.random_range(min_givens..=max_givens);
                sudoku::gen_sudoku4(rng, n)
            }
            TaskSpec::Countdown => countdown::gen_countdown_mini(rng),
        }
    }
}

pub const MODADD_ANSWER_LEN: usize = 2;

pub fn gen_modadd<R: Rng + ?Sized>(rng: &mut R, modulus: u32) -> Result<TaskInstance> {
    if !(2..=50).contains(&modulus) {
        return Err(WeftError::InvalidArgument(format!("modulus {modulus} outside 2..=50")));
    }
    let a = rng.random_range(0..modulus);
    let b = rng.random_range(0..modulus);
    modadd_instance(a, b, modulus)
}

pub fn modadd_instance(a: u32, b: u32, modulus: u32) -> Result<TaskInstance> {
    let v = Vocab;
    let prompt_ids = v.encode(&format!("{a}+{b}%{modulus}="))?;
    let answer_ids = pad_to(v.encode(&((a + b) % modulus).to_string())?, MODADD_ANSWER_LEN);
    Ok(TaskInstance { prompt_ids, answer_ids, payload: Payload::Modadd { a, b, modulus } })
}

fn verify_modadd(a: u32, b: u32, modulus: u32, answer: &[u32]) -> bool {
    let Some(body) = strip_padding(answer) else { return false };
    let want = ((a as u64 + b as u64) % modulus as u64).to_string();
    Vocab.decode(body).is_ok_and(|s| s == want)
}

/// Which half of the seed space an instance comes from. Train and eval never
/// share an index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

const EVAL_OFFSET: u64 = 1 << 31;

/// Instances `0..n` of a split; instance `i` depends only on `(seed, split, i)`.
pub fn generate_split(spec: &TaskSpec, seed: u64, split: Split, n: usize) -> Result<Vec<TaskInstance>> {
    if n as u64 >= EVAL_OFFSET {
        return Err(WeftError::TooLarge(format!("{n} instances exceed the split size")));
    }
    let base = match split {
        Split::Train => 0,
        Split::Eval => EVAL_OFFSET,
    };
    (0..n as u64).map(|i| spec.generate(&mut rng::indexed(seed, Stream::Data, base + i))).collect()
}

#[derive(Serialize, Deserialize)]
struct Record {
    task: String,
    prompt_ids: Vec<u32>,
    answer_ids: Vec<u32>,
    payload: Payload,
}

pub fn write_jsonl(path: &Path, data: &[TaskInstance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for inst in data {
        let rec = Record {
            task: inst.task_name().to_string(),
            prompt_ids: inst.prompt_ids.clone(),
            answer_ids: inst.answer_ids.clone(),
            payload: inst.payload.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let inst = TaskInstance { prompt_ids: rec.prompt_ids, answer_ids: rec.answer_ids, payload: rec.payload };
        if inst.task_name() != rec.task {
            return Err(WeftError::InvalidArgument(format!("record task {} disagrees with payload", rec.task)));
        }
        out.push(inst);
    }
    Ok(out)
}
