use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use weft_core::decode::{evaluate, EvalReport};
use weft_core::model::checkpoint::{self, Checkpoint};
use weft_core::model::{DType, Denoiser, Scalar};
use weft_core::tasks::{Split, TaskInstance};
use weft_core::trainer::{LossArm, SchemeName, TrainConfig, Trainer};
use weft_core::verify::{run_suite, Faults, VerifyReport};

use crate::config::RunConfig;
use crate::Usage;

pub const REPORT_VERIFY: &str = "verify_report.json";
pub const REPORT_EVAL: &str = "eval_report.json";
pub const REPORT_BENCH: &str = "bench_report.json";
pub const REPORT_TRAIN: &str = "train_summary.json";
pub const METRICS: &str = "metrics.jsonl";
pub const TIMINGS: &str = "timings.jsonl";
pub const CHECKPOINT: &str = "model.ckpt";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn verify(cfg: &RunConfig, faults: Faults, out: &Path) -> Result<bool> {
    let report: VerifyReport = run_suite(cfg.verify.profile, cfg.train.seed, faults)?;
    for c in &report.checks {
        println!(
            "{} {:<30} observed {:.3e}  tolerance {:.1e}  ({:.2}s)",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.observed,
            c.tolerance,
            c.seconds
        );
    }
    write_json(&out.join(REPORT_VERIFY), &report)?;
    Ok(report.passed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub total_steps: u64,
    pub examples: usize,
    pub final_loss: Option<f64>,
    pub forward_passes: u64,
    pub skipped_steps: usize,
    pub wall_seconds: f64,
    pub checkpoint: PathBuf,
}

fn train_typed<F: Scalar>(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let data = cfg.task.load(Split::Train, cfg.train.seed).map_err(Usage::wrap)?;
    let model = Denoiser::<F>::new(cfg.model.denoiser(cfg.train.seed))?;
    let mut trainer = Trainer::new(cfg.train, model, data).map_err(|e| Usage::wrap(e.into()))?;
    let mut metrics = BufWriter::new(File::create(out.join(METRICS))?);
    let mut timings = BufWriter::new(File::create(out.join(TIMINGS))?);
    let start = Instant::now();
    let records = trainer.run(u64::MAX, Some(&mut metrics), Some(&mut timings))?;
    metrics.flush()?;
    timings.flush()?;
    let ckpt = out.join(CHECKPOINT);
    checkpoint::save(&ckpt, &trainer.model.config, &trainer.model.params, Some(&trainer.opt))?;
    Ok(TrainSummary {
        steps: trainer.step_count(),
        total_steps: trainer.total_steps(),
        examples: records.iter().map(|r| r.examples).sum(),
        final_loss: records.last().map(|r| r.loss),
        forward_passes: records.iter().map(|r| r.forward_passes).sum(),
        skipped_steps: records.iter().filter(|r| r.skipped).count(),
        wall_seconds: start.elapsed().as_secs_f64(),
        checkpoint: ckpt,
    })
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let summary = match cfg.train.dtype {
        DType::F32 => train_typed::<f32>(cfg, out)?,
        DType::F64 => train_typed::<f64>(cfg, out)?,
    };
    println!(
        "trained {} steps ({} forward passes, {:.1}s), final loss {}",
        summary.steps,
        summary.forward_passes,
        summary.wall_seconds,
        summary.final_loss.map_or("n/a".into(), |l| format!("{l:.4}"))
    );
    write_json(&out.join(REPORT_TRAIN), &summary)?;
    Ok(summary)
}

fn eval_typed<F: Scalar>(bytes: &[u8], cfg: &RunConfig, data: &[TaskInstance], id: String) -> Result<EvalReport> {
    let Checkpoint { config, params, .. } = checkpoint::decode::<F>(bytes).map_err(|e| Usage::wrap(e.into()))?;
    let model = Denoiser::from_parts(config, params);
    let decode = cfg.decode.resolve(&cfg.task.spec()?, cfg.train.seed).map_err(Usage::wrap)?;
    Ok(evaluate(&model, data, &decode, Some(id))?)
}

pub fn eval(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<EvalReport> {
    let bytes = fs::read(ckpt).with_context(|| format!("reading checkpoint {}", ckpt.display())).map_err(Usage::wrap)?;
    let data = cfg.task.load(Split::Eval, cfg.train.seed).map_err(Usage::wrap)?;
    let id = ckpt.display().to_string();
    let report = match checkpoint::peek_dtype(&bytes).map_err(|e| Usage::wrap(e.into()))? {
        DType::F32 => eval_typed::<f32>(&bytes, cfg, &data, id)?,
        DType::F64 => eval_typed::<f64>(&bytes, cfg, &data, id)?,
    };
    for (task, acc) in &report.per_task {
        println!("{task}: {}/{} exact match ({:.3})", acc.correct, acc.samples, acc.accuracy);
    }
    write_json(&out.join(REPORT_EVAL), &report)?;
    Ok(report)
}

/// Wall-time overhead of WeFT over SFT quoted for comparison.
pub const REFERENCE_OVERHEAD_PCT: f64 = 24.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchArm {
    pub loss: LossArm,
    pub scheme: SchemeName,
    pub steps: u64,
    pub examples: usize,
    pub forward_passes: u64,
    pub wall_seconds: f64,
    pub ms_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub steps: u64,
    pub arms: Vec<BenchArm>,
    /// WeFT forward passes divided by SFT forward passes.
    pub forward_ratio: Option<f64>,
    pub forward_ratio_exact: bool,
    pub wall_ratio: Option<f64>,
    pub wall_overhead_pct: Option<f64>,
    pub reference_overhead_pct: f64,
}

fn bench_arm<F: Scalar>(train: TrainConfig, cfg: &RunConfig, data: &[TaskInstance]) -> Result<BenchArm> {
    let model = Denoiser::<F>::new(cfg.model.denoiser(train.seed))?;
    let mut trainer = Trainer::new(train, model, data.to_vec()).map_err(|e| Usage::wrap(e.into()))?;
    let start = Instant::now();
    let records = trainer.run_to_end()?;
    let wall = start.elapsed().as_secs_f64();
    let counted: u64 = records.iter().map(|r| r.forward_passes).sum();
    anyhow::ensure!(counted == trainer.model.forward_calls(), "forward counter disagrees with step records");
    Ok(BenchArm {
        loss: train.loss,
        scheme: train.scheme,
        steps: records.len() as u64,
        examples: records.iter().map(|r| r.examples).sum(),
        forward_passes: counted,
        wall_seconds: wall,
        ms_per_step: if records.is_empty() { 0.0 } else { wall * 1e3 / records.len() as f64 },
    })
}

fn bench_typed<F: Scalar>(cfg: &RunConfig) -> Result<BenchReport> {
    let steps = cfg.bench.steps;
    let mut report = BenchReport {
        steps,
        arms: Vec::new(),
        forward_ratio: None,
        forward_ratio_exact: true,
        wall_ratio: None,
        wall_overhead_pct: None,
        reference_overhead_pct: REFERENCE_OVERHEAD_PCT,
    };
    if steps == 0 {
        return Ok(report);
    }
    let data = cfg.task.load(Split::Train, cfg.train.seed).map_err(Usage::wrap)?;
    let sft = TrainConfig { loss: LossArm::Sft, max_steps: steps, ..cfg.train };
    let weft = TrainConfig { loss: LossArm::Weft, max_steps: steps, ..cfg.train };
    let a = bench_arm::<F>(sft, cfg, &data)?;
    let b = bench_arm::<F>(weft, cfg, &data)?;
    let forward_ratio = b.forward_passes as f64 / a.forward_passes as f64;
    let wall_ratio = b.wall_seconds / a.wall_seconds;
    report.forward_ratio = Some(forward_ratio);
    report.forward_ratio_exact = a.steps == b.steps && b.forward_passes == 2 * a.forward_passes;
    report.wall_ratio = Some(wall_ratio);
    report.wall_overhead_pct = Some((wall_ratio - 1.0) * 100.0);
    report.arms = vec![a, b];
    Ok(report)
}

pub fn bench(cfg: &RunConfig, out: &Path) -> Result<BenchReport> {
    let report = match cfg.train.dtype {
        DType::F32 => bench_typed::<f32>(cfg)?,
        DType::F64 => bench_typed::<f64>(cfg)?,
    };
    if report.arms.is_empty() {
        println!("zero steps requested; empty report");
    }
    for arm in &report.arms {
        println!(
            "{:?}: {} steps, {} forward passes, {:.1} ms/step",
            arm.loss, arm.steps, arm.forward_passes, arm.ms_per_step
        );
    }
    if let (Some(f), Some(w)) = (report.forward_ratio, report.wall_ratio) {
        println!(
            "forward ratio {f:.3} (expected 2.000), wall ratio {w:.3} ({:+.1}% vs {REFERENCE_OVERHEAD_PCT}% quoted for an 8B model)",
            (w - 1.0) * 100.0
        );
    }
    write_json(&out.join(REPORT_BENCH), &report)?;
    Ok(report)
}
