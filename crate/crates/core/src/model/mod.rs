//! Tiny bidirectional mask-predicting transformer.
//!
//! Pre-norm blocks with RMS normalization, rotary position encoding on the
//! queries and keys, full (non-causal) multi-head attention and a SiLU
//! feed-forward layer. Gradients are written out by hand in [`backprop`], so
//! the model is generic over the scalar type: `f64` for gradient checks,
//! `f32` for training.

pub mod backprop;
pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod optim;

use std::fmt::Debug;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WeftError};
use crate::losses::WeightedCe;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type of the denoiser.
pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    const DTYPE: DType;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Row-major tensor with explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    /// Normal samples truncated (by rejection) to three standard deviations.
    fn normal<R: rand::Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let mut draw = || loop {
            let x: f64 = dist.sample(rng);
            if x.abs() <= 3.0 * std {
                return F::from_f64(x);
            }
        };
        Tensor { shape: shape.to_vec(), data: (0..shape.iter().product()).map(|_| draw()).collect() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Weight initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Truncated normal scaled by fan-in: `1/√fan_in` for input projections,
    /// `1/√(2·fan_in·(layer+1))` for output projections, `1/√d_model` for the
    /// embedding and the head.
    #[default]
    Mitchell,
    /// Plain `N(0, init_std²)` everywhere.
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    pub rms_norm_eps: f64,
    pub rope_theta: f64,
    pub init_std: f64,
    #[serde(default)]
    pub init: InitScheme,
    pub mask_token_id: u32,
    pub pad_token_id: u32,
    pub seed: u64,
}

impl DenoiserConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn desk(vocab_size: usize, mask_token_id: u32, pad_token_id: u32) -> Self {
        DenoiserConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_hidden: 256,
            max_seq_len: 128,
            rms_norm_eps: 1e-5,
            rope_theta: 10_000.0,
            init_std: 0.02,
            init: InitScheme::Mitchell,
            mask_token_id,
            pad_token_id,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(WeftError::Config(m));
        if self.vocab_size < 2 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ffn_hidden == 0 {
            return fail("model dimensions must be positive (vocab >= 2)".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return fail("rotary encoding needs an even head dimension".into());
        }
        if self.mask_token_id as usize >= self.vocab_size || self.pad_token_id as usize >= self.vocab_size {
            return fail("mask/pad ids must be inside the vocabulary".into());
        }
        if self.max_seq_len == 0 || !(self.rms_norm_eps > 0.0) || !(self.rope_theta > 0.0) || !(self.init_std > 0.0) {
            return fail("max_seq_len, rms_norm_eps, rope_theta and init_std must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.d_model, self.ffn_hidden);
        v * d + self.n_layers * (2 * d + 4 * d * d + 2 * d * f) + d + d * v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub attn_norm: Tensor<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub ffn_norm: Tensor<F>,
    pub w_up: Tensor<F>,
    pub w_down: Tensor<F>,
}

/// All trainable tensors. Weight matrices are stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<F> {
    pub tok_emb: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_norm: Tensor<F>,
    pub lm_head: Tensor<F>,
}

impl<F: Scalar> DenoiserParams<F> {
    pub fn init(cfg: &DenoiserConfig) -> Self {
        let mut r = rng::stream(cfg.seed, Stream::Init);
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.ffn_hidden);
        let (fd, ff) = (d as f64, f as f64);
        let std = |mitchell: f64| match cfg.init {
            InitScheme::Mitchell => mitchell,
            InitScheme::Normal => cfg.init_std,
        };
        let tok_emb = Tensor::normal(&[v, d], std(fd.sqrt().recip()), &mut r);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let depth = 2.0 * (l + 1) as f64;
                LayerParams {
                    attn_norm: Tensor::filled(&[d], F::one()),
                    wq: Tensor::normal(&[d, d], std(fd.sqrt().recip()), &mut r),
                    wk: Tensor::normal(&[d, d], std(fd.sqrt().recip()), &mut r),
                    wv: Tensor::normal(&[d, d], std(fd.sqrt().recip()), &mut r),
                    wo: Tensor::normal(&[d, d], std((depth * fd).sqrt().recip()), &mut r),
                    ffn_norm: Tensor::filled(&[d], F::one()),
                    w_up: Tensor::normal(&[d, f], std(fd.sqrt().recip()), &mut r),
                    w_down: Tensor::normal(&[f, d], std((depth * ff).sqrt().recip()), &mut r),
                }
            })
            .collect();
        let lm_head = Tensor::normal(&[d, v], std(fd.sqrt().recip()), &mut r);
        DenoiserParams { tok_emb, layers, final_norm: Tensor::filled(&[d], F::one()), lm_head }
    }

    /// Zero tensors with the same layout, used for gradients and moments.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = F::zero());
        }
        z
    }

    /// Stable tensor names, aligned with [`Self::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["tok_emb".to_string()];
        for i in 0..self.layers.len() {
            for n in ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_up", "w_down"] {
                out.push(format!("layers.{i}.{n}"));
            }
        }
        out.push("final_norm".into());
        out.push("lm_head".into());
        out
    }

    /// Flat views of every tensor, in visiting order.
    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut out = vec![&self.tok_emb];
        for l in &self.layers {
            out.extend([&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.w_up, &l.w_down]);
        }
        out.push(&self.final_norm);
        out.push(&self.lm_head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.tok_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += scale · other`, elementwise over matching layouts.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + scale * y;
            }
        }
    }

    /// Euclidean norm over all entries, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.data.iter()).map(|&x| Scalar::to_f64(x) * Scalar::to_f64(x)).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn check_layout(&self, cfg: &DenoiserConfig) -> Result<()> {
        let reference = DenoiserParams::<F>::zeros_layout(cfg);
        let (a, b) = (self.tensors(), reference.tensors());
        if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.shape != y.shape) {
            return Err(WeftError::Shape("parameter layout does not match config".into()));
        }
        Ok(())
    }

    fn zeros_layout(cfg: &DenoiserConfig) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.ffn_hidden);
        DenoiserParams {
            tok_emb: Tensor::zeros(&[v, d]),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams {
                    attn_norm: Tensor::zeros(&[d]),
                    wq: Tensor::zeros(&[d, d]),
                    wk: Tensor::zeros(&[d, d]),
                    wv: Tensor::zeros(&[d, d]),
                    wo: Tensor::zeros(&[d, d]),
                    ffn_norm: Tensor::zeros(&[d]),
                    w_up: Tensor::zeros(&[d, f]),
                    w_down: Tensor::zeros(&[f, d]),
                })
                .collect(),
            final_norm: Tensor::zeros(&[d]),
            lm_head: Tensor::zeros(&[d, v]),
        }
    }
}

/// Something that maps a token sequence to per-position logits. Implemented
/// by the denoiser and by test stubs used in decoding checks.
pub trait MaskPredictor {
    fn vocab_size(&self) -> usize;
    fn mask_token_id(&self) -> u32;
    /// Row-major `[tokens.len(), vocab_size]` logits.
    fn predict(&self, tokens: &[u32]) -> Result<Vec<f64>>;
}

/// Parameters plus configuration, with an instrumented forward counter.
#[derive(Debug)]
pub struct Denoiser<F> {
    pub config: DenoiserConfig,
    pub params: DenoiserParams<F>,
    forward_calls: AtomicU64,
}

impl<F: Scalar> Clone for Denoiser<F> {
    fn clone(&self) -> Self {
        Denoiser { config: self.config, params: self.params.clone(), forward_calls: AtomicU64::new(self.forward_calls()) }
    }
}

impl<F: Scalar> Denoiser<F> {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::from_parts(config, DenoiserParams::init(&config)))
    }

    pub fn from_parts(config: DenoiserConfig, params: DenoiserParams<F>) -> Self {
        Denoiser { config, params, forward_calls: AtomicU64::new(0) }
    }

    /// Number of sequence forward passes run so far.
    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.max_seq_len {
            return Err(WeftError::Shape(format!("sequence length {} outside 1..={}", tokens.len(), self.config.max_seq_len)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(WeftError::TokenOutOfRange { id: bad as usize, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Logits `[T, V]` for one sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<Vec<F>> {
        self.check_tokens(tokens)?;
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        Ok(backprop::forward(&self.params, &self.config, tokens).logits)
    }

    pub fn forward_batch(&self, batch: &[Vec<u32>]) -> Result<Vec<Vec<F>>> {
        batch.iter().map(|s| self.forward(s)).collect()
    }

    /// Loss value and exact parameter gradients of a weighted cross-entropy
    /// objective over one sequence. Runs (and counts) one forward pass.
    pub fn backward(&self, tokens: &[u32], objective: &WeightedCe) -> Result<(f64, DenoiserParams<F>)> {
        self.check_tokens(tokens)?;
        for t in &objective.terms {
            if t.pos >= tokens.len() || t.label as usize >= self.config.vocab_size || !t.coef.is_finite() {
                return Err(WeftError::InvalidArgument(format!("bad loss term {t:?}")));
            }
        }
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let cache = backprop::forward(&self.params, &self.config, tokens);
        let (loss, grads) = backprop::backward(&self.params, &self.config, &cache, objective);
        if !loss.is_finite() {
            return Err(WeftError::NonFinite("loss".into()));
        }
        Ok((loss, grads))
    }

    /// One forward pass whose logits (as f64) are handed to `build`, which
    /// returns the objective to differentiate plus any value to pass back.
    pub fn backward_with<T>(
        &self,
        tokens: &[u32],
        build: impl FnOnce(&[f64]) -> Result<(WeightedCe, T)>,
    ) -> Result<(T, f64, DenoiserParams<F>)> {
        self.check_tokens(tokens)?;
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let cache = backprop::forward(&self.params, &self.config, tokens);
        let logits: Vec<f64> = cache.logits.iter().map(|&x| Scalar::to_f64(x)).collect();
        let (objective, extra) = build(&logits)?;
        for t in &objective.terms {
            if t.pos >= tokens.len() || t.label as usize >= self.config.vocab_size || !t.coef.is_finite() {
                return Err(WeftError::InvalidArgument(format!("bad loss term {t:?}")));
            }
        }
        let (loss, grads) = backprop::backward(&self.params, &self.config, &cache, &objective);
        if !loss.is_finite() {
            return Err(WeftError::NonFinite("loss".into()));
        }
        Ok((extra, loss, grads))
    }

    /// Summed loss and gradients over a batch, reduced in batch order.
    pub fn backward_batch(&self, batch: &[(Vec<u32>, WeightedCe)]) -> Result<(f64, DenoiserParams<F>)> {
        let mut total = 0.0;
        let mut grads = self.params.zeros_like();
        for (tokens, obj) in batch {
            let (l, g) = self.backward(tokens, obj)?;
            total += l;
            grads.add_scaled(&g, F::one());
        }
        Ok((total, grads))
    }
}

impl<F: Scalar> MaskPredictor for Denoiser<F> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn mask_token_id(&self) -> u32 {
        self.config.mask_token_id
    }

    fn predict(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        Ok(self.forward(tokens)?.into_iter().map(Scalar::to_f64).collect())
    }
}
