//! Decoder-only transformer with an explicit reverse-mode pass.
//!
//! Architecture: token + learned positional embeddings, `n_layers` pre-norm
//! blocks (causal multi-head attention, then a GELU MLP), a final layer norm
//! and an untied output head. All parameters live in one flat `Vec<f64>`
//! addressed through a [`Layout`]; the MLP block of each layer is stored
//! contiguously as `W_in` (d_model×d_mlp, row-major), `W_out` (d_mlp×d_model,
//! row-major), `b_in`, `b_out`, which is also the flattening order of a
//! [`LayerGradient`].

mod backward;
mod checkpoint;
mod forward;
mod train;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};

pub use backward::GradScope;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{argmax, log_softmax, ActivationTrace, EmbedNoise, ForwardCache, Hooks, MlpPatch, ResidualPatch};
pub use train::{train_memorize, train_sequences, StepRecord, TrainOptions, TrainOutcome, TrainingLog};

pub(crate) const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub context_len: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// Default shape (8 layers, d_model 64, 4 heads, d_mlp 256, context 32).
    pub fn with_vocab(vocab_size: usize) -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_mlp: 256,
            context_len: 32,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("context_len", self.context_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameters in one layer's MLP block.
    pub fn mlp_param_count(&self) -> usize {
        2 * self.d_model * self.d_mlp + self.d_mlp + self.d_model
    }
}

/// Offsets of one block's tensors inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_q: usize,
    pub b_q: usize,
    pub w_k: usize,
    pub b_k: usize,
    pub w_v: usize,
    pub b_v: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_in: usize,
    pub w_out: usize,
    pub b_in: usize,
    pub b_out: usize,
    pub end: usize,
}

impl LayerOffsets {
    pub fn mlp(&self) -> Range<usize> {
        self.w_in..self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let (d, m) = (c.d_model, c.d_mlp);
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok_emb = take(c.vocab_size * d);
        let pos_emb = take(c.context_len * d);
        let mut layers = Vec::with_capacity(c.n_layers);
        for _ in 0..c.n_layers {
            let ln1_g = take(d);
            let ln1_b = take(d);
            let w_q = take(d * d);
            let b_q = take(d);
            let w_k = take(d * d);
            let b_k = take(d);
            let w_v = take(d * d);
            let b_v = take(d);
            let w_o = take(d * d);
            let b_o = take(d);
            let ln2_g = take(d);
            let ln2_b = take(d);
            let w_in = take(d * m);
            let w_out = take(m * d);
            let b_in = take(m);
            let b_out = take(d);
            let end = take(0);
            layers.push(LayerOffsets {
                ln1_g,
                ln1_b,
                w_q,
                b_q,
                w_k,
                b_k,
                w_v,
                b_v,
                w_o,
                b_o,
                ln2_g,
                ln2_b,
                w_in,
                w_out,
                b_in,
                b_out,
                end,
            });
        }
        let lnf_g = take(d);
        let lnf_b = take(d);
        let head = take(d * c.vocab_size);
        let total = take(0);
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head,
            total,
        }
    }
}

/// Gradient of a loss restricted to one layer's MLP parameters, flattened as
/// `W_in` row-major, `W_out` row-major, `b_in`, `b_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub layer: usize,
    pub flat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
    pub seed: u64,
}

impl ToyModel {
    /// Gaussian init (std 0.02, residual output projections scaled by
    /// 1/sqrt(2·n_layers)); zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let proj_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let (d, m, v) = (config.d_model, config.d_mlp, config.vocab_size);
        let mut fill = |params: &mut [f64], off: usize, n: usize, scale: f64| {
            for p in &mut params[off..off + n] {
                *p = normal.sample(&mut rng) * scale;
            }
        };
        fill(&mut params, layout.tok_emb, v * d, 1.0);
        fill(&mut params, layout.pos_emb, config.context_len * d, 1.0);
        for l in &layout.layers {
            fill(&mut params, l.w_q, d * d, 1.0);
            fill(&mut params, l.w_k, d * d, 1.0);
            fill(&mut params, l.w_v, d * d, 1.0);
            fill(&mut params, l.w_o, d * d, proj_scale);
            fill(&mut params, l.w_in, d * m, 1.0);
            fill(&mut params, l.w_out, m * d, proj_scale);
            params[l.ln1_g..l.ln1_g + d].fill(1.0);
            params[l.ln2_g..l.ln2_g + d].fill(1.0);
        }
        params[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        fill(&mut params, layout.head, d * v, 1.0);
        Ok(Self {
            config,
            layout,
            params,
            seed,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub(crate) fn slice(&self, off: usize, len: usize) -> &[f64] {
        &self.params[off..off + len]
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.n_layers {
            return Err(Error::invalid(format!(
                "layer {layer} out of range 0..{}",
                self.config.n_layers
            )));
        }
        Ok(())
    }

    /// `W_out` of `layer` (d_mlp×d_model, row-major).
    pub fn w_out(&self, layer: usize) -> &[f64] {
        let o = self.layout.layers[layer].w_out;
        self.slice(o, self.config.d_mlp * self.config.d_model)
    }

    pub fn w_out_mut(&mut self, layer: usize) -> &mut [f64] {
        let o = self.layout.layers[layer].w_out;
        let n = self.config.d_mlp * self.config.d_model;
        &mut self.params[o..o + n]
    }

    pub fn b_out(&self, layer: usize) -> &[f64] {
        let o = self.layout.layers[layer].b_out;
        self.slice(o, self.config.d_model)
    }

    /// Applies `W_out` of `layer` to a key: `Σ_i key[i] · W_out[i, :]`.
    pub fn apply_w_out(&self, layer: usize, key: &[f64]) -> Vec<f64> {
        crate::linalg::vec_mat(key, self.w_out(layer), self.config.d_model)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds context length {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_mlp_param_count() {
        let c = ModelConfig::with_vocab(50);
        assert_eq!(c.mlp_param_count(), 33_088);
        let layout = Layout::new(&c);
        for l in &layout.layers {
            assert_eq!(l.mlp().len(), 33_088);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::with_vocab(50);
        c.d_model = 63;
        assert!(matches!(ToyModel::init(c, 0), Err(Error::InvalidArgument(_))));
        c.d_model = 64;
        c.vocab_size = 0;
        assert!(ToyModel::init(c, 0).is_err());
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let c = ModelConfig::with_vocab(40);
        let a = ToyModel::init(c, 3).unwrap();
        let b = ToyModel::init(c, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
        assert_ne!(a.params, ToyModel::init(c, 4).unwrap().params);
        let l = &a.layout.layers[0];
        assert!(a.params[l.b_in..l.end].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
