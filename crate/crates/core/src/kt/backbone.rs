//! Causal-LM backbone contract and the desk-scale transformer that
//! implements it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autodiff::{Matrix, ParamSet, Tape, Var};
use super::tokenizer::Tokenizer;
use crate::{Error, Result};

/// Behavioral contract of a pluggable causal language model: a tokenizer,
/// a differentiable embedding lookup, and a forward pass from embedding
/// sequences to last-layer hidden states and next-token logits.
pub trait Backbone {
    fn dim(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    fn tokenizer(&self) -> &Tokenizer;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Differentiable embedding lookup for token ids.
    fn embed_tokens(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var>;
    /// Last-layer hidden states (len×dim) for an embedding sequence.
    fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var>;
    /// Next-token logits (len×vocab) from hidden states.
    fn logits(&self, tape: &mut Tape, hidden: Var) -> Result<Var>;
    /// Restore any in-memory caches dropped by serialization.
    fn after_deserialize(&mut self) {}
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 2,
            dim: 64,
            heads: 2,
            d_ff: 128,
            max_seq_len: 512,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::domain("backbone dimensions must be positive".to_string()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::domain(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::domain("max_seq_len must be positive".to_string()));
        }
        Ok(())
    }
}

/// Pre-norm decoder-only transformer with learned positions, trained from
/// scratch. Small enough that the whole acceptance suite runs on a laptop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TinyTransformer {
    config: BackboneConfig,
    tokenizer: Tokenizer,
    params: ParamSet,
}

fn causal_mask(len: usize) -> Matrix {
    Matrix::from_fn(len, len, |i, j| if j <= i { 0.0 } else { -1e9 })
}

impl TinyTransformer {
    pub fn new(config: BackboneConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let v = tokenizer.vocab_size();
        let scale = 0.02;
        let mut params = ParamSet::new();
        params.insert("emb.tok", Matrix::randn(v, d, scale, &mut rng));
        params.insert(
            "emb.pos",
            Matrix::randn(config.max_seq_len, d, scale, &mut rng),
        );
        for layer in 0..config.layers {
            params.insert(format!("l{layer}.ln1.g"), Matrix::from_fn(1, d, |_, _| 1.0));
            params.insert(format!("l{layer}.ln1.b"), Matrix::zeros(1, d));
            for name in ["wq", "wk", "wv", "wo"] {
                params.insert(
                    format!("l{layer}.attn.{name}"),
                    Matrix::randn(d, d, scale, &mut rng),
                );
            }
            params.insert(format!("l{layer}.ln2.g"), Matrix::from_fn(1, d, |_, _| 1.0));
            params.insert(format!("l{layer}.ln2.b"), Matrix::zeros(1, d));
            params.insert(
                format!("l{layer}.ff.w1"),
                Matrix::randn(d, config.d_ff, scale, &mut rng),
            );
            params.insert(format!("l{layer}.ff.b1"), Matrix::zeros(1, config.d_ff));
            params.insert(
                format!("l{layer}.ff.w2"),
                Matrix::randn(config.d_ff, d, scale, &mut rng),
            );
            params.insert(format!("l{layer}.ff.b2"), Matrix::zeros(1, d));
        }
        params.insert("ln_f.g", Matrix::from_fn(1, d, |_, _| 1.0));
        params.insert("ln_f.b", Matrix::zeros(1, d));
        params.insert("out.w", Matrix::randn(d, v, scale, &mut rng));
        Ok(TinyTransformer {
            config,
            tokenizer,
            params,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn attention(&self, tape: &mut Tape, x: Var, layer: usize, mask: Var) -> Result<Var> {
        let d = self.config.dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let wq = tape.param(&self.params, &format!("l{layer}.attn.wq"));
        let wk = tape.param(&self.params, &format!("l{layer}.attn.wk"));
        let wv = tape.param(&self.params, &format!("l{layer}.attn.wv"));
        let wo = tape.param(&self.params, &format!("l{layer}.attn.wo"));
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.col_slice(q, h * dh, dh)?;
            let kh = tape.col_slice(k, h * dh, dh)?;
            let vh = tape.col_slice(v, h * dh, dh)?;
            let kt = tape.transpose(kh);
            let raw = tape.matmul(qh, kt)?;
            let scaled = tape.affine(raw, 1.0 / (dh as f64).sqrt(), 0.0);
            let masked = tape.add(scaled, mask)?;
            let attn = tape.softmax_rows(masked);
            head_outputs.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&head_outputs)?;
        tape.matmul(merged, wo)
    }

    fn feed_forward(&self, tape: &mut Tape, x: Var, layer: usize) -> Result<Var> {
        let w1 = tape.param(&self.params, &format!("l{layer}.ff.w1"));
        let b1 = tape.param(&self.params, &format!("l{layer}.ff.b1"));
        let w2 = tape.param(&self.params, &format!("l{layer}.ff.w2"));
        let b2 = tape.param(&self.params, &format!("l{layer}.ff.b2"));
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row_broadcast(h, b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2)?;
        tape.add_row_broadcast(h, b2)
    }
}

impl Backbone for TinyTransformer {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn after_deserialize(&mut self) {
        self.tokenizer.rebuild_lookup();
    }

    fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn embed_tokens(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let table = tape.param(&self.params, "emb.tok");
        tape.gather(table, ids)
    }

    fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let (len, dim) = tape.shape(input);
        if dim != self.config.dim {
            return Err(Error::domain(format!(
                "input width {dim} does not match model dim {}",
                self.config.dim
            )));
        }
        if len > self.config.max_seq_len {
            return Err(Error::domain(format!(
                "sequence length {len} exceeds context window {}",
                self.config.max_seq_len
            )));
        }
        let pos_table = tape.param(&self.params, "emb.pos");
        let pos = tape.row_slice(pos_table, 0, len)?;
        let mut x = tape.add(input, pos)?;
        let mask = tape.leaf(causal_mask(len));
        for layer in 0..self.config.layers {
            let g1 = tape.param(&self.params, &format!("l{layer}.ln1.g"));
            let b1 = tape.param(&self.params, &format!("l{layer}.ln1.b"));
            let normed = tape.layer_norm_rows(x, g1, b1)?;
            let attn = self.attention(tape, normed, layer, mask)?;
            x = tape.add(x, attn)?;
            let g2 = tape.param(&self.params, &format!("l{layer}.ln2.g"));
            let b2 = tape.param(&self.params, &format!("l{layer}.ln2.b"));
            let normed = tape.layer_norm_rows(x, g2, b2)?;
            let ff = self.feed_forward(tape, normed, layer)?;
            x = tape.add(x, ff)?;
        }
        let gf = tape.param(&self.params, "ln_f.g");
        let bf = tape.param(&self.params, "ln_f.b");
        tape.layer_norm_rows(x, gf, bf)
    }

    fn logits(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let w = tape.param(&self.params, "out.w");
        tape.matmul(hidden, w)
    }
}
