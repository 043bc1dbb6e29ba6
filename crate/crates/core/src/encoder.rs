//! Pre-norm transformer blocks with rotary self-attention and a gated MLP.
//!
//! Block layout (shared by the encoder and the reconstruction decoder):
//!
//! ```text
//! x = x + proj(attn(rope(q), rope(k), v))      q, k, v from norm1(x)
//! x = x + fc3(norm_h(silu(fc1(h)) * fc2(h)))   h = norm2(x)
//! ```
//!
//! A final layer norm follows the last block.

use crate::autodiff::{Rotation, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, Initializer, ParamStore};
use crate::real::Real;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    /// Hidden width of the gated MLP relative to `embed_dim`.
    pub mlp_ratio: f64,
    /// Residual-branch dropout, only active in training mode.
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Full-scale configuration.
    pub fn full() -> Self {
        EncoderConfig {
            embed_dim: 792,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 8.0 / 3.0,
            dropout: 0.0,
        }
    }

    pub fn desk() -> Self {
        EncoderConfig {
            embed_dim: 96,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 8.0 / 3.0,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::validation("depth", "must be at least 1"));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::validation(
                "embed_dim",
                format!("{} is not divisible by {} heads", self.embed_dim, self.num_heads),
            ));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(Error::validation("mlp_ratio", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Adds the parameters of `cfg.depth` blocks plus the final norm under `prefix`.
pub fn init_blocks<F: Real, R: Rng>(
    store: &mut ParamStore<F>,
    init: &mut Initializer<'_, R>,
    prefix: &str,
    cfg: &EncoderConfig,
) {
    let d = cfg.embed_dim;
    let h = cfg.hidden_dim();
    for i in 0..cfg.depth {
        let b = format!("{prefix}.blocks.{i}");
        init.norm(store, &format!("{b}.norm1"), d);
        init.linear(store, &format!("{b}.attn.qkv"), d, 3 * d);
        init.linear(store, &format!("{b}.attn.proj"), d, d);
        init.norm(store, &format!("{b}.norm2"), d);
        init.linear(store, &format!("{b}.mlp.fc1"), d, h);
        init.linear(store, &format!("{b}.mlp.fc2"), d, h);
        init.norm(store, &format!("{b}.mlp.norm"), h);
        init.linear(store, &format!("{b}.mlp.fc3"), h, d);
    }
    init.norm(store, &format!("{prefix}.norm"), d);
}

/// Dropout masks for training-mode forward passes.
pub struct Dropout<'r, R: Rng> {
    pub rng: &'r mut R,
    pub rate: f64,
}

impl<R: Rng> Dropout<'_, R> {
    fn apply<F: Real>(&mut self, b: &Binder<'_, F>, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let shape = b.tape.shape(x);
        let mask = Array2::from_shape_simple_fn(shape, || {
            if self.rng.random::<f64>() < keep {
                F::of(1.0 / keep)
            } else {
                F::zero()
            }
        });
        b.tape.mul_const(x, Rc::new(mask))
    }
}

/// Optional side outputs of a forward pass.
#[derive(Default)]
pub struct Trace {
    /// Softmax attention matrices, one per (block, head), in that order.
    pub attention: Vec<Var>,
}

/// Multi-head self-attention with rotary queries and keys.
fn self_attention<F: Real>(
    b: &Binder<'_, F>,
    x: Var,
    prefix: &str,
    heads: usize,
    rot: &Rc<Rotation<F>>,
    trace: &mut Option<&mut Trace>,
) -> Var {
    let t = b.tape;
    let d = t.shape(x).1;
    let hd = d / heads;
    let scale = F::of(1.0 / (hd as f64).sqrt());
    let qkv = b.linear(x, &format!("{prefix}.qkv"));
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = t.slice_cols(qkv, h * hd, hd);
        let k = t.slice_cols(qkv, d + h * hd, hd);
        let v = t.slice_cols(qkv, 2 * d + h * hd, hd);
        let q = t.rotate(q, rot.clone());
        let q = t.scale(q, scale);
        let k = t.rotate(k, rot.clone());
        let scores = t.matmul_nt(q, k);
        let attn = t.softmax_rows(scores);
        if let Some(tr) = trace.as_deref_mut() {
            tr.attention.push(attn);
        }
        outs.push(t.matmul(attn, v));
    }
    let cat = if heads == 1 { outs[0] } else { t.concat_cols(&outs) };
    b.linear(cat, &format!("{prefix}.proj"))
}

fn gated_mlp<F: Real>(b: &Binder<'_, F>, x: Var, prefix: &str) -> Var {
    let t = b.tape;
    let a = b.linear(x, &format!("{prefix}.fc1"));
    let g = b.linear(x, &format!("{prefix}.fc2"));
    let a = t.silu(a);
    let m = t.mul(a, g);
    let m = b.layer_norm(m, &format!("{prefix}.norm"), NORM_EPS);
    b.linear(m, &format!("{prefix}.fc3"))
}

/// Runs the blocks stored under `prefix` over `x` (`[T, D]`, CLS in row 0).
///
/// `rot` must have one row per token; the CLS row carries the zero rotation.
/// Passing `dropout` selects training mode.
pub fn encoder_forward<F: Real, R: Rng>(
    b: &Binder<'_, F>,
    prefix: &str,
    x: Var,
    rot: &Rc<Rotation<F>>,
    cfg: &EncoderConfig,
    mut dropout: Option<&mut Dropout<'_, R>>,
    mut trace: Option<&mut Trace>,
) -> Result<Var> {
    let t = b.tape;
    let (tokens, d) = t.shape(x);
    if d != cfg.embed_dim {
        return Err(Error::shape(
            "encoder_forward",
            format!("embedding width {d} vs embed_dim {}", cfg.embed_dim),
        ));
    }
    if rot.cos.nrows() != tokens || rot.cos.ncols() * 2 != cfg.head_dim() {
        return Err(Error::shape(
            "encoder_forward",
            format!(
                "rotation table {:?} for {tokens} tokens of head_dim {}",
                rot.cos.dim(),
                cfg.head_dim()
            ),
        ));
    }
    let mut x = x;
    for i in 0..cfg.depth {
        let blk = format!("{prefix}.blocks.{i}");
        let h = b.layer_norm(x, &format!("{blk}.norm1"), NORM_EPS);
        let mut a = self_attention(b, h, &format!("{blk}.attn"), cfg.num_heads, rot, &mut trace);
        if let Some(dr) = dropout.as_deref_mut() {
            a = dr.apply(b, a);
        }
        x = t.add(x, a);
        let h = b.layer_norm(x, &format!("{blk}.norm2"), NORM_EPS);
        let mut m = gated_mlp(b, h, &format!("{blk}.mlp"));
        if let Some(dr) = dropout.as_deref_mut() {
            m = dr.apply(b, m);
        }
        x = t.add(x, m);
    }
    Ok(b.layer_norm(x, &format!("{prefix}.norm"), NORM_EPS))
}
