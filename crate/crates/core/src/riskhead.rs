//! Two-token risk head.
//!
//! The CLS output summarizes the whole lung; a learned query pools the patch
//! outputs with multi-head attention. Both are concatenated and mapped by the
//! cumulative hazard layer onto six non-decreasing yearly risks:
//!
//! ```text
//! p_n = sigmoid(b + Σ_{k≤n} act(r_k)),  act ∈ {relu, softplus}
//! ```

use crate::autodiff::{Tape, Var};
use crate::encoder::encoder_forward;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{Binder, Initializer, ParamStore};
use crate::phantom::HORIZON;
use crate::real::Real;
use crate::tokenizer::{embed_patches, patchify};
use crate::volume::Volume;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IncrementActivation {
    #[default]
    Relu,
    Softplus,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Heads of the pooling attention; 0 means "same as the encoder".
    pub pool_heads: usize,
    pub increment: IncrementActivation,
}

/// Pooling attention over the patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// `[H, N]`, each row a distribution over patches.
    pub weights: Array2<f64>,
    /// Head average of `weights`.
    pub pooled_weights: Vec<f64>,
}

impl AttentionMap {
    pub fn head_count(&self) -> usize {
        self.weights.nrows()
    }

    pub fn from_head_weights(weights: Array2<f64>) -> Self {
        let h = weights.nrows() as f64;
        let pooled_weights = weights.columns().into_iter().map(|c| c.sum() / h).collect();
        AttentionMap {
            weights,
            pooled_weights,
        }
    }

    /// Uniform attention over `n` patches (single head).
    pub fn uniform(n: usize) -> Self {
        Self::from_head_weights(Array2::from_elem((1, n), 1.0 / n as f64))
    }

    /// Nonnegativity and per-head normalization within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        let rows_ok = self
            .weights
            .outer_iter()
            .all(|r| (r.sum() - 1.0).abs() <= tol && r.iter().all(|&w| w >= 0.0));
        let pooled: f64 = self.pooled_weights.iter().sum();
        rows_ok && (pooled - 1.0).abs() <= tol
    }
}

/// Six cumulative cancer probabilities, years 1 to 6.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskPrediction {
    pub cum_probs: [f64; HORIZON],
    pub base_logit: f64,
    pub hazard_increments: [f64; HORIZON],
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl RiskPrediction {
    /// Builds the prediction from a base logit and nonnegative increments.
    pub fn from_parts(base_logit: f64, hazard_increments: [f64; HORIZON]) -> Self {
        let mut acc = base_logit;
        let cum_probs = std::array::from_fn(|n| {
            acc += hazard_increments[n];
            sigmoid(acc)
        });
        RiskPrediction {
            cum_probs,
            base_logit,
            hazard_increments,
        }
    }

    /// Largest decrease between consecutive years (0 when isotone).
    pub fn max_violation(&self) -> f64 {
        self.cum_probs
            .windows(2)
            .map(|w| (w[0] - w[1]).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn is_isotone(&self, slack: f64) -> bool {
        self.max_violation() <= slack
    }
}

pub fn init_head<F: Real, R: Rng>(store: &mut ParamStore<F>, init: &mut Initializer<'_, R>, d: usize) {
    init.table(store, "head.pool.query", 1, d);
    for part in ["q", "k", "v", "out"] {
        init.linear(store, &format!("head.pool.{part}"), d, d);
    }
    init.linear(store, "head.hazard.hidden", 2 * d, 2 * d);
    init.linear(store, "head.hazard.out", 2 * d, HORIZON + 1);
}

pub struct PoolOutput {
    /// `[1, D]`
    pub pooled: Var,
    /// Per-head softmax weights, each `[1, N]`.
    pub head_weights: Vec<Var>,
    /// Head-averaged weights `[1, N]`.
    pub mean_weights: Var,
}

/// Single learned query attending over the patch outputs `x` (`[N, D]`).
pub fn attention_pool<F: Real>(b: &Binder<'_, F>, x: Var, heads: usize) -> Result<PoolOutput> {
    let t = b.tape;
    let (n, d) = t.shape(x);
    if n == 0 {
        return Err(Error::shape("attention_pool", "no patch tokens"));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("attention_pool", format!("{heads} heads for width {d}")));
    }
    let hd = d / heads;
    let query = b.p("head.pool.query");
    let q = b.linear(query, "head.pool.q");
    let k = b.linear(x, "head.pool.k");
    let v = b.linear(x, "head.pool.v");
    let scale = F::of(1.0 / (hd as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut head_weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice_cols(q, h * hd, hd);
        let qh = t.scale(qh, scale);
        let kh = t.slice_cols(k, h * hd, hd);
        let vh = t.slice_cols(v, h * hd, hd);
        let scores = t.matmul_nt(qh, kh);
        let w = t.softmax_rows(scores);
        outs.push(t.matmul(w, vh));
        head_weights.push(w);
    }
    let cat = if heads == 1 { outs[0] } else { t.concat_cols(&outs) };
    let pooled = b.linear(cat, "head.pool.out");
    let stacked = if heads == 1 {
        head_weights[0]
    } else {
        t.concat_rows(&head_weights)
    };
    let ones = t.constant(Array2::from_elem((1, heads), F::of(1.0 / heads as f64)));
    let mean_weights = t.matmul(ones, stacked);
    Ok(PoolOutput {
        pooled,
        head_weights,
        mean_weights,
    })
}

pub struct HazardOutput {
    /// `[1, 6]` cumulative probabilities.
    pub probs: Var,
    /// `[1, 1]`
    pub base_logit: Var,
    /// `[1, 6]` nonnegative increments.
    pub increments: Var,
}

/// Cumulative hazard layer on the `[1, 2D]` concatenated features.
pub fn cumulative_hazard<F: Real>(b: &Binder<'_, F>, features: Var, act: IncrementActivation) -> Result<HazardOutput> {
    let t = b.tape;
    if !t.value(features).iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("hazard features".into()));
    }
    let hidden = b.linear(features, "head.hazard.hidden");
    let hidden = t.silu(hidden);
    let out = b.linear(hidden, "head.hazard.out");
    let base_logit = t.slice_cols(out, 0, 1);
    let raw = t.slice_cols(out, 1, HORIZON);
    let increments = match act {
        IncrementActivation::Relu => t.relu(raw),
        IncrementActivation::Softplus => t.softplus(raw),
    };
    let cum = t.cumsum_cols(increments);
    let logits = t.add_col(cum, base_logit);
    let probs = t.sigmoid(logits);
    Ok(HazardOutput {
        probs,
        base_logit,
        increments,
    })
}

pub struct RiskGraph {
    pub hazard: HazardOutput,
    pub pool: PoolOutput,
    /// `[N + 1, D]` encoder output.
    pub encoded: Var,
}

/// Full forward pass from patch tokens (`[N, P]` on the canonical grid).
/// `dropout_rng` selects training mode.
pub fn risk_forward_graph<F: Real>(
    b: &Binder<'_, F>,
    tokens: Var,
    cfg: &ModelConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<RiskGraph> {
    let t = b.tape;
    let n = cfg.num_patches();
    let (rows, cols) = t.shape(tokens);
    if rows != n || cols != cfg.patch_dim() {
        return Err(Error::shape(
            "risk_forward",
            format!("tokens {rows}x{cols}, expected {n}x{}", cfg.patch_dim()),
        ));
    }
    let positions: Vec<usize> = (0..n).collect();
    let x = embed_patches(
        t,
        tokens,
        &positions,
        b.p("encoder.patch_embed.weight"),
        b.p("encoder.patch_embed.bias"),
        b.p("encoder.pos_embed"),
        b.p("encoder.cls_token"),
    )?;
    let rot = Rc::new(cfg.encoder_rope()?.rotation_with_cls(&cfg.patch_coords()));
    let mut dropout = dropout_rng.map(|rng| crate::encoder::Dropout {
        rng,
        rate: cfg.encoder.dropout,
    });
    let encoded = encoder_forward(b, "encoder", x, &rot, &cfg.encoder, dropout.as_mut(), None)?;
    let cls = t.slice_rows(encoded, 0, 1);
    let patches = t.slice_rows(encoded, 1, n);
    let pool = attention_pool(b, patches, cfg.pool_heads())?;
    let features = t.concat_cols(&[cls, pool.pooled]);
    let hazard = cumulative_hazard(b, features, cfg.head.increment)?;
    Ok(RiskGraph { hazard, pool, encoded })
}

fn to_f64<F: Real>(a: &Array2<F>) -> Array2<f64> {
    a.mapv(|x| x.to_f64().unwrap_or(f64::NAN))
}

/// Reads the prediction and attention map off an evaluated graph.
pub fn read_outputs<F: Real>(tape: &Tape<F>, g: &RiskGraph) -> (RiskPrediction, AttentionMap) {
    let base = tape.scalar(g.hazard.base_logit).to_f64().unwrap_or(f64::NAN);
    let inc = to_f64(&tape.value(g.hazard.increments));
    let pred = RiskPrediction::from_parts(base, std::array::from_fn(|k| inc[[0, k]]));
    let rows: Vec<Array2<f64>> = g.pool.head_weights.iter().map(|w| to_f64(&tape.value(*w))).collect();
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let weights = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
    (pred, AttentionMap::from_head_weights(weights))
}

/// Evaluation-mode prediction for a preprocessed volume on the canonical grid.
pub fn risk_forward<F: Real>(
    v: &Volume<f32>,
    params: &ParamStore<F>,
    cfg: &ModelConfig,
) -> Result<(RiskPrediction, AttentionMap)> {
    if v.shape() != cfg.grid_shape {
        return Err(Error::shape(
            "risk_forward",
            format!(
                "volume {:?} is not on the canonical grid {:?}",
                v.shape(),
                cfg.grid_shape
            ),
        ));
    }
    let grid = patchify::<F>(v, cfg.patch_size)?;
    let tape = Tape::new();
    let b = Binder::new(&tape, params);
    let tokens = tape.constant(grid.tokens);
    let g = risk_forward_graph(&b, tokens, cfg, None)?;
    Ok(read_outputs(&tape, &g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::trunc_normal;
    use rand::SeedableRng;

    fn head_store(d: usize, sd: f64, seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut init = Initializer { rng: &mut rng, sd };
        init_head(&mut store, &mut init, d);
        store
    }

    #[test]
    fn closed_form_predictions() {
        let p = RiskPrediction::from_parts(0.0, [0.0; 6]);
        assert_eq!(p.cum_probs, [0.5; 6]);
        let p = RiskPrediction::from_parts(0.0, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        for v in p.cum_probs {
            assert!((v - 0.731_058_578_630_004_9).abs() < 1e-12);
        }
        let lo = RiskPrediction::from_parts(-1.0, [0.2, 0.0, 0.5, 0.1, 0.0, 0.3]);
        let hi = RiskPrediction::from_parts(-0.5, [0.2, 0.0, 0.5, 0.1, 0.0, 0.3]);
        assert!(lo.cum_probs.iter().zip(hi.cum_probs.iter()).all(|(a, b)| a < b));
    }

    #[test]
    fn single_token_pool_is_the_value_path() {
        let store = head_store(8, 0.5, 1);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tape.constant(trunc_normal(&mut rng, (1, 8), 1.0));
        let out = attention_pool(&b, x, 2).unwrap();
        for w in &out.head_weights {
            assert_eq!(tape.value(*w)[[0, 0]], 1.0);
        }
        let v = b.linear(x, "head.pool.v");
        let expected = b.linear(v, "head.pool.out");
        let diff = &tape.value_owned(out.pooled) - &tape.value_owned(expected);
        assert!(diff.iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn identical_tokens_pool_to_the_single_token_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row = trunc_normal::<f64>(&mut rng, (1, 8), 1.0);
        let many = ndarray::concatenate(ndarray::Axis(0), &[row.view(); 5]).unwrap();
        for seed in 0..3 {
            let store = head_store(8, 0.5, seed);
            let tape = Tape::new();
            let b = Binder::new(&tape, &store);
            let one = attention_pool(&b, tape.constant(row.clone()), 4).unwrap();
            let five = attention_pool(&b, tape.constant(many.clone()), 4).unwrap();
            let diff = &tape.value_owned(one.pooled) - &tape.value_owned(five.pooled);
            assert!(diff.iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn pooled_weights_are_distributions() {
        for seed in 0..100 {
            let store = head_store(8, 0.5, seed);
            let tape = Tape::new();
            let b = Binder::new(&tape, &store);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x = tape.constant(trunc_normal(&mut rng, (13, 8), 1.0));
            let out = attention_pool(&b, x, 4).unwrap();
            let mean = tape.value_owned(out.mean_weights);
            assert!((mean.sum() - 1.0).abs() < 1e-6);
            assert!(mean.iter().all(|&w| w >= 0.0));
        }
        let store = head_store(8, 0.5, 0);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let empty = tape.constant(Array2::zeros((0, 8)));
        assert!(attention_pool(&b, empty, 2).is_err());
    }

    #[test]
    fn hazard_rejects_non_finite_features() {
        let store = head_store(4, 0.5, 0);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let mut f = Array2::zeros((1, 8));
        f[[0, 3]] = f64::NAN;
        let f = tape.constant(f);
        assert!(matches!(
            cumulative_hazard(&b, f, IncrementActivation::Relu),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn hazard_layer_is_isotone_for_random_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..500 {
            let store = head_store(4, 1.0 + (trial % 5) as f64, trial);
            let tape = Tape::<f32>::new();
            let store = store.cast::<f32>();
            let b = Binder::new(&tape, &store);
            let f = tape.constant(trunc_normal(&mut rng, (1, 8), 3.0));
            let act = if trial % 2 == 0 {
                IncrementActivation::Relu
            } else {
                IncrementActivation::Softplus
            };
            let h = cumulative_hazard(&b, f, act).unwrap();
            let p = tape.value_owned(h.probs);
            for k in 0..5 {
                assert!(p[[0, k]] <= p[[0, k + 1]] + 1e-7);
            }
        }
    }
}
