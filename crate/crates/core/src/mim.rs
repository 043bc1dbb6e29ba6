//! Masked-autoencoder pretraining.
//!
//! The encoder sees only the visible patches plus CLS. A narrower decoder
//! receives the projected encoder outputs, a shared mask token at every
//! masked position and its own positional table, and predicts the raw
//! voxels of each patch.

use crate::autodiff::{Tape, Var};
use crate::encoder::{Dropout, EncoderConfig, encoder_forward};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{Binder, ParamStore};
use crate::real::Real;
use crate::tokenizer::{PatchGrid, embed_patches};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DecoderConfig {
    pub fn full() -> Self {
        DecoderConfig {
            embed_dim: 396,
            depth: 4,
            num_heads: 6,
        }
    }

    pub fn desk() -> Self {
        DecoderConfig {
            embed_dim: 48,
            depth: 2,
            num_heads: 2,
        }
    }

    /// Block settings; the decoder reuses the encoder block design.
    pub fn as_encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.embed_dim,
            depth: self.depth,
            num_heads: self.num_heads,
            ..EncoderConfig::desk()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaeConfig {
    pub mask_ratio: f64,
    /// Score every patch instead of only the masked ones.
    pub all_patches: bool,
    /// Standardize each target patch to zero mean and unit variance.
    pub normalize_targets: bool,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig {
            mask_ratio: 0.75,
            all_patches: false,
            normalize_targets: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// Sorted.
    pub visible_indices: Vec<usize>,
    /// Sorted.
    pub masked_indices: Vec<usize>,
}

impl MaskPlan {
    pub fn num_tokens(&self) -> usize {
        self.visible_indices.len() + self.masked_indices.len()
    }

    pub fn mask_ratio(&self) -> f64 {
        self.masked_indices.len() as f64 / self.num_tokens() as f64
    }

    /// Checks that the plan partitions `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.visible_indices.iter().chain(&self.masked_indices) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::shape(
                    "mask plan",
                    format!("index {i} repeated or outside 0..{n}"),
                ));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::shape("mask plan", format!("does not cover 0..{n}")));
        }
        Ok(())
    }
}

/// Masks `round(ratio · n)` patches chosen uniformly without replacement.
pub fn random_mask(n: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    if n < 2 {
        return Err(Error::validation("num_patches", format!("need at least 2, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::validation(
            "mask_ratio",
            format!("must lie in (0, 1), got {ratio}"),
        ));
    }
    let m = (ratio * n as f64).round() as usize;
    if m == 0 || m == n {
        return Err(Error::validation(
            "mask_ratio",
            format!(
                "{ratio} leaves no {} patch out of {n}",
                if m == 0 { "masked" } else { "visible" }
            ),
        ));
    }
    let mut masked = rand::seq::index::sample(rng, n, m).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; n];
    for &i in &masked {
        is_masked[i] = true;
    }
    let visible = (0..n).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan {
        visible_indices: visible,
        masked_indices: masked,
    })
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Per-sample generator keyed by `(seed, sample_id, epoch, purpose)`, so
/// masks and dropout never depend on iteration order or saved state.
pub fn sample_rng(seed: u64, sample_id: &str, epoch: usize, purpose: &str) -> ChaCha8Rng {
    let mut h = 0xcbf2_9ce4_8422_2325;
    h = fnv1a(&seed.to_le_bytes(), h);
    h = fnv1a(sample_id.as_bytes(), h);
    h = fnv1a(&(epoch as u64).to_le_bytes(), h);
    h = fnv1a(purpose.as_bytes(), h);
    ChaCha8Rng::seed_from_u64(h)
}

/// Reconstruction target rows, optionally standardized per patch.
pub fn mae_targets<F: Real>(g: &PatchGrid<F>, cfg: &MaeConfig) -> Array2<F> {
    let mut t = g.tokens.clone();
    if cfg.normalize_targets {
        for mut row in t.axis_iter_mut(Axis(0)) {
            let n = F::of(row.len() as f64);
            let mean = row.sum() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / n;
            let sd = (var + F::of(1e-6)).sqrt();
            row.mapv_inplace(|x| (x - mean) / sd);
        }
    }
    t
}

pub struct MaeGraph {
    /// `[N, P]` reconstruction in patch order.
    pub recon: Var,
    /// `[|visible| + 1, D]` encoder output.
    pub encoded: Var,
}

/// Records the masked-autoencoder forward pass.
pub fn mae_forward_graph<F: Real>(
    b: &Binder<'_, F>,
    g: &PatchGrid<F>,
    plan: &MaskPlan,
    cfg: &ModelConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<MaeGraph> {
    let t = b.tape;
    let n = cfg.num_patches();
    if g.num_patches() != n || g.patch_dim() != cfg.patch_dim() {
        return Err(Error::shape(
            "mae_forward",
            format!(
                "patch grid {}x{} vs model {}x{}",
                g.num_patches(),
                g.patch_dim(),
                n,
                cfg.patch_dim()
            ),
        ));
    }
    plan.validate(n)?;
    let coords = cfg.patch_coords();

    let visible: Vec<usize> = plan.visible_indices.clone();
    let vis_tokens = t.constant(g.tokens.select(Axis(0), &visible));
    let x = embed_patches(
        t,
        vis_tokens,
        &visible,
        b.p("encoder.patch_embed.weight"),
        b.p("encoder.patch_embed.bias"),
        b.p("encoder.pos_embed"),
        b.p("encoder.cls_token"),
    )?;
    let vis_coords: Vec<[usize; 3]> = visible.iter().map(|&i| coords[i]).collect();
    let rot = Rc::new(cfg.encoder_rope()?.rotation_with_cls(&vis_coords));
    let mut dropout = dropout_rng.map(|rng| Dropout {
        rng,
        rate: cfg.encoder.dropout,
    });
    let encoded = encoder_forward(b, "encoder", x, &rot, &cfg.encoder, dropout.as_mut(), None)?;

    let proj = b.linear(encoded, "decoder.embed");
    let cls = t.slice_rows(proj, 0, 1);
    let vis = t.slice_rows(proj, 1, visible.len());
    let masks = t.gather_rows(b.p("decoder.mask_token"), vec![0; plan.masked_indices.len()]);
    let stacked = t.concat_rows(&[vis, masks]);
    // Row `i` of `stacked` holds patch `order[i]`; invert to patch order.
    let mut slot = vec![0; n];
    for (row, &patch) in visible.iter().chain(&plan.masked_indices).enumerate() {
        slot[patch] = row;
    }
    let ordered = t.gather_rows(stacked, slot);
    let ordered = t.add(ordered, b.p("decoder.pos_embed"));
    let y = t.concat_rows(&[cls, ordered]);
    let dec_cfg = cfg.decoder.as_encoder_config();
    let rot = Rc::new(cfg.decoder_rope()?.rotation_with_cls(&coords));
    let y = encoder_forward::<F, ChaCha8Rng>(b, "decoder", y, &rot, &dec_cfg, None, None)?;
    let y = t.slice_rows(y, 1, n);
    let recon = b.linear(y, "decoder.pred");
    Ok(MaeGraph { recon, encoded })
}

/// Reconstructed patches `[N, P]` in evaluation mode.
pub fn mae_forward<F: Real>(
    g: &PatchGrid<F>,
    plan: &MaskPlan,
    params: &ParamStore<F>,
    cfg: &ModelConfig,
) -> Result<Array2<F>> {
    let tape = Tape::new();
    let b = Binder::new(&tape, params);
    let out = mae_forward_graph(&b, g, plan, cfg, None)?;
    Ok(tape.value_owned(out.recon))
}

fn loss_rows(plan: &MaskPlan, all_patches: bool) -> Result<Vec<usize>> {
    if plan.masked_indices.is_empty() {
        return Err(Error::Undefined("mae loss over an empty masked set"));
    }
    Ok(if all_patches {
        (0..plan.num_tokens()).collect()
    } else {
        plan.masked_indices.clone()
    })
}

/// Mean squared error over the masked patches (all patches when
/// `all_patches`), averaged over patches × voxels.
pub fn mae_loss<F: Real>(recon: &Array2<F>, target: &Array2<F>, plan: &MaskPlan, all_patches: bool) -> Result<f64> {
    if recon.dim() != target.dim() || recon.nrows() != plan.num_tokens() {
        return Err(Error::shape(
            "mae_loss",
            format!(
                "recon {:?}, target {:?}, plan of {}",
                recon.dim(),
                target.dim(),
                plan.num_tokens()
            ),
        ));
    }
    let rows = loss_rows(plan, all_patches)?;
    let mut total = 0.0;
    for &r in &rows {
        for (a, b) in recon.row(r).iter().zip(target.row(r)) {
            let d = (*a - *b).to_f64().unwrap_or(f64::NAN);
            total += d * d;
        }
    }
    Ok(total / (rows.len() * recon.ncols()) as f64)
}

pub fn mae_loss_graph<F: Real>(
    tape: &Tape<F>,
    recon: Var,
    target: &Array2<F>,
    plan: &MaskPlan,
    all_patches: bool,
) -> Result<Var> {
    if tape.shape(recon) != target.dim() || target.nrows() != plan.num_tokens() {
        return Err(Error::shape(
            "mae_loss",
            format!("recon {:?}, target {:?}", tape.shape(recon), target.dim()),
        ));
    }
    let rows = loss_rows(plan, all_patches)?;
    Ok(tape.masked_mse(recon, target, &rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::tokenizer::patchify;
    use crate::volume::Volume;
    use ndarray::Array3;

    fn tiny() -> ModelConfig {
        ModelConfig {
            grid_shape: [8, 8, 8],
            patch_size: [4, 4, 4],
            encoder: EncoderConfig {
                embed_dim: 12,
                depth: 1,
                num_heads: 2,
                ..EncoderConfig::desk()
            },
            decoder: DecoderConfig {
                embed_dim: 12,
                depth: 1,
                num_heads: 2,
            },
            ..ModelConfig::default()
        }
    }

    fn grid(seed: u64) -> PatchGrid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_simple_fn((8, 8, 8), || rng.random::<f32>());
        patchify(&Volume::new(data, [1.0; 3]).unwrap(), [4, 4, 4]).unwrap()
    }

    #[test]
    fn mask_sizes_and_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_mask(512, 0.75, &mut rng).unwrap();
        assert_eq!(p.masked_indices.len(), 384);
        assert_eq!(p.visible_indices.len(), 128);
        p.validate(512).unwrap();
        assert!(random_mask(10, 0.01, &mut rng).is_err());
        assert!(random_mask(10, 0.99, &mut rng).is_err());
        assert!(random_mask(1, 0.5, &mut rng).is_err());
        assert!(random_mask(10, 1.0, &mut rng).is_err());
    }

    #[test]
    fn mask_rng_is_keyed() {
        let a = random_mask(64, 0.5, &mut sample_rng(1, "a", 0, "mask")).unwrap();
        let b = random_mask(64, 0.5, &mut sample_rng(1, "a", 0, "mask")).unwrap();
        let c = random_mask(64, 0.5, &mut sample_rng(1, "a", 1, "mask")).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = random_mask(8, 0.5, &mut rng).unwrap();
        let target = Array2::from_shape_fn((8, 5), |(i, j)| (i * 5 + j) as f64);
        assert_eq!(mae_loss(&target, &target, &plan, false).unwrap(), 0.0);
        assert_eq!(mae_loss(&(&target + 1.0), &target, &plan, false).unwrap(), 1.0);
        let mut r = target.clone();
        r.row_mut(plan.visible_indices[0]).fill(100.0);
        assert_eq!(mae_loss(&r, &target, &plan, false).unwrap(), 0.0);
        assert!(mae_loss(&r, &target, &plan, true).unwrap() > 0.0);
    }

    #[test]
    fn forward_shape_and_encoder_length() {
        let cfg = tiny();
        let params = init_params::<f64>(&cfg, 1).unwrap();
        let g = grid(2);
        let plan = random_mask(8, 0.75, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &params);
        let out = mae_forward_graph(&b, &g, &plan, &cfg, None).unwrap();
        assert_eq!(tape.shape(out.recon), (8, 64));
        assert_eq!(tape.shape(out.encoded), (3, 12));
        let bad = MaskPlan {
            visible_indices: vec![0, 1],
            masked_indices: vec![1, 2, 3, 4, 5, 6, 7],
        };
        assert!(mae_forward(&g, &bad, &params, &cfg).is_err());
    }

    #[test]
    fn masked_content_does_not_reach_the_encoder() {
        let cfg = tiny();
        let params = init_params::<f64>(&cfg, 1).unwrap();
        let g = grid(2);
        let plan = random_mask(8, 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut swapped = grid(2);
        let other = grid(9);
        for &m in &plan.masked_indices {
            swapped.tokens.row_mut(m).assign(&other.tokens.row(m));
        }
        let encoded = |g: &PatchGrid<f64>| {
            let tape = Tape::new();
            let b = Binder::new(&tape, &params);
            let out = mae_forward_graph(&b, g, &plan, &cfg, None).unwrap();
            tape.value_owned(out.encoded)
        };
        assert_eq!(encoded(&g), encoded(&swapped));
    }

    #[test]
    fn normalized_targets_are_standardized() {
        let g = grid(5);
        let t = mae_targets(
            &g,
            &MaeConfig {
                normalize_targets: true,
                ..Default::default()
            },
        );
        for row in t.rows() {
            assert!(row.mean().unwrap().abs() < 1e-9);
        }
        assert_eq!(mae_targets(&g, &MaeConfig::default()), g.tokens);
    }
}
