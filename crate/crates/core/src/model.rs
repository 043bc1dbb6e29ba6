//! Model layout: configuration, parameter initialization and checks.

use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::mim::DecoderConfig;
use crate::params::{Initializer, ParamStore};
use crate::real::Real;
use crate::riskhead::{self, HeadConfig};
use crate::tokenizer::{RopeTables, grid_coords, grid_dims};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_SD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Canonical input grid in voxels.
    pub grid_shape: [usize; 3],
    pub patch_size: [usize; 3],
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub head: HeadConfig,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid_shape: [64, 64, 64],
            patch_size: [8, 8, 8],
            encoder: EncoderConfig::desk(),
            decoder: DecoderConfig::desk(),
            head: HeadConfig::default(),
            rope_base: RopeTables::DEFAULT_BASE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        grid_dims(self.grid_shape, self.patch_size)?;
        self.encoder.validate()?;
        self.decoder.as_encoder_config().validate()?;
        RopeTables::with_base(self.encoder.head_dim(), self.rope_base)?;
        RopeTables::with_base(self.decoder.as_encoder_config().head_dim(), self.rope_base)?;
        if self.pool_heads() == 0 || !self.encoder.embed_dim.is_multiple_of(self.pool_heads()) {
            return Err(Error::validation(
                "head.pool_heads",
                format!(
                    "{} does not divide embed_dim {}",
                    self.pool_heads(),
                    self.encoder.embed_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.grid_shape[a] / self.patch_size[a])
    }

    pub fn num_patches(&self) -> usize {
        self.grid_dims().iter().product()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size.iter().product()
    }

    pub fn patch_coords(&self) -> Vec<[usize; 3]> {
        grid_coords(self.grid_dims())
    }

    pub fn pool_heads(&self) -> usize {
        if self.head.pool_heads == 0 {
            self.encoder.num_heads
        } else {
            self.head.pool_heads
        }
    }

    pub fn encoder_rope(&self) -> Result<RopeTables> {
        RopeTables::with_base(self.encoder.head_dim(), self.rope_base)
    }

    pub fn decoder_rope(&self) -> Result<RopeTables> {
        RopeTables::with_base(self.decoder.as_encoder_config().head_dim(), self.rope_base)
    }
}

/// Fresh parameters for encoder, reconstruction decoder and risk head.
pub fn init_params<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer {
        rng: &mut rng,
        sd: INIT_SD,
    };
    let mut store = ParamStore::new();
    let d = cfg.encoder.embed_dim;
    let n = cfg.num_patches();
    let p = cfg.patch_dim();

    init.linear(&mut store, "encoder.patch_embed", p, d);
    init.table(&mut store, "encoder.pos_embed", n, d);
    init.table(&mut store, "encoder.cls_token", 1, d);
    encoder::init_blocks(&mut store, &mut init, "encoder", &cfg.encoder);

    let dd = cfg.decoder.embed_dim;
    init.linear(&mut store, "decoder.embed", d, dd);
    init.table(&mut store, "decoder.mask_token", 1, dd);
    init.table(&mut store, "decoder.pos_embed", n, dd);
    encoder::init_blocks(&mut store, &mut init, "decoder", &cfg.decoder.as_encoder_config());
    init.linear(&mut store, "decoder.pred", dd, p);

    riskhead::init_head(&mut store, &mut init, d);
    Ok(store)
}

/// Checks that a store has exactly the tensors `cfg` expects, with the
/// expected shapes.
pub fn check_params<F: Real>(cfg: &ModelConfig, store: &ParamStore<F>) -> Result<()> {
    let reference = init_params::<f32>(cfg, 0)?;
    let mut problems = Vec::new();
    for (name, t) in reference.iter() {
        match store.get(name) {
            None => problems.push(format!("missing {name}")),
            Some(s) if s.dim() != t.dim() => {
                problems.push(format!("{name}: shape {:?}, expected {:?}", s.dim(), t.dim()))
            }
            _ => {}
        }
    }
    for name in store.names() {
        if !reference.contains(name) {
            problems.push(format!("unexpected {name}"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "parameters do not match the model configuration: {}",
            problems.join("; ")
        )))
    }
}
