//! Pretraining and fine-tuning loops.
//!
//! Each sample gets its own tape; gradients are averaged over the batch and
//! applied by one AdamW step. Runs are single-threaded and every random draw
//! is keyed by (seed, epoch, sample), so a run is bit-reproducible and can be
//! resumed from any epoch checkpoint.

use super::checkpoint::{Checkpoint, History, Manifest, epoch_dir, final_dir};
use super::config::{ExperimentConfig, Phase, Regime, TrainConfig};
use super::dataset::Sample;
use super::schedule::lr_schedule;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{
    LossConfig, aiag_kl_graph, aiag_region_ce_graph, build_labels, region_assignment, risk_loss_graph,
};
use crate::mim::{mae_forward_graph, mae_loss_graph, mae_targets, random_mask, sample_rng};
use crate::model::{ModelConfig, check_params, init_params};
use crate::optim::AdamW;
use crate::params::{Binder, ParamStore};
use crate::riskhead::{read_outputs, risk_forward_graph};
use rand::seq::SliceRandom;
use std::path::Path;

/// Where a run writes and how far it goes.
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    /// Run directory; epoch checkpoints go to `epoch-NNN/`, the last one
    /// also to `final/`. `None` keeps everything in memory.
    pub out_dir: Option<&'a Path>,
    /// Continue from this checkpoint instead of starting fresh.
    pub resume: Option<&'a Path>,
    /// Stop once this many epochs are done (simulates an interruption).
    pub stop_after: Option<usize>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

fn epoch_order(n: usize, seed: u64, epoch: usize, phase: &str) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut sample_rng(seed, phase, epoch, "shuffle"));
    idx
}

fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

fn finite(loss: f64, what: &str, epoch: usize, step: u64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!(
            "{what} loss at epoch {} step {step}",
            epoch + 1
        )))
    }
}

struct RunState {
    params: ParamStore<f32>,
    optimizer: AdamW<f32>,
    epochs_done: usize,
    step: u64,
    history: History,
}

fn resume_state(path: &Path, cfg: &ExperimentConfig, phase: Phase, regime: Option<Regime>) -> Result<RunState> {
    let ck = Checkpoint::<f32>::load(path)?;
    let m = &ck.manifest;
    if m.phase != phase || m.regime != regime {
        return Err(Error::Config(format!(
            "{}: checkpoint of a {:?} run ({:?}) cannot resume a {phase:?} run ({regime:?})",
            path.display(),
            m.phase,
            m.regime
        )));
    }
    if &m.config != cfg {
        return Err(Error::Config(format!(
            "{}: configuration differs from the checkpointed run",
            path.display()
        )));
    }
    check_params(&cfg.model, &ck.params)?;
    Ok(RunState {
        params: ck.params,
        optimizer: ck.optimizer,
        epochs_done: m.epochs_done,
        step: m.step,
        history: m.history.clone(),
    })
}

fn snapshot(state: &RunState, cfg: &ExperimentConfig, phase: Phase, regime: Option<Regime>) -> Checkpoint<f32> {
    let mut ck = Checkpoint {
        manifest: Manifest {
            format_version: super::checkpoint::FORMAT_VERSION,
            phase,
            regime,
            dtype: String::new(),
            config: cfg.clone(),
            epochs_done: state.epochs_done,
            step: state.step,
            history: state.history.clone(),
            tensors: Vec::new(),
            optimizer: state.optimizer.cfg,
            optimizer_steps: Default::default(),
        },
        params: state.params.clone(),
        optimizer: state.optimizer.clone(),
    };
    ck.sync_manifest();
    ck
}

fn save_epoch(ck: &Checkpoint<f32>, opts: &RunOptions<'_>, last: bool) -> Result<()> {
    if let Some(dir) = opts.out_dir {
        ck.save(&epoch_dir(dir, ck.manifest.epochs_done))?;
        if last {
            ck.save(&final_dir(dir))?;
        }
    }
    Ok(())
}

/// Masked-autoencoder pretraining of encoder and decoder.
pub fn pretrain(samples: &[&Sample], cfg: &ExperimentConfig, opts: &RunOptions<'_>) -> Result<Checkpoint<f32>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("pretraining needs at least one sample".into()));
    }
    let tc = &cfg.pretrain;
    let model = &cfg.model;
    let mut state = match opts.resume {
        Some(p) => resume_state(p, cfg, Phase::Pretrain, None)?,
        None => RunState {
            params: init_params(model, cfg.seed)?,
            optimizer: AdamW::new(cfg.optimizer_for(tc)),
            epochs_done: 0,
            step: 0,
            history: History::default(),
        },
    };
    let targets: Vec<_> = samples.iter().map(|s| mae_targets(&s.grid, &cfg.mae)).collect();
    let end = opts.stop_after.unwrap_or(tc.epochs).min(tc.epochs);
    for epoch in state.epochs_done..end {
        let order = epoch_order(samples.len(), cfg.seed, epoch, "pretrain");
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(tc.batch_size) {
            let scale = 1.0 / batch.len() as f32;
            let mut grads = ParamStore::new();
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = samples[i];
                let plan = random_mask(
                    model.num_patches(),
                    cfg.mae.mask_ratio,
                    &mut sample_rng(cfg.seed, &s.id, epoch, "mask"),
                )?;
                let mut drop_rng = sample_rng(cfg.seed, &s.id, epoch, "dropout");
                let tape = Tape::new();
                let b = Binder::new(&tape, &state.params);
                let g = mae_forward_graph(&b, &s.grid, &plan, model, Some(&mut drop_rng))?;
                let loss = mae_loss_graph(&tape, g.recon, &targets[i], &plan, cfg.mae.all_patches)?;
                batch_loss += tape.scalar(loss) as f64 * scale as f64;
                let scaled = tape.scale(loss, scale);
                grads.accumulate(&b.gradients(&tape.backward(scaled)), 1.0);
            }
            finite(batch_loss, "reconstruction", epoch, state.step)?;
            state.optimizer.step(&mut state.params, &grads, tc.peak_lr);
            state.step += 1;
            state.history.step_losses.push(batch_loss);
            epoch_loss += batch_loss;
            batches += 1;
        }
        if !state.params.all_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {}", epoch + 1)));
        }
        let mean = epoch_loss / batches as f64;
        state.history.epoch_losses.push(mean);
        state.epochs_done = epoch + 1;
        if opts.verbose {
            eprintln!("pretrain epoch {:>3}/{}  loss {mean:.6}", epoch + 1, tc.epochs);
        }
        save_epoch(
            &snapshot(&state, cfg, Phase::Pretrain, None),
            opts,
            epoch + 1 == tc.epochs,
        )?;
    }
    Ok(snapshot(&state, cfg, Phase::Pretrain, None))
}

/// Lists fields of the encoder-side model layout that differ.
fn model_mismatch(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    let mut cmp = |name: &str, x: String, y: String| {
        if x != y {
            out.push(format!("{name}: {x} vs {y}"));
        }
    };
    cmp(
        "grid_shape",
        format!("{:?}", a.grid_shape),
        format!("{:?}", b.grid_shape),
    );
    cmp(
        "patch_size",
        format!("{:?}", a.patch_size),
        format!("{:?}", b.patch_size),
    );
    cmp(
        "encoder.embed_dim",
        a.encoder.embed_dim.to_string(),
        b.encoder.embed_dim.to_string(),
    );
    cmp(
        "encoder.depth",
        a.encoder.depth.to_string(),
        b.encoder.depth.to_string(),
    );
    cmp(
        "encoder.num_heads",
        a.encoder.num_heads.to_string(),
        b.encoder.num_heads.to_string(),
    );
    cmp(
        "encoder.mlp_ratio",
        a.encoder.mlp_ratio.to_string(),
        b.encoder.mlp_ratio.to_string(),
    );
    cmp("rope_base", a.rope_base.to_string(), b.rope_base.to_string());
    out
}

/// Per-sample guidance targets, resolved once before training.
struct Guidance<'s> {
    mask: Option<&'s [bool]>,
    region: bool,
}

fn guidance<'s>(s: &'s Sample, loss: &LossConfig) -> Guidance<'s> {
    let a = &s.annotation;
    Guidance {
        mask: a.nodule_patch_mask.as_deref().filter(|_| loss.weights.lambda_kl > 0.0),
        region: loss.weights.lambda_region > 0.0
            && (a.lobe_label.is_some() || a.side_label.is_some())
            && region_assignment(&s.lobe_patches, a).is_ok(),
    }
}

/// Largest isotonicity violation over `samples` in evaluation mode.
pub fn isotonicity_probe(samples: &[&Sample], params: &ParamStore<f32>, model: &ModelConfig) -> Result<f64> {
    let mut worst = 0.0f64;
    for s in samples {
        let tape = Tape::new();
        let b = Binder::new(&tape, params);
        let tokens = tape.constant(s.grid.tokens.clone());
        let g = risk_forward_graph(&b, tokens, model, None)?;
        let probs = tape.value_owned(g.hazard.probs);
        for k in 0..probs.ncols() - 1 {
            worst = worst.max((probs[[0, k]] - probs[[0, k + 1]]) as f64);
        }
        let (pred, _) = read_outputs(&tape, &g);
        worst = worst.max(pred.max_violation());
    }
    Ok(worst)
}

/// Risk fine-tuning on top of a pretrained encoder.
///
/// The encoder is frozen for `frozen_epochs` (first schedule cycle) and
/// trained afterwards. `loss` carries the regime's guidance weights.
pub fn finetune(
    samples: &[&Sample],
    pretrained: &Checkpoint<f32>,
    cfg: &ExperimentConfig,
    regime: Regime,
    opts: &RunOptions<'_>,
) -> Result<Checkpoint<f32>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("fine-tuning needs at least one sample".into()));
    }
    let diffs = model_mismatch(&pretrained.manifest.config.model, &cfg.model);
    if !diffs.is_empty() {
        return Err(Error::Config(format!(
            "pretrained encoder does not match the configuration: {}",
            diffs.join("; ")
        )));
    }
    let tc: &TrainConfig = &cfg.finetune;
    let model = &cfg.model;
    let loss_cfg = cfg.loss_for(regime);
    let mut state = match opts.resume {
        Some(p) => resume_state(p, cfg, Phase::Finetune, Some(regime))?,
        None => {
            let mut params = init_params(model, cfg.seed.wrapping_add(1))?;
            params.copy_prefix_from(&pretrained.params, "encoder.");
            params.copy_prefix_from(&pretrained.params, "decoder.");
            check_params(model, &params)?;
            RunState {
                params,
                optimizer: AdamW::new(cfg.optimizer_for(tc)),
                epochs_done: 0,
                step: 0,
                history: History::default(),
            }
        }
    };
    let labels = samples
        .iter()
        .map(|s| build_labels(&s.record, loss_cfg.censor_mode))
        .collect::<Result<Vec<_>>>()?;
    let guides: Vec<Guidance> = samples.iter().map(|s| guidance(s, &loss_cfg)).collect();
    let spe = steps_per_epoch(samples.len(), tc.batch_size);
    let phase1 = spe * tc.frozen_epochs as u64;
    let phase2 = spe * (tc.epochs - tc.frozen_epochs) as u64;
    let probe: Vec<&Sample> = samples.iter().take(cfg.evaluate.probe_batch).copied().collect();
    let w = loss_cfg.weights;

    let end = opts.stop_after.unwrap_or(tc.epochs).min(tc.epochs);
    for epoch in state.epochs_done..end {
        let frozen: &[&str] = if epoch < tc.frozen_epochs {
            &["encoder.", "decoder."]
        } else {
            &["decoder."]
        };
        let order = epoch_order(samples.len(), cfg.seed, epoch, "finetune");
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in order.chunks(tc.batch_size) {
            let n_kl = batch.iter().filter(|&&i| guides[i].mask.is_some()).count();
            let n_region = batch.iter().filter(|&&i| guides[i].region).count();
            let risk_scale = 1.0 / batch.len() as f64;
            let mut grads = ParamStore::new();
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = samples[i];
                let mut drop_rng = sample_rng(cfg.seed, &s.id, epoch, "dropout");
                let tape = Tape::new();
                let b = Binder::new(&tape, &state.params).frozen(frozen);
                let tokens = tape.constant(s.grid.tokens.clone());
                let g = risk_forward_graph(&b, tokens, model, Some(&mut drop_rng))?;
                let mut terms: Vec<(Var, f64)> = vec![(risk_loss_graph(&tape, g.hazard.probs, &labels[i]), risk_scale)];
                let heads: Vec<Var> = if loss_cfg.per_head {
                    g.pool.head_weights.clone()
                } else {
                    vec![g.pool.mean_weights]
                };
                let per_head = 1.0 / heads.len() as f64;
                if let Some(mask) = guides[i].mask {
                    for &h in &heads {
                        terms.push((aiag_kl_graph(&tape, h, mask)?, w.lambda_kl * per_head / n_kl as f64));
                    }
                }
                if guides[i].region {
                    for &h in &heads {
                        let ce = aiag_region_ce_graph(&tape, h, &s.lobe_patches, &s.annotation)?;
                        terms.push((ce, w.lambda_region * per_head / n_region as f64));
                    }
                }
                let mut total: Option<Var> = None;
                for (v, c) in terms {
                    batch_loss += tape.scalar(v) as f64 * c;
                    let scaled = tape.scale(v, c as f32);
                    total = Some(match total {
                        Some(t) => tape.add(t, scaled),
                        None => scaled,
                    });
                }
                let total = total.expect("risk term present");
                grads.accumulate(&b.gradients(&tape.backward(total)), 1.0);
            }
            finite(batch_loss, "risk", epoch, state.step)?;
            let lr = lr_schedule(state.step, phase1, phase2, tc)?;
            state.optimizer.step(&mut state.params, &grads, lr);
            state.step += 1;
            state.history.step_losses.push(batch_loss);
            epoch_loss += batch_loss;
            batches += 1;
        }
        if !state.params.all_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {}", epoch + 1)));
        }
        let violation = isotonicity_probe(&probe, &state.params, model)?;
        state.history.max_violation.push(violation);
        let mean = epoch_loss / batches as f64;
        state.history.epoch_losses.push(mean);
        state.epochs_done = epoch + 1;
        if opts.verbose {
            eprintln!(
                "finetune[{}] epoch {:>2}/{}  loss {mean:.6}  isotonicity violation {violation:.1e}",
                regime.name(),
                epoch + 1,
                tc.epochs
            );
        }
        save_epoch(
            &snapshot(&state, cfg, Phase::Finetune, Some(regime)),
            opts,
            epoch + 1 == tc.epochs,
        )?;
    }
    Ok(snapshot(&state, cfg, Phase::Finetune, Some(regime)))
}
