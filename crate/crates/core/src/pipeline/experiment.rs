//! The end-to-end experiment and the single-scan prediction entry point.

use super::checkpoint::{Checkpoint, final_dir};
use super::config::{ExperimentConfig, Phase, Regime};
use super::dataset::{Dataset, Sample, preprocess, synth_data};
use super::evaluate::{MetricRow, Prediction, attention_mass, metric_table, metrics_tsv, predict, write_report};
use super::io::{Split, read_volume, write_file, write_volume};
use super::train::{RunOptions, finetune, pretrain};
use crate::error::{Error, Result};
use crate::metrics::bootstrap_ci;
use crate::phantom::RiskRecord;
use crate::riskhead::{AttentionMap, RiskPrediction, risk_forward};
use crate::volume::Volume;
use ndarray::Array3;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Directory layout of an experiment run.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn finetune(&self, r: Regime) -> PathBuf {
        self.root.join(format!("finetune-{}", r.name()))
    }

    pub fn eval(&self, r: Regime) -> PathBuf {
        self.root.join(format!("eval-{}", r.name()))
    }

    /// Effective configuration of each regime, for audit.
    pub fn regime_config(&self, r: Regime) -> PathBuf {
        self.root.join("configs").join(format!("{}.toml", r.name()))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.tsv")
    }
}

/// Outcome of one fine-tuning regime.
pub struct RegimeResult {
    pub regime: Regime,
    pub metrics: Vec<MetricRow>,
    /// Pooled attention mass on the nodule, one value per probe scan.
    pub probe_mass: Vec<(String, f64)>,
    pub max_violation: f64,
}

pub struct ExperimentReport {
    pub regimes: Vec<RegimeResult>,
}

impl ExperimentReport {
    pub fn regime(&self, r: Regime) -> Option<&RegimeResult> {
        self.regimes.iter().find(|x| x.regime == r)
    }
}

/// A completed checkpoint at `dir` trained under exactly `cfg`, if any.
fn completed(dir: &Path, cfg: &ExperimentConfig, phase: Phase, regime: Option<Regime>) -> Option<Checkpoint<f32>> {
    let ck = Checkpoint::<f32>::load(&final_dir(dir)).ok()?;
    let m = &ck.manifest;
    let epochs = match phase {
        Phase::Pretrain => cfg.pretrain.epochs,
        Phase::Finetune => cfg.finetune.epochs,
    };
    (m.config == *cfg && m.phase == phase && m.regime == regime && m.epochs_done == epochs).then_some(ck)
}

/// Configuration a regime actually trains with: the master configuration
/// with the regime's loss weights filled in.
pub fn regime_config(cfg: &ExperimentConfig, r: Regime) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.loss = cfg.loss_for(r);
    c
}

fn mass_row(probe_mass: &[(String, f64)], cfg: &ExperimentConfig) -> MetricRow {
    let values: Vec<f64> = probe_mass.iter().map(|(_, m)| *m).collect();
    let ids: Vec<&str> = probe_mass.iter().map(|(id, _)| id.as_str()).collect();
    let mean =
        |idx: &[usize]| (!idx.is_empty()).then(|| idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64);
    let all: Vec<usize> = (0..values.len()).collect();
    let point = mean(&all);
    let ci = point.and_then(|_| bootstrap_ci(mean, &ids, cfg.evaluate.n_boot, cfg.evaluate.alpha, cfg.seed).ok());
    MetricRow {
        metric: "nodule_attention_mass".into(),
        year: None,
        point,
        lo: ci.as_ref().map(|c| c.lo),
        hi: ci.as_ref().map(|c| c.hi),
        n: values.len(),
    }
}

/// Phantom synthesis, pretraining, fine-tuning under every configured
/// regime and evaluation. Stages whose final checkpoint already matches the
/// configuration are reused.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, verbose: bool) -> Result<ExperimentReport> {
    cfg.validate()?;
    let layout = Layout {
        root: out.to_path_buf(),
    };
    write_file(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    synth_data(cfg, &layout.data())?;
    let ds = Dataset::load(&layout.data(), cfg, &[Split::Train, Split::Test, Split::Probe])?;
    let train = ds.split(Split::Train);
    let test = ds.split(Split::Test);
    let probe = ds.split(Split::Probe);

    let pre_dir = layout.pretrain();
    let pre = match completed(&pre_dir, cfg, Phase::Pretrain, None) {
        Some(ck) => ck,
        None => pretrain(
            &train,
            cfg,
            &RunOptions {
                out_dir: Some(&pre_dir),
                verbose,
                ..Default::default()
            },
        )?,
    };

    let mut regimes = Vec::new();
    let mut table: Vec<(Regime, MetricRow)> = Vec::new();
    for &r in &cfg.regimes {
        write_file(&layout.regime_config(r), regime_config(cfg, r).to_toml().as_bytes())?;
        let dir = layout.finetune(r);
        let ck = match completed(&dir, cfg, Phase::Finetune, Some(r)) {
            Some(ck) => ck,
            None => finetune(
                &train,
                &pre,
                cfg,
                r,
                &RunOptions {
                    out_dir: Some(&dir),
                    verbose,
                    ..Default::default()
                },
            )?,
        };
        let result = evaluate_regime(cfg, r, &ck, &test, &probe, &layout.eval(r))?;
        for m in result
            .metrics
            .iter()
            .cloned()
            .chain([mass_row(&result.probe_mass, cfg)])
        {
            table.push((r, m));
        }
        regimes.push(result);
    }
    let rows: Vec<(Option<&str>, &MetricRow)> = table.iter().map(|(r, m)| (Some(r.name()), m)).collect();
    write_file(&layout.report(), metrics_tsv(&rows).as_bytes())?;
    Ok(ExperimentReport { regimes })
}

fn records(samples: &[&Sample]) -> Vec<RiskRecord> {
    samples.iter().map(|s| s.record.clone()).collect()
}

/// Test-set metrics and probe-set attention masses of one fine-tuned model.
pub fn evaluate_regime(
    cfg: &ExperimentConfig,
    regime: Regime,
    ck: &Checkpoint<f32>,
    test: &[&Sample],
    probe: &[&Sample],
    dir: &Path,
) -> Result<RegimeResult> {
    let preds = predict(test, &ck.params, &cfg.model)?;
    let recs = records(test);
    let metrics = if test.is_empty() {
        Vec::new()
    } else {
        let m = metric_table(&preds, &recs, &cfg.evaluate, cfg.seed)?;
        write_report(dir, &preds, &recs, &m, &cfg.evaluate)?;
        m
    };
    let probe_preds = predict(probe, &ck.params, &cfg.model)?;
    let probe_mass = probe_masses(probe, &probe_preds)?;
    let mut tsv = String::from("sample_id\tnodule_attention_mass\n");
    for (id, m) in &probe_mass {
        tsv.push_str(&format!("{id}\t{m:.8}\n"));
    }
    write_file(&dir.join("probe_attention.tsv"), tsv.as_bytes())?;
    let max_violation = ck.manifest.history.max_violation.iter().copied().fold(0.0, f64::max);
    Ok(RegimeResult {
        regime,
        metrics,
        probe_mass,
        max_violation,
    })
}

/// Attention mass on the nodule patches of every probe scan with a mask.
pub fn probe_masses(probe: &[&Sample], preds: &[Prediction]) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (s, p) in probe.iter().zip(preds) {
        if let Some(mask) = &s.annotation.nodule_patch_mask {
            out.push((s.id.clone(), attention_mass(&p.attention, mask)?));
        }
    }
    Ok(out)
}

/// Prediction written by [`predict_scan`].
#[derive(Debug, Serialize)]
pub struct ScanPrediction {
    pub cumulative_risk: Vec<f64>,
    pub base_logit: f64,
    pub hazard_increments: Vec<f64>,
    /// Pooled attention over patches, in patch order.
    pub attention: Vec<f64>,
    pub attention_volume: String,
}

/// Pooled attention laid out on the patch grid, one voxel per patch.
pub fn attention_volume(attn: &AttentionMap, grid_dims: [usize; 3], spacing: [f64; 3]) -> Result<Volume<f32>> {
    let n: usize = grid_dims.iter().product();
    if attn.pooled_weights.len() != n {
        return Err(Error::shape(
            "attention_volume",
            format!("{} weights for a {:?} grid", attn.pooled_weights.len(), grid_dims),
        ));
    }
    let data = Array3::from_shape_vec(
        (grid_dims[0], grid_dims[1], grid_dims[2]),
        attn.pooled_weights.iter().map(|&w| w as f32).collect(),
    )
    .expect("length checked");
    Volume::new(data, spacing)
}

/// Preprocesses one scan, predicts its risk and writes `prediction.json`
/// plus the `attention` volume into `out`.
pub fn predict_scan(
    cfg: &ExperimentConfig,
    ck: &Checkpoint<f32>,
    volume_stem: &Path,
    lobe_stem: &Path,
    out: &Path,
) -> Result<(RiskPrediction, AttentionMap)> {
    let v = read_volume::<f32>(volume_stem)?;
    let lobes = read_volume::<u8>(lobe_stem)?;
    if v.shape() != lobes.shape() {
        return Err(Error::Data(format!(
            "volume {:?} and lobe mask {:?} differ in shape",
            v.shape(),
            lobes.shape()
        )));
    }
    let (vol, _, _) = preprocess(&v, &lobes, None, &cfg.preprocess, cfg.model.grid_shape).map_err(|e| match e {
        Error::EmptyMask => Error::Data(format!("{}: no lung region found", lobe_stem.display())),
        other => other,
    })?;
    let (pred, attn) = risk_forward(&vol, &ck.params, &cfg.model)?;
    let spacing = std::array::from_fn(|a| cfg.preprocess.target_spacing[a] * cfg.model.patch_size[a] as f64);
    write_volume(
        &out.join("attention"),
        &attention_volume(&attn, cfg.model.grid_dims(), spacing)?,
    )?;
    let body = ScanPrediction {
        cumulative_risk: pred.cum_probs.to_vec(),
        base_logit: pred.base_logit,
        hazard_increments: pred.hazard_increments.to_vec(),
        attention: attn.pooled_weights.clone(),
        attention_volume: "attention.hdr".into(),
    };
    let json = serde_json::to_vec_pretty(&body).expect("prediction serializes");
    write_file(&out.join("prediction.json"), &json)?;
    Ok((pred, attn))
}

/// Probe masses of two regimes paired by scan: (wins of `a`, losses, ties).
pub fn paired_wins(a: &[(String, f64)], b: &[(String, f64)]) -> (usize, usize, usize) {
    let b: BTreeMap<&str, f64> = b.iter().map(|(id, m)| (id.as_str(), *m)).collect();
    let (mut w, mut l, mut t) = (0, 0, 0);
    for (id, ma) in a {
        if let Some(&mb) = b.get(id.as_str()) {
            match ma.partial_cmp(&mb) {
                Some(std::cmp::Ordering::Greater) => w += 1,
                Some(std::cmp::Ordering::Less) => l += 1,
                _ => t += 1,
            }
        }
    }
    (w, l, t)
}
