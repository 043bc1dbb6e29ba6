//! Predictions, metric tables with bootstrap intervals, and attention checks.

use super::config::EvalConfig;
use super::dataset::Sample;
use super::io::write_file;
use super::plot::{Series, unit_square_svg};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::metrics::{bootstrap_ci, concordance, pr_auc, pr_curve, roc_auc, roc_curve, year_outcome};
use crate::model::ModelConfig;
use crate::params::{Binder, ParamStore};
use crate::phantom::{HORIZON, RiskRecord};
use crate::riskhead::{AttentionMap, RiskPrediction, read_outputs, risk_forward_graph};
use serde::Serialize;
use std::path::Path;

/// Model output for one scan.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub sample_id: String,
    pub risk: RiskPrediction,
    pub attention: AttentionMap,
}

/// Evaluation-mode forward pass over preprocessed samples.
pub fn predict(samples: &[&Sample], params: &ParamStore<f32>, model: &ModelConfig) -> Result<Vec<Prediction>> {
    samples
        .iter()
        .map(|s| {
            let tape = Tape::new();
            let b = Binder::new(&tape, params);
            let tokens = tape.constant(s.grid.tokens.clone());
            let g = risk_forward_graph(&b, tokens, model, None)?;
            let (risk, attention) = read_outputs(&tape, &g);
            if risk.cum_probs.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFinite(format!("prediction for {}", s.id)));
            }
            Ok(Prediction {
                sample_id: s.id.clone(),
                risk,
                attention,
            })
        })
        .collect()
}

/// One line of a metric table. Undefined values are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub year: Option<usize>,
    pub point: Option<f64>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    /// Scans entering the metric.
    pub n: usize,
}

fn row(
    metric: &str,
    year: Option<usize>,
    n: usize,
    point: Option<f64>,
    ci: impl FnOnce() -> Result<(f64, f64)>,
) -> MetricRow {
    // An interval is only attempted around a defined point estimate; a
    // bootstrap with mostly undefined resamples leaves the interval empty.
    let (lo, hi) = match point.map(|_| ci()) {
        Some(Ok((lo, hi))) => (Some(lo), Some(hi)),
        _ => (None, None),
    };
    MetricRow {
        metric: metric.to_string(),
        year,
        point,
        lo,
        hi,
        n,
    }
}

/// Per-year ROC-AUC and PR-AUC plus the concordance index, each with a
/// percentile bootstrap interval over scans. `records` and `preds` must list
/// the same scans in the same order.
pub fn metric_table(
    preds: &[Prediction],
    records: &[RiskRecord],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<MetricRow>> {
    if preds.len() != records.len() || preds.iter().zip(records).any(|(p, r)| p.sample_id != r.sample_id) {
        return Err(Error::Data("predictions and records do not line up".into()));
    }
    let mut rows = Vec::new();
    for year in 1..=HORIZON {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        for (p, r) in preds.iter().zip(records) {
            if let Some(l) = year_outcome(r, year) {
                scores.push(p.risk.cum_probs[year - 1]);
                labels.push(l);
                ids.push(r.sample_id.as_str());
            }
        }
        let sub = |idx: &[usize]| -> (Vec<f64>, Vec<bool>) {
            (
                idx.iter().map(|&i| scores[i]).collect(),
                idx.iter().map(|&i| labels[i]).collect(),
            )
        };
        let ci = |f: fn(&[f64], &[bool]) -> Option<f64>, stream: u64| {
            let b = bootstrap_ci(
                |idx| {
                    let (s, l) = sub(idx);
                    f(&s, &l)
                },
                &ids,
                cfg.n_boot,
                cfg.alpha,
                seed.wrapping_add(stream),
            )?;
            Ok((b.lo, b.hi))
        };
        let n = scores.len();
        rows.push(row("roc_auc", Some(year), n, roc_auc(&scores, &labels), || {
            ci(roc_auc, 2 * year as u64)
        }));
        rows.push(row("pr_auc", Some(year), n, pr_auc(&scores, &labels), || {
            ci(pr_auc, 2 * year as u64 + 1)
        }));
    }
    let scores: Vec<f64> = preds.iter().map(|p| cfg.score_rule.score(&p.risk)).collect();
    let ids: Vec<&str> = records.iter().map(|r| r.sample_id.as_str()).collect();
    let point = concordance(&scores, records).index();
    rows.push(row("c_index", None, records.len(), point, || {
        let b = bootstrap_ci(
            |idx| {
                let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                let r: Vec<RiskRecord> = idx.iter().map(|&i| records[i].clone()).collect();
                concordance(&s, &r).index()
            },
            &ids,
            cfg.n_boot,
            cfg.alpha,
            seed.wrapping_add(100),
        )?;
        Ok((b.lo, b.hi))
    }));
    Ok(rows)
}

/// Share of pooled attention that falls on flagged patches.
pub fn attention_mass(attn: &AttentionMap, mask: &[bool]) -> Result<f64> {
    if mask.len() != attn.pooled_weights.len() {
        return Err(Error::shape(
            "attention_mass",
            format!("mask of {} for {} weights", mask.len(), attn.pooled_weights.len()),
        ));
    }
    Ok(attn
        .pooled_weights
        .iter()
        .zip(mask)
        .filter(|&(_, &m)| m)
        .map(|(w, _)| w)
        .sum())
}

/// One-sided exact sign test: probability of at least `wins` successes out
/// of `wins + losses` fair coin flips. Ties are dropped by the caller.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    // log C(n, k) built up term by term to stay finite for large n.
    let ln2n = n as f64 * std::f64::consts::LN_2;
    let mut log_c = 0.0;
    let mut total = 0.0;
    for k in 0..=n {
        if k > 0 {
            log_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            total += (log_c - ln2n).exp();
        }
    }
    total.min(1.0)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

/// Tab-separated metric table; `regime` adds a leading column.
pub fn metrics_tsv(rows: &[(Option<&str>, &MetricRow)]) -> String {
    let with_regime = rows.iter().any(|(r, _)| r.is_some());
    let mut out = String::new();
    if with_regime {
        out.push_str("regime\t");
    }
    out.push_str("metric\tyear\tpoint\tlo\thi\tn\n");
    for (regime, r) in rows {
        if with_regime {
            out.push_str(regime.unwrap_or(""));
            out.push('\t');
        }
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.metric,
            r.year.map_or_else(|| "all".to_string(), |y| y.to_string()),
            fmt_opt(r.point),
            fmt_opt(r.lo),
            fmt_opt(r.hi),
            r.n
        ));
    }
    out
}

/// Tab-separated cumulative risks per scan.
pub fn predictions_tsv(preds: &[Prediction]) -> String {
    let mut out = String::from("sample_id");
    for y in 1..=HORIZON {
        out.push_str(&format!("\tyear{y}"));
    }
    out.push_str("\tbase_logit\n");
    for p in preds {
        out.push_str(&p.sample_id);
        for c in p.risk.cum_probs {
            out.push_str(&format!("\t{c:.8}"));
        }
        out.push_str(&format!("\t{:.8}\n", p.risk.base_logit));
    }
    out
}

/// Writes `metrics.tsv`, `predictions.tsv` and, when enabled, `roc.svg` and
/// `pr.svg` into `dir`.
pub fn write_report(
    dir: &Path,
    preds: &[Prediction],
    records: &[RiskRecord],
    rows: &[MetricRow],
    cfg: &EvalConfig,
) -> Result<()> {
    let table: Vec<(Option<&str>, &MetricRow)> = rows.iter().map(|r| (None, r)).collect();
    write_file(&dir.join("metrics.tsv"), metrics_tsv(&table).as_bytes())?;
    write_file(&dir.join("predictions.tsv"), predictions_tsv(preds).as_bytes())?;
    if cfg.plots {
        let mut roc = Vec::new();
        let mut pr = Vec::new();
        for year in 1..=HORIZON {
            let (scores, labels): (Vec<f64>, Vec<bool>) = preds
                .iter()
                .zip(records)
                .filter_map(|(p, r)| year_outcome(r, year).map(|l| (p.risk.cum_probs[year - 1], l)))
                .unzip();
            if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
                continue;
            }
            let label = format!("year {year}");
            roc.push(Series {
                label: label.clone(),
                points: roc_curve(&scores, &labels),
            });
            pr.push(Series {
                label,
                points: pr_curve(&scores, &labels),
            });
        }
        let roc_svg = unit_square_svg("ROC", "false positive rate", "true positive rate", &roc, true);
        let pr_svg = unit_square_svg("Precision-recall", "recall", "precision", &pr, false);
        write_file(&dir.join("roc.svg"), roc_svg.as_bytes())?;
        write_file(&dir.join("pr.svg"), pr_svg.as_bytes())?;
    }
    Ok(())
}
