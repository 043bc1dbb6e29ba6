//! Censoring-aware evaluation metrics.
//!
//! Metrics return `None` when they are undefined for the given data (a
//! single-class cohort, no comparable pair), so callers can report the gap
//! instead of a made-up number.

use crate::error::{Error, Result};
use crate::phantom::{HORIZON, RiskRecord};
use crate::riskhead::RiskPrediction;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

/// Scans scored at one year, with their binary outcome.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalCohort {
    pub year: usize,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub included_ids: Vec<String>,
}

impl EvalCohort {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// Outcome of a record at year `n`: `Some(true)` for an event by year `n`,
/// `Some(false)` for a scan known to be cancer-free at `n`, `None` when the
/// scan was censored before `n`.
pub fn year_outcome(r: &RiskRecord, year: usize) -> Option<bool> {
    let n = year as f64;
    if r.event {
        Some(r.time_years <= n)
    } else if r.time_years >= n {
        Some(false)
    } else {
        None
    }
}

/// Eligible scans at `year` (1-based), scored by their cumulative risk at
/// that year. Order follows `records`.
pub fn year_cohort(
    predictions: &HashMap<String, RiskPrediction>,
    records: &[RiskRecord],
    year: usize,
) -> Result<EvalCohort> {
    if !(1..=HORIZON).contains(&year) {
        return Err(Error::validation("year", format!("{year} is not in 1..={HORIZON}")));
    }
    let mut c = EvalCohort {
        year,
        ..Default::default()
    };
    for r in records {
        let p = predictions
            .get(&r.sample_id)
            .ok_or_else(|| Error::Data(format!("no prediction for {}", r.sample_id)))?;
        if let Some(label) = year_outcome(r, year) {
            c.scores.push(p.cum_probs[year - 1]);
            c.labels.push(label);
            c.included_ids.push(r.sample_id.clone());
        }
    }
    Ok(c)
}

fn check_lengths(scores: &[f64], labels: &[bool]) {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
}

/// Indices sorted by descending score, NaN-free input assumed.
fn by_score_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Mann–Whitney ROC-AUC with ties counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    check_lengths(scores, labels);
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // Walk from the lowest score up; within a tie group every positive beats
    // the negatives below the group and ties with the group's negatives.
    let mut idx = by_score_desc(scores);
    idx.reverse();
    let mut neg_below = 0u64;
    let mut twice_wins = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_wins += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Some(twice_wins as f64 / (2 * pos * neg) as f64)
}

/// Average precision: `Σ_k (R_k − R_{k−1}) · P_k` over descending distinct
/// score thresholds, tied scores entering together.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    check_lengths(scores, labels);
    let total_pos = labels.iter().filter(|&&l| l).count();
    if total_pos == 0 {
        return None;
    }
    let idx = by_score_desc(scores);
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let mut new_tp = 0;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            new_tp += labels[idx[j]] as usize;
            j += 1;
        }
        tp += new_tp;
        seen += j - i;
        if new_tp > 0 {
            ap += (new_tp as f64 / total_pos as f64) * (tp as f64 / seen as f64);
        }
        i = j;
    }
    Some(ap)
}

/// One point per distinct threshold, from (0, 0) to (1, 1): (fpr, tpr).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    check_lengths(scores, labels);
    let pos = labels.iter().filter(|&&l| l).count().max(1) as f64;
    let neg = labels.iter().filter(|&&l| !l).count().max(1) as f64;
    let idx = by_score_desc(scores);
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        pts.push((fp / neg, tp / pos));
        i = j;
    }
    pts
}

/// One point per distinct threshold: (recall, precision).
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    check_lengths(scores, labels);
    let pos = labels.iter().filter(|&&l| l).count().max(1) as f64;
    let idx = by_score_desc(scores);
    let mut pts = Vec::new();
    let (mut tp, mut seen) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            tp += labels[idx[j]] as u8 as f64;
            seen += 1.0;
            j += 1;
        }
        pts.push((tp / pos, tp / seen));
        i = j;
    }
    pts
}

/// Which cumulative probability ranks scans for the concordance index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreRule {
    Year(usize),
    MeanOverYears,
}

impl Default for ScoreRule {
    fn default() -> Self {
        ScoreRule::Year(HORIZON)
    }
}

impl ScoreRule {
    pub fn score(&self, p: &RiskPrediction) -> f64 {
        match *self {
            ScoreRule::Year(n) => p.cum_probs[n.clamp(1, HORIZON) - 1],
            ScoreRule::MeanOverYears => p.cum_probs.iter().sum::<f64>() / HORIZON as f64,
        }
    }
}

/// Counts of a concordance computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Concordance {
    pub comparable: u64,
    pub concordant: u64,
    pub tied: u64,
}

impl Concordance {
    pub fn index(&self) -> Option<f64> {
        (self.comparable > 0).then(|| (2 * self.concordant + self.tied) as f64 / (2 * self.comparable) as f64)
    }
}

/// Fenwick tree over score ranks.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< i`.
    fn below(&self, mut i: usize) -> u64 {
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's concordance counts in O(n log n).
///
/// Pair (i, j) is comparable when i has an event and either `t_i < t_j` or
/// j is censored at `t_j = t_i`.
pub fn concordance(scores: &[f64], records: &[RiskRecord]) -> Concordance {
    assert_eq!(scores.len(), records.len(), "scores and records differ in length");
    let n = scores.len();
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    distinct.dedup();
    let rank = |s: f64| distinct.partition_point(|&d| d < s);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .time_years
            .partial_cmp(&records[a].time_years)
            .unwrap_or(Ordering::Equal)
    });
    let mut tree = Fenwick(vec![0; distinct.len() + 1]);
    let mut inserted = 0u64;
    let mut c = Concordance::default();
    let mut g = 0;
    while g < n {
        let t = records[order[g]].time_years;
        let mut end = g;
        while end < n && records[order[end]].time_years == t {
            end += 1;
        }
        let group = &order[g..end];
        for &j in group.iter().filter(|&&j| !records[j].event) {
            tree.add(rank(scores[j]));
            inserted += 1;
        }
        for &i in group.iter().filter(|&&i| records[i].event) {
            let r = rank(scores[i]);
            let lower = tree.below(r);
            let tied = tree.below(r + 1) - lower;
            c.comparable += inserted;
            c.concordant += lower;
            c.tied += tied;
        }
        for &i in group.iter().filter(|&&i| records[i].event) {
            tree.add(rank(scores[i]));
            inserted += 1;
        }
        g = end;
    }
    c
}

pub fn c_index(scores: &[f64], records: &[RiskRecord]) -> Option<f64> {
    concordance(scores, records).index()
}

/// Percentile bootstrap interval.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    /// Resamples on which the metric was undefined.
    pub skipped: usize,
    pub resamples: usize,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Resamples units with replacement and evaluates `metric` on the selected
/// item indices. `groups[i]` names the unit of item `i` (a patient); all items
/// of a drawn unit enter together. Resample `b` uses its own generator derived
/// from `(seed, b)`.
pub fn bootstrap_ci<M, G>(metric: M, groups: &[G], n_boot: usize, alpha: f64, seed: u64) -> Result<BootstrapCi>
where
    M: Fn(&[usize]) -> Option<f64>,
    G: Ord + Clone,
{
    if groups.is_empty() {
        return Err(Error::Undefined("bootstrap over no data"));
    }
    if n_boot == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation(
            "bootstrap",
            format!("need n_boot > 0 and alpha in (0, 1), got {n_boot}, {alpha}"),
        ));
    }
    let mut units: BTreeMap<G, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        units.entry(g.clone()).or_default().push(i);
    }
    let units: Vec<Vec<usize>> = units.into_values().collect();
    let mut values = Vec::with_capacity(n_boot);
    let mut items = Vec::with_capacity(groups.len());
    for b in 0..n_boot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        items.clear();
        for _ in 0..units.len() {
            items.extend_from_slice(&units[rng.random_range(0..units.len())]);
        }
        if let Some(v) = metric(&items).filter(|v| v.is_finite()) {
            values.push(v);
        }
    }
    let skipped = n_boot - values.len();
    if 2 * skipped > n_boot {
        return Err(Error::Data(format!(
            "metric undefined on {skipped} of {n_boot} bootstrap resamples"
        )));
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(BootstrapCi {
        lo: quantile(&values, alpha / 2.0),
        hi: quantile(&values, 1.0 - alpha / 2.0),
        skipped,
        resamples: n_boot,
    })
}
