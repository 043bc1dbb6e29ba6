//! Survival labels, the risk loss and the attention-guidance terms.
//!
//! Every loss has a plain `f64` version working on finished predictions, used
//! for reporting and as a test oracle, and a `*_graph` version recording the
//! same quantity on a [`Tape`] for training.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::phantom::{HORIZON, RiskRecord, side_of_lobe};
use crate::real::Real;
use crate::riskhead::{AttentionMap, RiskPrediction};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// Probability clamp of the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;
/// Floor applied to attention weights before logs are taken.
pub const ATTN_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn index(self) -> usize {
        match self {
            Side::Right => 0,
            Side::Left => 1,
        }
    }
}

/// Optional localization supervision of one scan.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegionAnnotation {
    /// One flag per patch, set where a nodule intersects the patch.
    pub nodule_patch_mask: Option<Vec<bool>>,
    /// Lobe 1..=5 of the malignant nodule.
    pub lobe_label: Option<u8>,
    pub side_label: Option<Side>,
}

impl RegionAnnotation {
    pub fn is_empty(&self) -> bool {
        self.nodule_patch_mask.is_none() && self.lobe_label.is_none() && self.side_label.is_none()
    }

    /// Checks the invariants; `num_patches` additionally checks the mask length.
    pub fn validate(&self, num_patches: Option<usize>) -> Result<()> {
        if let Some(m) = &self.nodule_patch_mask {
            if !m.iter().any(|&b| b) {
                return Err(Error::validation("nodule_patch_mask", "has no positive patch"));
            }
            if let Some(n) = num_patches.filter(|&n| n != m.len()) {
                return Err(Error::validation(
                    "nodule_patch_mask",
                    format!("{} entries for {n} patches", m.len()),
                ));
            }
        }
        if let Some(l) = self.lobe_label {
            let side =
                side_of_lobe(l).ok_or_else(|| Error::validation("lobe_label", format!("{l} is not in 1..=5")))?;
            if self.side_label.is_some_and(|s| s != side) {
                return Err(Error::validation(
                    "side_label",
                    format!("lobe {l} lies on the {side:?} side"),
                ));
            }
        }
        Ok(())
    }

    /// The same annotation with every field removed except the ones a
    /// supervision regime keeps.
    pub fn restricted(&self, keep_mask: bool, keep_regions: bool) -> RegionAnnotation {
        RegionAnnotation {
            nodule_patch_mask: self.nodule_patch_mask.clone().filter(|_| keep_mask),
            lobe_label: self.lobe_label.filter(|_| keep_regions),
            side_label: self.side_label.filter(|_| keep_regions),
        }
    }
}

/// How censored scans enter the risk loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CensorMode {
    /// All six years count, with label 0.
    #[default]
    AllZero,
    /// Years past the censoring time are left out of the mean.
    FollowUp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskLabels {
    pub y: [f64; HORIZON],
    /// Years that enter the loss.
    pub observed: [bool; HORIZON],
    pub censored: bool,
    pub record: RiskRecord,
}

impl RiskLabels {
    pub fn num_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }
}

/// Year `n` is positive when the event happens at or before `n` years.
pub fn build_labels(r: &RiskRecord, mode: CensorMode) -> Result<RiskLabels> {
    r.validate()?;
    let y = std::array::from_fn(|k| {
        if r.event && r.time_years <= (k + 1) as f64 {
            1.0
        } else {
            0.0
        }
    });
    let observed = std::array::from_fn(|k| match mode {
        CensorMode::FollowUp if !r.event => r.time_years >= (k + 1) as f64,
        _ => true,
    });
    Ok(RiskLabels {
        y,
        observed,
        censored: !r.event,
        record: r.clone(),
    })
}

/// Mean binary cross-entropy over the observed years; 0 when none is observed.
pub fn risk_loss(pred: &RiskPrediction, labels: &RiskLabels) -> f64 {
    let n = labels.num_observed();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = (0..HORIZON)
        .filter(|&k| labels.observed[k])
        .map(|k| {
            let p = pred.cum_probs[k].clamp(BCE_EPS, 1.0 - BCE_EPS);
            let y = labels.y[k];
            -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    total / n as f64
}

/// [`risk_loss`] on `probs` (`[1, 6]`).
pub fn risk_loss_graph<F: Real>(tape: &Tape<F>, probs: Var, labels: &RiskLabels) -> Var {
    let y = Array2::from_shape_fn((1, HORIZON), |(_, k)| F::of(labels.y[k]));
    let w = Array2::from_shape_fn(
        (1, HORIZON),
        |(_, k)| {
            if labels.observed[k] { F::one() } else { F::zero() }
        },
    );
    let denom = F::of(labels.num_observed().max(1) as f64);
    tape.bce(probs, &y, &w, denom, F::of(BCE_EPS))
}

fn kl_target(mask: &[bool]) -> Result<Vec<f64>> {
    let m = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        return Err(Error::validation("nodule_patch_mask", "has no positive patch"));
    }
    Ok(mask.iter().map(|&b| if b { 1.0 / m as f64 } else { 0.0 }).collect())
}

fn required_mask(ann: &RegionAnnotation) -> Result<&[bool]> {
    ann.nodule_patch_mask
        .as_deref()
        .ok_or(Error::Undefined("no nodule mask annotated"))
}

/// `KL(q ‖ p)` of one attention distribution `p` against the uniform
/// distribution `q` over the annotated patches.
pub fn kl_to_mask(weights: &[f64], mask: &[bool]) -> Result<f64> {
    if weights.len() != mask.len() {
        return Err(Error::shape(
            "aiag_kl",
            format!("{} weights for a mask of {}", weights.len(), mask.len()),
        ));
    }
    let q = kl_target(mask)?;
    let clamped: Vec<f64> = weights.iter().map(|w| w.max(ATTN_FLOOR)).collect();
    let total: f64 = clamped.iter().sum();
    Ok(q.iter()
        .zip(&clamped)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, pi)| qi * (qi / (pi / total)).ln())
        .sum())
}

/// KL term on the head-averaged attention.
pub fn aiag_kl(attn: &AttentionMap, ann: &RegionAnnotation) -> Result<f64> {
    kl_to_mask(&attn.pooled_weights, required_mask(ann)?)
}

/// KL term recorded on the tape for one `[1, N]` attention row.
pub fn aiag_kl_graph<F: Real>(tape: &Tape<F>, weights: Var, mask: &[bool]) -> Result<Var> {
    let (_, n) = tape.shape(weights);
    if n != mask.len() {
        return Err(Error::shape(
            "aiag_kl",
            format!("{n} weights for a mask of {}", mask.len()),
        ));
    }
    let q = kl_target(mask)?;
    let q = Array2::from_shape_fn((1, n), |(_, i)| F::of(q[i]));
    Ok(tape.kl_target_pred(weights, &q, F::of(ATTN_FLOOR)))
}

/// Region of every patch and the annotated target region.
///
/// Lobes are used when a lobe label exists, otherwise the two sides.
/// Patches with label 0 belong to no region.
pub fn region_assignment(lobe_patches: &[u8], ann: &RegionAnnotation) -> Result<(Vec<Option<usize>>, usize)> {
    if let Some(&bad) = lobe_patches.iter().find(|&&l| l > 5) {
        return Err(Error::validation(
            "lobe_mask_patches",
            format!("label {bad} is not in 0..=5"),
        ));
    }
    let (regions, target): (Vec<Option<usize>>, usize) = match (ann.lobe_label, ann.side_label) {
        (Some(l), _) => {
            if !(1..=5).contains(&l) {
                return Err(Error::validation("lobe_label", format!("{l} is not in 1..=5")));
            }
            let r = lobe_patches.iter().map(|&p| (p > 0).then(|| p as usize - 1)).collect();
            (r, l as usize - 1)
        }
        (None, Some(side)) => {
            let r = lobe_patches.iter().map(|&p| side_of_lobe(p).map(Side::index)).collect();
            (r, side.index())
        }
        (None, None) => return Err(Error::Undefined("no lobe or side label annotated")),
    };
    if !regions.contains(&Some(target)) {
        return Err(Error::Data(format!(
            "annotated region {} has no patch in the lobe mask",
            match ann.lobe_label {
                Some(l) => format!("lobe {l}"),
                None => format!("side {:?}", ann.side_label.unwrap()),
            }
        )));
    }
    Ok((regions, target))
}

/// `−ln(a_target)` for region masses `a` of one attention distribution.
pub fn region_ce(weights: &[f64], lobe_patches: &[u8], ann: &RegionAnnotation) -> Result<f64> {
    if weights.len() != lobe_patches.len() {
        return Err(Error::shape(
            "aiag_region_ce",
            format!("{} weights for {} patch labels", weights.len(), lobe_patches.len()),
        ));
    }
    let (regions, target) = region_assignment(lobe_patches, ann)?;
    let mut at = 0.0;
    let mut total = 0.0;
    for (w, r) in weights.iter().zip(&regions) {
        if let Some(r) = r {
            total += w;
            if *r == target {
                at += w;
            }
        }
    }
    if total <= 0.0 {
        return Err(Error::Undefined("no attention inside the lung"));
    }
    Ok(-(at.max(ATTN_FLOOR) / total).ln())
}

/// Region term on the head-averaged attention.
pub fn aiag_region_ce(attn: &AttentionMap, lobe_patches: &[u8], ann: &RegionAnnotation) -> Result<f64> {
    region_ce(&attn.pooled_weights, lobe_patches, ann)
}

pub fn aiag_region_ce_graph<F: Real>(
    tape: &Tape<F>,
    weights: Var,
    lobe_patches: &[u8],
    ann: &RegionAnnotation,
) -> Result<Var> {
    let (_, n) = tape.shape(weights);
    if n != lobe_patches.len() {
        return Err(Error::shape(
            "aiag_region_ce",
            format!("{n} weights for {} patch labels", lobe_patches.len()),
        ));
    }
    let (regions, target) = region_assignment(lobe_patches, ann)?;
    Ok(tape.region_nll(weights, &regions, target, F::of(ATTN_FLOOR)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_kl: f64,
    pub lambda_region: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_kl: 1.0,
            lambda_region: 1.0,
        }
    }
}

impl LossWeights {
    pub const NONE: LossWeights = LossWeights {
        lambda_kl: 0.0,
        lambda_region: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("lambda_kl", self.lambda_kl), ("lambda_region", self.lambda_region)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(
                    field,
                    format!("must be finite and nonnegative, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Loss settings of a fine-tuning run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub censor_mode: CensorMode,
    /// Apply the guidance terms to every pooling head and average, instead
    /// of to the head-averaged attention.
    pub per_head: bool,
}

/// `risk + λ_kl·kl + λ_region·region`, absent terms contributing nothing.
pub fn combine_losses(risk: f64, kl: Option<f64>, region: Option<f64>, w: &LossWeights) -> f64 {
    risk + w.lambda_kl * kl.unwrap_or(0.0) + w.lambda_region * region.unwrap_or(0.0)
}

/// Per-patch lobe label of a canonical-grid lobe mask: the most frequent
/// nonzero label in the patch (smallest label on ties), 0 for patches
/// without lung.
pub fn patch_lobe_labels(mask: &Array3<u8>, patch: [usize; 3]) -> Vec<u8> {
    let (d0, d1, d2) = mask.dim();
    let grid = [d0 / patch[0], d1 / patch[1], d2 / patch[2]];
    let mut counts = vec![[0u32; 6]; grid[0] * grid[1] * grid[2]];
    for ((i, j, k), &v) in mask.indexed_iter() {
        let g = [i / patch[0], j / patch[1], k / patch[2]];
        if v == 0 || v > 5 || g[0] >= grid[0] || g[1] >= grid[1] || g[2] >= grid[2] {
            continue;
        }
        counts[(g[0] * grid[1] + g[1]) * grid[2] + g[2]][v as usize] += 1;
    }
    counts
        .iter()
        .map(|c| {
            let mut best = 0u8;
            for l in 1..=5u8 {
                if c[l as usize] > 0 && c[l as usize] > c[best as usize] {
                    best = l;
                }
            }
            best
        })
        .collect()
}
