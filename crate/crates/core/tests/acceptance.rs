//! Acceptance suite: one PASS or FAIL line per criterion.
//!
//! Reference values are computed here by independent oracles (brute-force
//! enumeration, finite differences, closed forms) rather than taken from the
//! library. The end-to-end run is the expensive part (about half an hour on
//! one CPU core); it is shared by the learnability, attention-guidance and
//! training-probe checks.

use lungrisk::autodiff::{Tape, rotate_pairs};
use lungrisk::encoder::EncoderConfig;
use lungrisk::losses::{
    CensorMode, RegionAnnotation, RiskLabels, aiag_kl_graph, aiag_region_ce_graph, build_labels, kl_to_mask, region_ce,
    risk_loss, risk_loss_graph,
};
use lungrisk::metrics::{concordance, pr_auc, roc_auc};
use lungrisk::mim::{DecoderConfig, mae_forward_graph, mae_loss, mae_loss_graph, random_mask};
use lungrisk::model::{ModelConfig, init_params};
use lungrisk::params::{Binder, Initializer, ParamStore, trunc_normal};
use lungrisk::phantom::{HORIZON, RiskRecord, generate_phantom};
use lungrisk::pipeline::checkpoint::final_dir;
use lungrisk::pipeline::config::{DataConfig, ExperimentConfig, Regime};
use lungrisk::pipeline::dataset::Dataset;
use lungrisk::pipeline::evaluate::sign_test_p;
use lungrisk::pipeline::experiment::{ExperimentReport, Layout, paired_wins, run_experiment};
use lungrisk::pipeline::io::Split;
use lungrisk::pipeline::train::{RunOptions, finetune, pretrain};
use lungrisk::riskhead::{RiskPrediction, cumulative_hazard, init_head, risk_forward_graph};
use lungrisk::tokenizer::{PatchGrid, RopeTables, patchify};
use lungrisk::volume::Volume;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::panic::{AssertUnwindSafe, catch_unwind};
use std::path::Path;
use std::time::Instant;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

// ---------------------------------------------------------------- oracles

/// Pairwise ROC-AUC: P(score_pos > score_neg) + 0.5 P(tie).
fn brute_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0u64);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    (pairs > 0).then(|| num / pairs as f64)
}

/// Average precision by enumerating every distinct threshold:
/// sum over thresholds of (recall gain) × precision at that threshold.
fn brute_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| labels[i]).count();
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / selected.len() as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Harrell's C by enumerating every ordered pair.
fn brute_cindex(scores: &[f64], recs: &[RiskRecord]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0u64);
    for i in 0..recs.len() {
        if !recs[i].event {
            continue;
        }
        for j in 0..recs.len() {
            if i == j {
                continue;
            }
            let ti = recs[i].time_years;
            let tj = recs[j].time_years;
            let comparable = ti < tj || (ti == tj && !recs[j].event);
            if comparable {
                den += 1;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    (den > 0).then(|| num / den as f64)
}

/// Central differences of `f` at `x0`, one coordinate at a time.
fn numeric_grad(x0: &Array2<f64>, h: f64, f: &dyn Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x0.dim());
    let mut x = x0.clone();
    for idx in 0..x0.len() {
        let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
        let orig = x[[r, c]];
        x[[r, c]] = orig + h;
        let up = f(&x);
        x[[r, c]] = orig - h;
        let down = f(&x);
        x[[r, c]] = orig;
        g[[r, c]] = (up - down) / (2.0 * h);
    }
    g
}

/// Largest deviation relative to the largest reference component. The scale
/// is floored at 1e-6: some tensors (key biases of a softmax) have an exactly
/// zero gradient, where the difference quotient is pure rounding noise.
fn rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let scale = numeric
        .iter()
        .chain(analytic.iter())
        .fold(1e-6f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

// ------------------------------------------------------------- fixtures

fn tiny_model() -> ModelConfig {
    ModelConfig {
        grid_shape: [8, 8, 8],
        patch_size: [4, 4, 4],
        encoder: EncoderConfig {
            embed_dim: 12,
            depth: 2,
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

fn random_grid(rng: &mut ChaCha8Rng, shape: [usize; 3], patch: [usize; 3]) -> PatchGrid<f64> {
    let data = Array3::from_shape_simple_fn((shape[0], shape[1], shape[2]), || rng.random::<f32>() * 2.0 - 1.0);
    patchify(&Volume::new(data, [1.0; 3]).unwrap(), patch).unwrap()
}

fn record(id: &str, event: bool, t: f64) -> RiskRecord {
    RiskRecord {
        sample_id: id.into(),
        event,
        time_years: t,
    }
}

/// Configuration of the end-to-end run: desk model, 64³ phantoms.
fn e2e_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 20_240_601,
        ..ExperimentConfig::default()
    };
    cfg.data.n_train = 512;
    cfg.data.n_test = 128;
    cfg.data.n_probe = 128;
    cfg.pretrain.epochs = 20;
    cfg.regimes = vec![Regime::ExpertAnno, Regime::None];
    cfg
}

struct EndToEnd {
    root: std::path::PathBuf,
    report: ExperimentReport,
    minutes: f64,
}

fn run_e2e(root: &Path) -> Result<EndToEnd, String> {
    let cfg = e2e_config();
    let t = Instant::now();
    let report = run_experiment(&cfg, root, false).map_err(|e| format!("experiment failed: {e}"))?;
    Ok(EndToEnd {
        root: root.to_path_buf(),
        report,
        minutes: t.elapsed().as_secs_f64() / 60.0,
    })
}

// ------------------------------------------------------------- criteria

fn isotonicity_random_heads() -> Result<(usize, f64), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let draws = 10_000;
    for i in 0..draws {
        let d = 1 + rng.random_range(0..8);
        let sd = [0.02, 0.3, 1.0, 5.0][i % 4];
        let mut store = ParamStore::<f32>::new();
        let mut init = Initializer { rng: &mut rng, sd };
        init_head(&mut store, &mut init, d);
        let fsd = [0.1, 1.0, 10.0][i % 3];
        let features: Array2<f32> = trunc_normal(&mut rng, (1, 2 * d), fsd);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let f = tape.constant(features);
        let out = cumulative_hazard(&b, f, Default::default()).map_err(|e| e.to_string())?;
        let p = tape.value_owned(out.probs);
        for k in 0..HORIZON - 1 {
            worst = worst.max((p[[0, k]] - p[[0, k + 1]]) as f64);
        }
        // The f64 reconstruction from base logit and increments as well.
        let inc = tape.value_owned(out.increments);
        let pred = RiskPrediction::from_parts(
            tape.scalar(out.base_logit) as f64,
            std::array::from_fn(|k| inc[[0, k]] as f64),
        );
        worst = worst.max(pred.max_violation());
    }
    Ok((draws, worst))
}

fn criterion_isotonicity(e2e: &Result<EndToEnd, String>) -> Outcome {
    let t = Instant::now();
    let (draws, worst) = isotonicity_random_heads()?;
    let secs = t.elapsed().as_secs_f64();
    ensure(worst <= 1e-7, || format!("random heads: violation {worst:e} > 1e-7"))?;
    ensure(secs < 60.0, || format!("random heads took {secs:.1}s"))?;
    let e2e = e2e.as_ref().map_err(|e| format!("no training run to probe: {e}"))?;
    let mut probes = 0;
    let mut train_worst = 0.0f64;
    for r in Regime::ALL {
        let dir = Layout { root: e2e.root.clone() }.finetune(r);
        let Ok(ck) = lungrisk::pipeline::checkpoint::Checkpoint::<f32>::load(&final_dir(&dir)) else {
            continue;
        };
        probes += ck.manifest.history.max_violation.len();
        train_worst = ck
            .manifest
            .history
            .max_violation
            .iter()
            .copied()
            .fold(train_worst, f64::max);
    }
    ensure(probes >= 10, || format!("only {probes} epoch-end probes recorded"))?;
    ensure(train_worst <= 1e-7, || {
        format!("epoch-end probe violation {train_worst:e}")
    })?;
    Ok(format!(
        "{draws} random heads max violation {worst:.1e} in {secs:.1}s; {probes} epoch-end probes max {train_worst:.1e}"
    ))
}

fn criterion_gradients() -> Outcome {
    let t = Instant::now();
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut report = Vec::new();

    // risk_loss over probabilities, for an event and a censored label.
    for (event, time) in [(true, 2.5), (false, 4.0)] {
        let labels = build_labels(&record("g", event, time), CensorMode::AllZero).unwrap();
        let p0 = Array2::from_shape_fn((1, HORIZON), |(_, k)| {
            0.1 + 0.12 * k as f64 + rng.random::<f64>() * 0.05
        });
        let value = |p: &Array2<f64>| {
            let tape = Tape::new();
            let v = tape.leaf(p.clone(), true);
            tape.scalar(risk_loss_graph(&tape, v, &labels))
        };
        let tape = Tape::new();
        let v = tape.leaf(p0.clone(), true);
        let loss = risk_loss_graph(&tape, v, &labels);
        // The graph agrees with the plain implementation.
        let plain = risk_loss(&pred_from_probs(&p0), &labels);
        ensure((tape.scalar(loss) - plain).abs() < 1e-12, || {
            "risk_loss graph vs value".into()
        })?;
        let g = tape.backward(loss).get(v).unwrap().clone();
        let e = rel_err(&g, &numeric_grad(&p0, h, &value));
        ensure(e < 1e-4, || format!("risk_loss relative error {e:e}"))?;
        report.push(("risk_loss", e));
    }

    // KL and region terms over attention rows.
    let n = 20;
    let logits: Array2<f64> = trunc_normal(&mut rng, (1, n), 1.0);
    let w0 = logits.mapv(f64::exp);
    let w0 = &w0 / w0.sum();
    let mask: Vec<bool> = (0..n).map(|i| i % 7 == 2 || i == 5).collect();
    let kl_value = |w: &Array2<f64>| {
        let tape = Tape::new();
        let v = tape.leaf(w.clone(), true);
        tape.scalar(aiag_kl_graph(&tape, v, &mask).unwrap())
    };
    let tape = Tape::new();
    let v = tape.leaf(w0.clone(), true);
    let kl = aiag_kl_graph(&tape, v, &mask).unwrap();
    let plain = kl_to_mask(w0.as_slice().unwrap(), &mask).unwrap();
    ensure((tape.scalar(kl) - plain).abs() < 1e-12, || {
        "aiag_kl graph vs value".into()
    })?;
    let g = tape.backward(kl).get(v).unwrap().clone();
    let e = rel_err(&g, &numeric_grad(&w0, h, &kl_value));
    ensure(e < 1e-4, || format!("aiag_kl relative error {e:e}"))?;
    report.push(("aiag_kl", e));

    let lobes: Vec<u8> = (0..n).map(|i| (i % 6) as u8).collect();
    for ann in [
        RegionAnnotation {
            lobe_label: Some(3),
            ..Default::default()
        },
        RegionAnnotation {
            side_label: Some(lungrisk::losses::Side::Left),
            ..Default::default()
        },
    ] {
        let value = |w: &Array2<f64>| {
            let tape = Tape::new();
            let v = tape.leaf(w.clone(), true);
            tape.scalar(aiag_region_ce_graph(&tape, v, &lobes, &ann).unwrap())
        };
        let tape = Tape::new();
        let v = tape.leaf(w0.clone(), true);
        let ce = aiag_region_ce_graph(&tape, v, &lobes, &ann).unwrap();
        let plain = region_ce(w0.as_slice().unwrap(), &lobes, &ann).unwrap();
        ensure((tape.scalar(ce) - plain).abs() < 1e-12, || {
            "region ce graph vs value".into()
        })?;
        let g = tape.backward(ce).get(v).unwrap().clone();
        let e = rel_err(&g, &numeric_grad(&w0, h, &value));
        ensure(e < 1e-4, || format!("aiag_region_ce relative error {e:e}"))?;
        report.push(("aiag_region_ce", e));
    }

    // Reconstruction loss over the decoder output, masked and all-patch.
    let mut mrng = ChaCha8Rng::seed_from_u64(3);
    let plan = random_mask(16, 0.75, &mut mrng).unwrap();
    let recon0: Array2<f64> = trunc_normal(&mut mrng, (16, 8), 1.0);
    let target: Array2<f64> = trunc_normal(&mut mrng, (16, 8), 1.0);
    for all in [false, true] {
        let value = |r: &Array2<f64>| {
            let tape = Tape::new();
            let v = tape.leaf(r.clone(), true);
            tape.scalar(mae_loss_graph(&tape, v, &target, &plan, all).unwrap())
        };
        let tape = Tape::new();
        let v = tape.leaf(recon0.clone(), true);
        let l = mae_loss_graph(&tape, v, &target, &plan, all).unwrap();
        let plain = mae_loss(&recon0, &target, &plan, all).unwrap();
        ensure((tape.scalar(l) - plain).abs() < 1e-12, || {
            "mae_loss graph vs value".into()
        })?;
        let g = tape.backward(l).get(v).unwrap().clone();
        let e = rel_err(&g, &numeric_grad(&recon0, h, &value));
        ensure(e < 1e-4, || format!("mae_loss relative error {e:e}"))?;
        report.push(("mae_loss", e));
    }

    // Full forward pass: every parameter tensor of a small model, through
    // the risk, KL and region terms together.
    let cfg = tiny_model();
    let mut params = init_params::<f64>(&cfg, 4).unwrap();
    for (name, t) in params.iter_mut() {
        let noise: Array2<f64> = trunc_normal(&mut rng, t.dim(), 0.2);
        // Norm gains stay near one so the checks run in a sane regime.
        *t = if name.contains("norm") && name.ends_with(".weight") {
            noise + 1.0
        } else {
            noise
        };
    }
    let grid = random_grid(&mut rng, cfg.grid_shape, cfg.patch_size);
    let labels = build_labels(&record("g", true, 3.0), CensorMode::AllZero).unwrap();
    let npatch = cfg.num_patches();
    let pmask: Vec<bool> = (0..npatch).map(|i| i % 3 == 0).collect();
    let plobes: Vec<u8> = (0..npatch).map(|i| 1 + (i % 5) as u8).collect();
    let ann = RegionAnnotation {
        lobe_label: Some(2),
        ..Default::default()
    };
    // Loss value and, on request, the gradient of every bound parameter.
    let forward = |store: &ParamStore<f64>, want_grads: bool| {
        let tape = Tape::new();
        let b = Binder::new(&tape, store);
        let tokens = tape.constant(grid.tokens.clone());
        let g = risk_forward_graph(&b, tokens, &cfg, None).unwrap();
        let risk = risk_loss_graph(&tape, g.hazard.probs, &labels);
        let kl = aiag_kl_graph(&tape, g.pool.mean_weights, &pmask).unwrap();
        let ce = aiag_region_ce_graph(&tape, g.pool.mean_weights, &plobes, &ann).unwrap();
        let s = tape.add(risk, kl);
        let loss = tape.add(s, ce);
        let grads = want_grads.then(|| b.gradients(&tape.backward(loss)));
        (tape.scalar(loss), grads)
    };
    let grads = forward(&params, true).1.unwrap();
    let mut worst = 0.0f64;
    let mut tensors = 0;
    for name in params.names().map(String::from).collect::<Vec<_>>() {
        if name.starts_with("decoder.") {
            continue;
        }
        let x0 = params.get(&name).unwrap().clone();
        let value = |x: &Array2<f64>| {
            let mut p = params.clone();
            *p.get_mut(&name).unwrap() = x.clone();
            forward(&p, false).0
        };
        let analytic = grads.get(&name).cloned().unwrap_or_else(|| Array2::zeros(x0.dim()));
        let e = rel_err(&analytic, &numeric_grad(&x0, h, &value));
        ensure(e < 1e-3, || format!("risk_forward: {name} relative error {e:e}"))?;
        worst = worst.max(e);
        tensors += 1;
    }
    report.push(("risk_forward", worst));
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 300.0, || format!("took {secs:.0}s"))?;
    let mut best: Vec<(&str, f64)> = Vec::new();
    for (k, e) in report {
        match best.iter_mut().find(|(n, _)| *n == k) {
            Some(slot) => slot.1 = slot.1.max(e),
            None => best.push((k, e)),
        }
    }
    let parts: Vec<String> = best.iter().map(|(k, e)| format!("{k} {e:.1e}")).collect();
    Ok(format!("{}; {tensors} parameter tensors; {secs:.1}s", parts.join(", ")))
}

fn pred_from_probs(p: &Array2<f64>) -> RiskPrediction {
    RiskPrediction {
        cum_probs: std::array::from_fn(|k| p[[0, k]]),
        base_logit: 0.0,
        hazard_increments: [0.0; HORIZON],
    }
}

fn criterion_labels() -> Outcome {
    let mut cases = 0;
    for step in 1..=27 {
        let t = 0.25 * step as f64;
        for event in [true, false] {
            let labels: RiskLabels =
                build_labels(&record("l", event, t), CensorMode::AllZero).map_err(|e| e.to_string())?;
            for n in 1..=HORIZON {
                let expected = if event && t <= n as f64 { 1.0 } else { 0.0 };
                ensure(labels.y[n - 1] == expected, || {
                    format!("t={t} event={event} year {n}: got {} want {expected}", labels.y[n - 1])
                })?;
                ensure(labels.observed[n - 1], || format!("t={t} year {n} not observed"))?;
            }
            ensure(labels.censored == !event, || format!("t={t} censored flag"))?;
            cases += 1;
        }
    }
    Ok(format!("{cases} (time, status) cases × {HORIZON} years match"))
}

fn criterion_metrics() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut defined = 0;
    for c in 0..200 {
        let n = rng.random_range(2..=200);
        let levels = if c % 2 == 0 { 5 } else { 1000 };
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let prev = rng.random_range(0.05..0.6);
        let labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < prev).collect();
        let (a, b) = (roc_auc(&scores, &labels), brute_auc(&scores, &labels));
        ensure(a.is_some() == b.is_some(), || format!("cohort {c}: AUC definedness"))?;
        let (p, q) = (pr_auc(&scores, &labels), brute_ap(&scores, &labels));
        ensure(p.is_some() == q.is_some(), || format!("cohort {c}: PR-AUC definedness"))?;
        if let (Some(a), Some(b), Some(p), Some(q)) = (a, b, p, q) {
            worst = worst.max((a - b).abs()).max((p - q).abs());
            defined += 1;
        }
    }
    ensure(worst < 1e-12, || format!("AUC/PR-AUC deviation {worst:e}"))?;
    let mut cworst = 0.0f64;
    for c in 0..100 {
        let n = rng.random_range(2..=200);
        let recs: Vec<RiskRecord> = (0..n)
            .map(|i| {
                // Coarse times force tied event and censoring times.
                let t = rng.random_range(1..=24) as f64 * 0.25;
                record(&format!("c{i}"), rng.random::<f64>() < 0.4, t)
            })
            .collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64).collect();
        let fast = concordance(&scores, &recs).index();
        let slow = brute_cindex(&scores, &recs);
        ensure(fast.is_some() == slow.is_some(), || {
            format!("censored cohort {c}: definedness")
        })?;
        if let (Some(a), Some(b)) = (fast, slow) {
            cworst = cworst.max((a - b).abs());
        }
    }
    ensure(cworst < 1e-12, || format!("C-index deviation {cworst:e}"))?;
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.0}s"))?;
    Ok(format!(
        "200 tied cohorts ({defined} two-class) max |Δ| {worst:.1e}; 100 censored cohorts max |Δ| {cworst:.1e}; {secs:.1}s"
    ))
}

fn criterion_closed_forms() -> Outcome {
    let mut kl_worst = 0.0f64;
    for (n, m) in [(10, 1), (64, 8), (512, 37), (7, 7)] {
        let w = vec![1.0 / n as f64; n];
        let mask: Vec<bool> = (0..n).map(|i| i < m).collect();
        let kl = kl_to_mask(&w, &mask).map_err(|e| e.to_string())?;
        kl_worst = kl_worst.max((kl - (n as f64 / m as f64).ln()).abs());
    }
    ensure(kl_worst < 1e-6, || format!("KL deviation {kl_worst:e}"))?;
    let mut ce_worst = 0.0f64;
    for per_lobe in [1, 4, 20] {
        let lobes: Vec<u8> = (0..5 * per_lobe).map(|i| 1 + (i / per_lobe) as u8).collect();
        let w = vec![1.0 / lobes.len() as f64; lobes.len()];
        for target in 1..=5 {
            let ann = RegionAnnotation {
                lobe_label: Some(target),
                ..Default::default()
            };
            let ce = region_ce(&w, &lobes, &ann).map_err(|e| e.to_string())?;
            ce_worst = ce_worst.max((ce + 0.2f64.ln()).abs());
        }
    }
    ensure(ce_worst < 1e-6, || format!("region CE deviation {ce_worst:e}"))?;
    Ok(format!(
        "KL = ln(N/M) within {kl_worst:.1e}; region CE = -ln 0.2 within {ce_worst:.1e}"
    ))
}

fn criterion_mae() -> Outcome {
    let cfg = tiny_model();
    let n = cfg.num_patches();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = init_params::<f64>(&cfg, 7).unwrap();
    for trial in 0..20 {
        let plan = random_mask(n, 0.5, &mut rng).unwrap();
        let grid = random_grid(&mut rng, cfg.grid_shape, cfg.patch_size);
        let mut altered = grid.clone();
        for &i in &plan.masked_indices {
            for v in altered.tokens.row_mut(i) {
                *v = rng.random::<f64>() * 10.0 - 5.0;
            }
        }
        let encode = |g: &PatchGrid<f64>| {
            let tape = Tape::new();
            let b = Binder::new(&tape, &params);
            let out = mae_forward_graph(&b, g, &plan, &cfg, None).unwrap();
            (tape.value_owned(out.encoded), tape.value_owned(out.recon))
        };
        let (enc_a, recon) = encode(&grid);
        let (enc_b, _) = encode(&altered);
        ensure(enc_a == enc_b, || {
            format!("trial {trial}: encoder output depends on masked content")
        })?;
        let target = grid.tokens.clone();
        let base = mae_loss(&recon, &target, &plan, false).unwrap();
        let mut recon2 = recon.clone();
        for &i in &plan.visible_indices {
            for v in recon2.row_mut(i) {
                *v = rng.random::<f64>() * 100.0;
            }
        }
        let moved = mae_loss(&recon2, &target, &plan, false).unwrap();
        ensure(base.to_bits() == moved.to_bits(), || {
            format!("trial {trial}: loss depends on visible reconstructions")
        })?;
    }
    let mut draws = 0;
    for i in 0..10_000 {
        let n = 2 + rng.random_range(0..600);
        let ratio = [0.75, 0.5, 0.25, 0.9][i % 4];
        let m = (ratio * n as f64).round() as usize;
        if m == 0 || m == n {
            continue;
        }
        let plan = random_mask(n, ratio, &mut rng).unwrap();
        let mut seen = vec![0u8; n];
        for &v in plan.visible_indices.iter().chain(&plan.masked_indices) {
            seen[v] += 1;
        }
        ensure(seen.iter().all(|&c| c == 1), || {
            format!("draw {i}: not a partition of 0..{n}")
        })?;
        ensure(plan.masked_indices.len() == m, || {
            format!("draw {i}: {} masked, want {m}", plan.masked_indices.len())
        })?;
        ensure(
            plan.masked_indices.windows(2).all(|w| w[0] < w[1]) && plan.visible_indices.windows(2).all(|w| w[0] < w[1]),
            || format!("draw {i}: indices not sorted"),
        )?;
        draws += 1;
    }
    Ok(format!(
        "20 trials bit-identical encoder output and loss; {draws} mask draws partition 0..N"
    ))
}

fn criterion_rope() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tables = RopeTables::new(24).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let q: Array2<f64> = trunc_normal(&mut rng, (1, 24), 1.0);
        let k: Array2<f64> = trunc_normal(&mut rng, (1, 24), 1.0);
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(0..32) as f64);
        let r: [f64; 3] = std::array::from_fn(|_| rng.random_range(0..32) as f64);
        let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(-64..64) as f64);
        let dot = |a: [f64; 3], b: [f64; 3]| {
            let rot = tables.rotation::<f64>(&[Some(a), Some(b)]);
            let qa = rotate_pairs(
                q.view(),
                rot.cos.slice(ndarray::s![0..1, ..]),
                rot.sin.slice(ndarray::s![0..1, ..]),
                false,
            );
            let kb = rotate_pairs(
                k.view(),
                rot.cos.slice(ndarray::s![1..2, ..]),
                rot.sin.slice(ndarray::s![1..2, ..]),
                false,
            );
            (&qa * &kb).sum()
        };
        let shifted = |x: [f64; 3]| std::array::from_fn(|a| x[a] + s[a]);
        worst = worst.max((dot(p, r) - dot(shifted(p), shifted(r))).abs());
    }
    ensure(worst < 1e-5, || format!("max deviation {worst:e}"))?;
    Ok(format!("100 draws, max |Δ q·k| {worst:.1e}"))
}

/// Year-1 AUC and C-index of the planted hazard on the held-out scans.
fn bayes_bound(cfg: &ExperimentConfig) -> (f64, f64) {
    let spec = cfg.phantom_spec();
    let (mut scores, mut recs) = (Vec::new(), Vec::new());
    for i in cfg.data.n_train..cfg.data.n_train + cfg.data.n_test {
        let p = generate_phantom(&spec, i as u64).unwrap();
        scores.push(spec.yearly_hazard(p.max_radius_mm()));
        recs.push(p.record);
    }
    let (s1, l1): (Vec<f64>, Vec<bool>) = scores
        .iter()
        .zip(&recs)
        .filter_map(|(s, r)| lungrisk::metrics::year_outcome(r, 1).map(|l| (*s, l)))
        .unzip();
    (
        roc_auc(&s1, &l1).unwrap_or(f64::NAN),
        concordance(&scores, &recs).index().unwrap_or(f64::NAN),
    )
}

fn criterion_learnability(e2e: &Result<EndToEnd, String>) -> Outcome {
    let cfg = e2e_config();
    let (bayes_auc, bayes_c) = bayes_bound(&cfg);
    let e2e = e2e
        .as_ref()
        .map_err(|e| format!("(oracle AUC {bayes_auc:.3}, C {bayes_c:.3}) {e}"))?;
    let r = e2e.report.regime(Regime::None).ok_or("no risk-only run")?;
    let get = |metric: &str, year: Option<usize>| {
        r.metrics
            .iter()
            .find(|m| m.metric == metric && m.year == year)
            .and_then(|m| m.point)
    };
    let auc = get("roc_auc", Some(1)).ok_or("year-1 AUC undefined")?;
    let c = get("c_index", None).ok_or("C-index undefined")?;
    let guided = e2e.report.regime(Regime::ExpertAnno);
    let gtext = guided
        .map(|g| {
            let f = |metric: &str, year: Option<usize>| {
                g.metrics
                    .iter()
                    .find(|m| m.metric == metric && m.year == year)
                    .and_then(|m| m.point)
            };
            format!(
                "; guided AUC {:.3} C {:.3}",
                f("roc_auc", Some(1)).unwrap_or(f64::NAN),
                f("c_index", None).unwrap_or(f64::NAN)
            )
        })
        .unwrap_or_default();
    let text = format!(
        "year-1 AUC {auc:.3} (planted-hazard oracle {bayes_auc:.3}), C-index {c:.3} (oracle {bayes_c:.3}){gtext}; {:.1} min",
        e2e.minutes
    );
    ensure(auc >= 0.85 && c >= 0.75, || text.clone())?;
    ensure(e2e.minutes < 240.0, || format!("{text}: over the CPU budget"))?;
    Ok(text)
}

fn criterion_guidance(e2e: &Result<EndToEnd, String>) -> Outcome {
    let e2e = e2e.as_ref().map_err(|e| e.clone())?;
    let guided = e2e.report.regime(Regime::ExpertAnno).ok_or("no guided run")?;
    let free = e2e.report.regime(Regime::None).ok_or("no unguided run")?;
    let (wins, losses, ties) = paired_wins(&guided.probe_mass, &free.probe_mass);
    let paired = wins + losses + ties;
    let mean = |v: &[(String, f64)]| v.iter().map(|x| x.1).sum::<f64>() / v.len().max(1) as f64;
    let (mg, mf) = (mean(&guided.probe_mass), mean(&free.probe_mass));
    let p = sign_test_p(wins, losses);
    let text = format!(
        "mean nodule attention {mg:.4} guided vs {mf:.4} unguided over {paired} scans; {wins} wins, {losses} losses, sign test p = {p:.2e}"
    );
    ensure(paired >= 100, || format!("{text}: too few paired scans"))?;
    ensure(mg > mf && p < 0.05, || text.clone())?;
    Ok(text)
}

fn small_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    cfg.data = DataConfig {
        phantom: lungrisk::phantom::PhantomSpec {
            grid_shape: [32, 32, 32],
            nodule_radius_range: (3.0, 5.0),
            ..Default::default()
        },
        n_train: 8,
        n_test: 6,
        n_probe: 4,
    };
    cfg.model.grid_shape = [32, 32, 32];
    cfg.pretrain.epochs = 3;
    cfg.pretrain.batch_size = 3;
    cfg.finetune.epochs = 3;
    cfg.finetune.frozen_epochs = 1;
    cfg.finetune.batch_size = 3;
    cfg.evaluate.n_boot = 100;
    cfg.regimes = vec![Regime::ExpertAnno, Regime::LobeSide];
    cfg
}

fn tree_bytes(dir: &Path, skip: &[&str]) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            let rel = p.strip_prefix(dir).unwrap().to_string_lossy().to_string();
            if skip.iter().any(|s| rel.starts_with(s)) {
                continue;
            }
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = small_config(11);
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    run_experiment(&cfg, &a, false).map_err(|e| e.to_string())?;
    run_experiment(&cfg, &b, false).map_err(|e| e.to_string())?;
    let (ta, tb) = (tree_bytes(&a, &[]), tree_bytes(&b, &[]));
    ensure(ta.len() == tb.len(), || "runs wrote different file sets".into())?;
    for ((na, ba), (nb, bb)) in ta.iter().zip(&tb) {
        ensure(na == nb && ba == bb, || format!("{na} differs between identical runs"))?;
    }
    let files = ta.len();

    // Interrupted runs resumed from their last epoch checkpoint.
    let ds = Dataset::load(&a.join("data"), &cfg, &[Split::Train]).map_err(|e| e.to_string())?;
    let train = ds.split(Split::Train);
    let full_pre = pretrain(&train, &cfg, &RunOptions::default()).map_err(|e| e.to_string())?;
    let part = root.path().join("pre-part");
    pretrain(
        &train,
        &cfg,
        &RunOptions {
            out_dir: Some(&part),
            stop_after: Some(1),
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let resumed_pre = pretrain(
        &train,
        &cfg,
        &RunOptions {
            resume: Some(&part.join("epoch-001")),
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(full_pre.params == resumed_pre.params, || {
        "resumed pretraining parameters differ".into()
    })?;
    ensure(full_pre.optimizer == resumed_pre.optimizer, || {
        "resumed optimizer state differs".into()
    })?;
    ensure(full_pre.manifest.history == resumed_pre.manifest.history, || {
        "resumed loss trace differs".into()
    })?;

    let regime = Regime::ExpertAnno;
    let full_ft = finetune(&train, &full_pre, &cfg, regime, &RunOptions::default()).map_err(|e| e.to_string())?;
    let part = root.path().join("ft-part");
    // Interrupted after the first unfrozen epoch.
    finetune(
        &train,
        &full_pre,
        &cfg,
        regime,
        &RunOptions {
            out_dir: Some(&part),
            stop_after: Some(2),
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let resumed_ft = finetune(
        &train,
        &full_pre,
        &cfg,
        regime,
        &RunOptions {
            resume: Some(&part.join("epoch-002")),
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(full_ft.params == resumed_ft.params, || {
        "resumed fine-tuning parameters differ".into()
    })?;
    ensure(full_ft.manifest.history == resumed_ft.manifest.history, || {
        "resumed fine-tuning trace differs".into()
    })?;
    let steps = full_ft.manifest.history.step_losses.len();
    Ok(format!(
        "two seeded runs wrote {files} bit-identical files; pretraining and fine-tuning resumed mid-run match the uninterrupted runs ({steps} fine-tuning steps)"
    ))
}

// ----------------------------------------------------------------- driver

/// `LUNGRISK_ACCEPTANCE_DIR` keeps the end-to-end run; completed stages are
/// reused on the next invocation. Otherwise a temporary directory is used.
fn e2e_root() -> (std::path::PathBuf, Option<tempfile::TempDir>) {
    match std::env::var_os("LUNGRISK_ACCEPTANCE_DIR") {
        Some(d) => (d.into(), None),
        None => {
            let t = tempfile::tempdir().expect("temporary directory");
            (t.path().to_path_buf(), Some(t))
        }
    }
}

fn guarded(f: &dyn Fn() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    }
}

fn main() {
    // `cargo test -- --list` and filtered runs from the workspace should not
    // start the suite; it has no sub-tests to filter.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if let Some(filter) = args.iter().find(|a| !a.starts_with('-'))
        && !"acceptance".contains(filter.as_str())
    {
        return;
    }

    // `LUNGRISK_ACCEPTANCE_ONLY=<substring>` runs the matching criteria only.
    let only = std::env::var("LUNGRISK_ACCEPTANCE_ONLY").ok();
    let wanted = |name: &str| only.as_deref().is_none_or(|o| name.contains(o));
    let mut failed = 0;
    let mut report = |name: &str, run: &dyn Fn() -> Outcome| {
        if !wanted(name) {
            return;
        }
        let outcome = guarded(run);
        match &outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    };
    report("gradient suite", &criterion_gradients);
    report("label construction table", &criterion_labels);
    report("metric oracle equivalence", &criterion_metrics);
    report("attention guidance closed forms", &criterion_closed_forms);
    report("masked autoencoder invariants", &criterion_mae);
    report("rotary relative-position property", &criterion_rope);
    report("determinism and checkpoint resume", &criterion_determinism);
    let late = ["isotonicity", "end-to-end learnability", "attention guidance effect"];
    if late.iter().any(|n| wanted(n)) {
        let (root, _keep) = e2e_root();
        let e2e =
            catch_unwind(AssertUnwindSafe(|| run_e2e(&root))).unwrap_or_else(|_| Err("end-to-end run panicked".into()));
        report(late[0], &|| criterion_isotonicity(&e2e));
        report(late[1], &|| criterion_learnability(&e2e));
        report(late[2], &|| criterion_guidance(&e2e));
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
