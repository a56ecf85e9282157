//! Threshold-free detection metrics and curve emission.
//!
//! Scores follow the crate-wide convention (larger = more OOD) and OOD is the
//! positive class throughout. AUCROC uses the rank statistic with midrank tie
//! handling (ties count half), AUPRC uses step-wise interpolation, and FPR at
//! a target TPR picks the largest threshold whose TPR reaches the target, with
//! no interpolation.

use crate::{Error, Result};

/// Scores for one (in-distribution, OOD) pairing under one scorer.
#[derive(Clone, Debug)]
pub struct LabeledScores {
    pub in_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
    pub score_name: String,
}

impl LabeledScores {
    pub fn new(
        in_scores: Vec<f64>,
        ood_scores: Vec<f64>,
        score_name: impl Into<String>,
    ) -> Result<Self> {
        if in_scores.is_empty() || ood_scores.is_empty() {
            return Err(Error::Value("score lists must be non-empty".into()));
        }
        if !in_scores.iter().chain(ood_scores.iter()).all(|v| v.is_finite()) {
            return Err(Error::Value("scores must be finite".into()));
        }
        Ok(LabeledScores {
            in_scores,
            ood_scores,
            score_name: score_name.into(),
        })
    }
}

/// ROC curve as (threshold, TPR, FPR) triples, swept from +inf downward.
#[derive(Clone, Debug)]
pub struct RocCurve {
    pub points: Vec<(f64, f64, f64)>,
}

/// Shared-edge histograms of both classes.
#[derive(Clone, Debug)]
pub struct ScoreHistogram {
    /// (bin_left, bin_right, count_in, count_ood)
    pub bins: Vec<(f64, f64, u64, u64)>,
}

/// P(ood > in) + 0.5 P(ood == in), computed by midranks.
pub fn auroc(s: &LabeledScores) -> Result<f64> {
    let n = s.in_scores.len();
    let m = s.ood_scores.len();
    let mut all: Vec<(f64, bool)> = s
        .in_scores
        .iter()
        .map(|&v| (v, false))
        .chain(s.ood_scores.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finiteness checked on construction"));
    let mut rank_sum_ood = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_ood += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_ood - (m * (m + 1)) as f64 / 2.0;
    Ok(u / (n as f64 * m as f64))
}

/// Area under precision-recall with OOD positive; precision is held constant
/// across each recall increment (step interpolation). Tied scores enter as a
/// single threshold group.
pub fn auprc(s: &LabeledScores) -> Result<f64> {
    let m = s.ood_scores.len() as f64;
    let mut all: Vec<(f64, bool)> = s
        .in_scores
        .iter()
        .map(|&v| (v, false))
        .chain(s.ood_scores.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finiteness checked on construction"));
    let mut tp = 0.0f64;
    let mut fp = 0.0f64;
    let mut prev_recall = 0.0f64;
    let mut area = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        let recall = tp / m;
        let precision = tp / (tp + fp);
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// FPR at the largest threshold whose TPR is at least `tpr_target`
/// (classification rule: score >= threshold is OOD).
pub fn fpr_at_tpr(s: &LabeledScores, tpr_target: f64) -> Result<f64> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::Value(format!(
            "tpr target must be in (0, 1], got {tpr_target}"
        )));
    }
    let n = s.in_scores.len() as f64;
    let m = s.ood_scores.len() as f64;
    let mut all: Vec<(f64, bool)> = s
        .in_scores
        .iter()
        .map(|&v| (v, false))
        .chain(s.ood_scores.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finiteness checked on construction"));
    let mut tp = 0.0f64;
    let mut fp = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        if tp / m >= tpr_target {
            return Ok(fp / n);
        }
        i = j;
    }
    Ok(1.0) // tpr_target <= 1 is always reached at the minimum score
}

/// Bits per dimension: `nll_nats / (ln 2 * d)`.
pub fn bpd(nll_nats: f64, d: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::Value("bpd needs d >= 1".into()));
    }
    Ok(nll_nats / (std::f64::consts::LN_2 * d as f64))
}

/// ROC points plus shared-bin-edge histograms for both classes.
pub fn emit_curves(s: &LabeledScores, bins: usize) -> Result<(RocCurve, ScoreHistogram)> {
    if bins < 2 {
        return Err(Error::Value("need at least 2 histogram bins".into()));
    }
    let n = s.in_scores.len() as f64;
    let m = s.ood_scores.len() as f64;
    let mut all: Vec<(f64, bool)> = s
        .in_scores
        .iter()
        .map(|&v| (v, false))
        .chain(s.ood_scores.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finiteness checked on construction"));

    let mut points = vec![(f64::INFINITY, 0.0, 0.0)];
    let mut tp = 0.0f64;
    let mut fp = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        let mut j = i;
        while j < all.len() && all[j].0 == t {
            if all[j].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        points.push((t, tp / m, fp / n));
        i = j;
    }
    let roc = RocCurve { points };

    let lo = all.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
    let hi = all.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut hist = vec![(0.0, 0.0, 0u64, 0u64); bins];
    for (b, slot) in hist.iter_mut().enumerate() {
        slot.0 = lo + b as f64 * width;
        slot.1 = lo + (b + 1) as f64 * width;
    }
    let slot_of = |v: f64| -> usize {
        let b = ((v - lo) / width).floor() as isize;
        b.clamp(0, bins as isize - 1) as usize
    };
    for &v in &s.in_scores {
        hist[slot_of(v)].2 += 1;
    }
    for &v in &s.ood_scores {
        hist[slot_of(v)].3 += 1;
    }
    Ok((roc, ScoreHistogram { bins: hist }))
}

/// One line of the metrics table: a scorer evaluated on one pairing, or
/// `None` metrics when the scorer is absent for that pairing.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub ood_dataset: String,
    pub scorer: String,
    pub metrics: Option<(f64, f64, f64)>, // (auroc, auprc, fpr at target)
}

/// Write the metrics table: `ood_dataset,scorer,auroc,auprc,fpr80`, sorted
/// by (dataset, scorer); absent scorers keep their row with empty fields.
pub fn write_metrics_csv(path: &std::path::Path, rows: &[MetricsRow]) -> Result<()> {
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (a.ood_dataset.as_str(), a.scorer.as_str()).cmp(&(b.ood_dataset.as_str(), b.scorer.as_str()))
    });
    let mut out = String::from("ood_dataset,scorer,auroc,auprc,fpr80\n");
    for r in sorted {
        match r.metrics {
            Some((a, p, f)) => out.push_str(&format!(
                "{},{},{a:.6},{p:.6},{f:.6}\n",
                r.ood_dataset, r.scorer
            )),
            None => out.push_str(&format!("{},{},,,\n", r.ood_dataset, r.scorer)),
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write one pairing's ROC curve as `threshold,tpr,fpr`.
pub fn write_roc_csv(path: &std::path::Path, roc: &RocCurve) -> Result<()> {
    let mut out = String::from("threshold,tpr,fpr\n");
    for (t, tpr, fpr) in &roc.points {
        if t.is_finite() {
            out.push_str(&format!("{t:.9e},{tpr:.6},{fpr:.6}\n"));
        } else {
            out.push_str(&format!("inf,{tpr:.6},{fpr:.6}\n"));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write one pairing's class histograms as
/// `bin_left,bin_right,count_in,count_ood`.
pub fn write_histogram_csv(path: &std::path::Path, hist: &ScoreHistogram) -> Result<()> {
    let mut out = String::from("bin_left,bin_right,count_in,count_ood\n");
    for (l, r, ci, co) in &hist.bins {
        out.push_str(&format!("{l:.9e},{r:.9e},{ci},{co}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// O(n*m) reference: fraction of (ood, in) pairs the OOD score wins, ties
/// counting half. Test oracle for [`auroc`]; kept exact and independent of
/// the rank-based path.
pub fn auroc_pairwise_oracle(s: &LabeledScores) -> f64 {
    let mut acc = 0.0f64;
    for &o in &s.ood_scores {
        for &i in &s.in_scores {
            if o > i {
                acc += 1.0;
            } else if o == i {
                acc += 0.5;
            }
        }
    }
    acc / (s.in_scores.len() as f64 * s.ood_scores.len() as f64)
}
