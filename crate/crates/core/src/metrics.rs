//! Imbalance-aware classification metrics: exact rank-based ROC-AUC,
//! precision-recall curves with step-summed average precision, 1:1
//! rebalancing, and confusion-matrix arithmetic from aggregate rates.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Label, LabelPanel, Split, SplitAssignment};
use crate::smoother::ScorePanel;

/// Scored binary observations. Labels are 1 = positive, 0 = negative.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredLabelSet {
    pairs: Vec<(f64, u8)>,
    positives: usize,
    negatives: usize,
}

impl ScoredLabelSet {
    pub fn new(pairs: Vec<(f64, u8)>) -> Result<Self> {
        let mut positives = 0usize;
        let mut negatives = 0usize;
        for (score, label) in &pairs {
            if !score.is_finite() {
                return Err(Error::Numeric(format!("non-finite score {score}")));
            }
            match label {
                1 => positives += 1,
                0 => negatives += 1,
                other => return Err(Error::Input(format!("label must be 0 or 1, got {other}"))),
            }
        }
        Ok(ScoredLabelSet { pairs, positives, negatives })
    }

    pub fn pairs(&self) -> &[(f64, u8)] {
        &self.pairs
    }

    pub fn positives(&self) -> usize {
        self.positives
    }

    pub fn negatives(&self) -> usize {
        self.negatives
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn prevalence(&self) -> f64 {
        self.positives as f64 / self.pairs.len() as f64
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Computed via midranks with integer arithmetic, so the
/// result equals the all-pairs count exactly.
pub fn roc_auc(set: &ScoredLabelSet) -> Result<f64> {
    let (p, n) = (set.positives as u128, set.negatives as u128);
    if p == 0 || n == 0 {
        return Err(Error::Class(format!(
            "ROC-AUC needs both classes, got {} positives / {} negatives",
            set.positives, set.negatives
        )));
    }
    let mut order: Vec<usize> = (0..set.pairs.len()).collect();
    order.sort_by(|&a, &b| set.pairs[a].0.total_cmp(&set.pairs[b].0));

    // Twice the midrank sum over positives stays integral: a tied group
    // covering 1-based ranks [a, b] contributes (a + b) per member.
    let mut twice_rank_sum_pos: u128 = 0;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && set.pairs[order[j + 1]].0 == set.pairs[order[i]].0 {
            j += 1;
        }
        let twice_midrank = (i as u128 + 1) + (j as u128 + 1);
        for &idx in &order[i..=j] {
            if set.pairs[idx].1 == 1 {
                twice_rank_sum_pos += twice_midrank;
            }
        }
        i = j + 1;
    }
    let numerator = twice_rank_sum_pos - p * (p + 1);
    Ok(numerator as f64 / (2 * p * n) as f64)
}

/// One point on the precision-recall sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Precision-recall curve swept over every distinct score, descending,
/// with step-interpolated average precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    pub points: Vec<PRPoint>,
    pub average_precision: f64,
}

pub fn pr_curve(set: &ScoredLabelSet) -> Result<PRCurve> {
    if set.positives == 0 {
        return Err(Error::Class("PR curve needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..set.pairs.len()).collect();
    order.sort_by(|&a, &b| set.pairs[b].0.total_cmp(&set.pairs[a].0));

    let total_pos = set.positives as f64;
    let mut points = Vec::new();
    let mut average_precision = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0usize;
    while i < order.len() {
        let threshold = set.pairs[order[i]].0;
        let mut j = i;
        while j + 1 < order.len() && set.pairs[order[j + 1]].0 == threshold {
            j += 1;
        }
        for &idx in &order[i..=j] {
            match set.pairs[idx].1 {
                1 => tp += 1,
                _ => fp += 1,
            }
        }
        let recall = tp as f64 / total_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        average_precision += (recall - prev_recall) * precision;
        points.push(PRPoint { threshold, recall, precision });
        prev_recall = recall;
        i = j + 1;
    }
    Ok(PRCurve { points, average_precision })
}

/// Replicate the minority class round-robin (start offset chosen by seed)
/// until the class counts match. Scores are untouched.
pub fn rebalance_upsample(set: &ScoredLabelSet, seed: u64) -> Result<ScoredLabelSet> {
    if set.positives == 0 {
        return Err(Error::Class("rebalancing needs at least one positive".into()));
    }
    if set.negatives == 0 {
        return Err(Error::Class("rebalancing needs at least one negative".into()));
    }
    let minority_label = if set.positives < set.negatives { 1 } else { 0 };
    let minority: Vec<(f64, u8)> =
        set.pairs.iter().copied().filter(|(_, l)| *l == minority_label).collect();
    let deficit = set.positives.abs_diff(set.negatives);
    let mut pairs = set.pairs.clone();
    let start = (seed % minority.len() as u64) as usize;
    for k in 0..deficit {
        pairs.push(minority[(start + k) % minority.len()]);
    }
    ScoredLabelSet::new(pairs)
}

/// Confusion counts reconstructed from aggregate rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConfusionSummary {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    /// Precision the same classifier would score on a 1:1 balanced sample.
    pub balanced_precision: f64,
}

pub fn confusion_from_rates(total: u64, positives: u64, tpr: f64, fpr: f64) -> Result<ConfusionSummary> {
    if positives > total {
        return Err(Error::Input(format!("positives {positives} exceed total {total}")));
    }
    for (name, rate) in [("tpr", tpr), ("fpr", fpr)] {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Input(format!("{name} must be in [0,1], got {rate}")));
        }
    }
    let negatives = total - positives;
    let tp = (tpr * positives as f64).round() as u64;
    let fp = (fpr * negatives as f64).round() as u64;
    if tp + fp == 0 {
        return Err(Error::UndefinedPrecision);
    }
    Ok(ConfusionSummary {
        tp,
        fp,
        fn_: positives - tp,
        tn: negatives - fp,
        precision: tp as f64 / (tp + fp) as f64,
        balanced_precision: tpr / (tpr + fpr),
    })
}

/// Metrics for one scoring stage on one evaluation sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: String,
    pub auc: f64,
    pub ap_unbalanced: f64,
    pub ap_balanced: f64,
    #[serde(skip)]
    pub pr_unbalanced: Option<PRCurve>,
    #[serde(skip)]
    pub pr_balanced: Option<PRCurve>,
}

/// Evaluation report over the test-split cells of a score panel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub city: String,
    pub n_test: usize,
    pub prevalence: f64,
    pub stages: Vec<StageMetrics>,
}

/// Score the panel against propagated labels on one split (normally Test).
/// Unknown-labeled cells are excluded; both stages are reported when the
/// panel carries stage-2 scores.
pub fn evaluate_run(
    panel: &ScorePanel,
    labels: &LabelPanel,
    split: &SplitAssignment,
    eval_split: Split,
    city: &str,
) -> Result<RunReport> {
    let mut stage1_pairs = Vec::new();
    let mut stage2_pairs = Vec::new();
    for (id, date, scores) in panel.entries() {
        if split.split_of(id) != Some(eval_split) {
            continue;
        }
        let label = match labels.label(id, date) {
            Some(Label::Destroyed) => 1u8,
            Some(Label::Intact) => 0u8,
            Some(Label::Unknown) | None => continue,
        };
        stage1_pairs.push((scores.stage1, label));
        if let Some(s2) = scores.stage2 {
            stage2_pairs.push((s2, label));
        }
    }
    if stage1_pairs.is_empty() {
        return Err(Error::Input("no labeled cells intersect the evaluation split".into()));
    }
    let n_test = stage1_pairs.len();
    let set1 = ScoredLabelSet::new(stage1_pairs)?;
    let prevalence = set1.prevalence();

    let mut stages = vec![stage_metrics("stage1", &set1)?];
    if !stage2_pairs.is_empty() {
        let set2 = ScoredLabelSet::new(stage2_pairs)?;
        stages.push(stage_metrics("stage2", &set2)?);
    }
    Ok(RunReport { city: city.to_string(), n_test, prevalence, stages })
}

fn stage_metrics(stage: &str, set: &ScoredLabelSet) -> Result<StageMetrics> {
    let auc = roc_auc(set)?;
    let pr_unbal = pr_curve(set)?;
    let balanced = rebalance_upsample(set, 0)?;
    let pr_bal = pr_curve(&balanced)?;
    Ok(StageMetrics {
        stage: stage.to_string(),
        auc,
        ap_unbalanced: pr_unbal.average_precision,
        ap_balanced: pr_bal.average_precision,
        pr_unbalanced: Some(pr_unbal),
        pr_balanced: Some(pr_bal),
    })
}

/// Flat per-stage JSON records: `{city, stage, auc, ap_unbalanced,
/// ap_balanced, n_test, prevalence}`.
#[derive(Serialize, Deserialize)]
struct ReportRecord {
    city: String,
    stage: String,
    auc: f64,
    ap_unbalanced: f64,
    ap_balanced: f64,
    n_test: usize,
    prevalence: f64,
}

pub fn write_report_json(path: &Path, report: &RunReport) -> Result<()> {
    let records: Vec<ReportRecord> = report
        .stages
        .iter()
        .map(|s| ReportRecord {
            city: report.city.clone(),
            stage: s.stage.clone(),
            auc: s.auc,
            ap_unbalanced: s.ap_unbalanced,
            ap_balanced: s.ap_balanced,
            n_test: report.n_test,
            prevalence: report.prevalence,
        })
        .collect();
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    serde_json::to_writer_pretty(&mut out, &records).map_err(|e| Error::format(path, e.to_string()))?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// PR-curve points for every stage and sample flavor.
/// Columns: `stage,sample,threshold,recall,precision`.
pub fn write_pr_csv(path: &Path, report: &RunReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(["stage", "sample", "threshold", "recall", "precision"])
        .map_err(|e| Error::format(path, e.to_string()))?;
    for s in &report.stages {
        for (sample, curve) in
            [("unbalanced", &s.pr_unbalanced), ("balanced", &s.pr_balanced)]
        {
            if let Some(curve) = curve {
                for pt in &curve.points {
                    w.write_record([
                        s.stage.as_str(),
                        sample,
                        &format!("{}", pt.threshold),
                        &format!("{}", pt.recall),
                        &format!("{}", pt.precision),
                    ])
                    .map_err(|e| Error::format(path, e.to_string()))?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
