//! Classification, calibration and detection metrics.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dirichlet::{CategoricalDist, EPS_FLOOR};
use crate::error::{contract, Result};

fn check_aligned(preds: &[CategoricalDist], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return contract("metric over an empty prediction set");
    }
    if preds.len() != labels.len() {
        return contract(format!("{} predictions for {} labels", preds.len(), labels.len()));
    }
    Ok(())
}

/// Fraction of argmax predictions equal to the label.
pub fn accuracy(preds: &[CategoricalDist], labels: &[usize]) -> Result<f64> {
    check_aligned(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, &y)| p.argmax() == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean `−ln p[label]`, probabilities floored at `EPS_FLOOR`.
pub fn nll(preds: &[CategoricalDist], labels: &[usize]) -> Result<f64> {
    check_aligned(preds, labels)?;
    let mut total = 0.0;
    for (p, &y) in preds.iter().zip(labels) {
        if y >= p.k() {
            return contract(format!("label {y} out of range for K={}", p.k()));
        }
        total -= p.probs()[y].max(EPS_FLOOR).ln();
    }
    Ok(total / preds.len() as f64)
}

pub const DEFAULT_ECE_BINS: usize = 15;

/// Expected calibration error in percent, equal-width confidence bins over
/// `(0, 1]`.
pub fn ece(preds: &[CategoricalDist], labels: &[usize], n_bins: usize) -> Result<f64> {
    check_aligned(preds, labels)?;
    if n_bins == 0 {
        return contract("ece needs at least one bin");
    }
    let mut count = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    let mut hits = vec![0.0; n_bins];
    for (p, &y) in preds.iter().zip(labels) {
        let c = p.confidence();
        let b = ((c * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
        count[b] += 1;
        conf[b] += c;
        if p.argmax() == y {
            hits[b] += 1.0;
        }
    }
    let n = preds.len() as f64;
    let gap: f64 = (0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (hits[b] - conf[b]).abs() / n)
        .sum();
    Ok(100.0 * gap)
}

/// A detection score; higher means more likely OOD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub is_positive: bool,
}

fn check_two_class(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return contract(format!("non-finite detection score {}", s.score));
    }
    let pos = samples.iter().filter(|s| s.is_positive).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return contract("detection metrics need at least one positive and one negative");
    }
    Ok((pos, neg))
}

fn sorted_desc(samples: &[ScoredSample]) -> Vec<ScoredSample> {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| b.score.total_cmp(&a.score));
    s
}

/// Area under the ROC curve from the rank-sum statistic; tied scores share
/// their average rank, so ties count one half.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, neg) = check_two_class(samples)?;
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < s.len() {
        let mut j = i;
        while j < s.len() && s[j].score == s[i].score {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += mean_rank * s[i..j].iter().filter(|x| x.is_positive).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Area under the precision-recall curve (positives = OOD). Descending
/// sweep over distinct scores; each recall increment is weighted by the
/// precision reached at that threshold.
pub fn aupr(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, _) = check_two_class(samples)?;
    let s = sorted_desc(samples);
    let (mut tp, mut fp, mut area, mut last_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < s.len() {
        let mut j = i;
        while j < s.len() && s[j].score == s[i].score {
            if s[j].is_positive {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - last_recall) * precision;
        last_recall = recall;
        i = j;
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Confidence,
    Total,
    Data,
    Knowledge,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 4] = [ScoreKind::Confidence, ScoreKind::Total, ScoreKind::Data, ScoreKind::Knowledge];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Confidence => "confidence",
            ScoreKind::Total => "total",
            ScoreKind::Data => "data",
            ScoreKind::Knowledge => "knowledge",
        }
    }
}

/// Per-input prediction and uncertainties. Data and knowledge are `None`
/// for models that cannot separate them (a single categorical model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub probs: CategoricalDist,
    pub confidence: f64,
    pub total: f64,
    pub data: Option<f64>,
    pub knowledge: Option<f64>,
}

impl ModelOutput {
    /// OOD score, oriented so that higher means more uncertain.
    pub fn score(&self, kind: ScoreKind) -> Option<f64> {
        match kind {
            ScoreKind::Confidence => Some(-self.confidence),
            ScoreKind::Total => Some(self.total),
            ScoreKind::Data => self.data,
            ScoreKind::Knowledge => self.knowledge,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub auroc: f64,
    pub aupr: f64,
}

pub fn scored_samples(id: &[ModelOutput], ood: &[ModelOutput], kind: ScoreKind) -> Result<Vec<ScoredSample>> {
    let tag = |outs: &[ModelOutput], is_positive: bool| -> Result<Vec<ScoredSample>> {
        outs.iter()
            .map(|o| match o.score(kind) {
                Some(score) => Ok(ScoredSample { score, is_positive }),
                None => contract(format!("{} uncertainty is not available for this model", kind.name())),
            })
            .collect()
    };
    let mut s = tag(id, false)?;
    s.extend(tag(ood, true)?);
    Ok(s)
}

/// AUROC and AUPR of one uncertainty score separating OOD from ID outputs.
pub fn ood_detect(id: &[ModelOutput], ood: &[ModelOutput], kind: ScoreKind) -> Result<Detection> {
    let s = scored_samples(id, ood, kind)?;
    Ok(Detection { auroc: auroc(&s)?, aupr: aupr(&s)? })
}

/// Detection results per score; `None` where the model lacks the score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub confidence: Option<Detection>,
    pub total: Option<Detection>,
    pub data: Option<Detection>,
    pub knowledge: Option<Detection>,
}

impl DetectionScores {
    pub fn get(&self, kind: ScoreKind) -> Option<Detection> {
        match kind {
            ScoreKind::Confidence => self.confidence,
            ScoreKind::Total => self.total,
            ScoreKind::Data => self.data,
            ScoreKind::Knowledge => self.knowledge,
        }
    }

    pub fn best_auroc(&self) -> Option<f64> {
        ScoreKind::ALL.iter().filter_map(|&k| self.get(k)).map(|d| d.auroc).reduce(f64::max)
    }
}

pub fn detection_scores(id: &[ModelOutput], ood: &[ModelOutput]) -> Result<DetectionScores> {
    let run = |kind| -> Result<Option<Detection>> {
        if id.iter().chain(ood).any(|o| o.score(kind).is_none()) {
            Ok(None)
        } else {
            ood_detect(id, ood, kind).map(Some)
        }
    };
    Ok(DetectionScores {
        confidence: run(ScoreKind::Confidence)?,
        total: run(ScoreKind::Total)?,
        data: run(ScoreKind::Data)?,
        knowledge: run(ScoreKind::Knowledge)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    /// One entry per OOD set, in configuration order.
    pub ood: Vec<(String, DetectionScores)>,
}

pub fn eval_report(id: &[ModelOutput], labels: &[usize], ood_sets: &[(String, Vec<ModelOutput>)], ece_bins: usize) -> Result<EvalReport> {
    let preds: Vec<CategoricalDist> = id.iter().map(|o| o.probs.clone()).collect();
    Ok(EvalReport {
        accuracy: accuracy(&preds, labels)?,
        nll: nll(&preds, labels)?,
        ece: ece(&preds, labels, ece_bins)?,
        ood: ood_sets
            .iter()
            .map(|(name, outs)| Ok((name.clone(), detection_scores(id, outs)?)))
            .collect::<Result<_>>()?,
    })
}

/// Per-sample scores as CSV rows `score,kind,is_ood`. Scores a model does
/// not provide are skipped.
pub fn write_scores_csv(path: &Path, id: &[ModelOutput], ood: &[ModelOutput]) -> Result<()> {
    let mut out = String::from("score,kind,is_ood\n");
    for kind in ScoreKind::ALL {
        for (outs, is_ood) in [(id, false), (ood, true)] {
            for o in outs {
                if let Some(s) = o.score(kind) {
                    out.push_str(&format!("{s:?},{},{is_ood}\n", kind.name()));
                }
            }
        }
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Histogram counts `kind,is_ood,bin_lo,bin_hi,count` over a shared range
/// per score kind.
pub fn write_histogram_csv(path: &Path, id: &[ModelOutput], ood: &[ModelOutput], n_bins: usize) -> Result<()> {
    if n_bins == 0 {
        return contract("histogram needs at least one bin");
    }
    let mut out = String::from("kind,is_ood,bin_lo,bin_hi,count\n");
    for kind in ScoreKind::ALL {
        let all: Vec<f64> = id.iter().chain(ood).filter_map(|o| o.score(kind)).collect();
        if all.is_empty() {
            continue;
        }
        let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / n_bins as f64 } else { 1.0 };
        for (outs, is_ood) in [(id, false), (ood, true)] {
            let mut counts = vec![0usize; n_bins];
            for s in outs.iter().filter_map(|o| o.score(kind)) {
                counts[(((s - lo) / width) as usize).min(n_bins - 1)] += 1;
            }
            for (b, c) in counts.iter().enumerate() {
                let a = lo + b as f64 * width;
                out.push_str(&format!("{},{is_ood},{a:?},{:?},{c}\n", kind.name(), a + width));
            }
        }
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}
