//! Evaluation reports and their aggregation across runs.

use std::collections::BTreeMap;

use s2d_core::metrics::{Detection, DetectionScores, EvalReport, ScoreKind};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub name: String,
    pub accuracy: f64,
    pub nll: f64,
    /// Percent.
    pub ece: f64,
    pub ood: BTreeMap<String, DetectionScores>,
}

impl RunReport {
    pub fn new(name: String, r: EvalReport) -> Self {
        Self { name, accuracy: r.accuracy, nll: r.nll, ece: r.ece, ood: r.ood.into_iter().collect() }
    }
}

/// Mean and two (sample) standard deviations; the spread is 0 for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub two_std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, two_std: 2.0 * var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionStat {
    pub auroc: Stat,
    pub aupr: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateScores {
    pub confidence: Option<DetectionStat>,
    pub total: Option<DetectionStat>,
    pub data: Option<DetectionStat>,
    pub knowledge: Option<DetectionStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub runs: usize,
    pub accuracy: Stat,
    pub nll: Stat,
    pub ece: Stat,
    pub ood: BTreeMap<String, AggregateScores>,
}

fn detection_stat(runs: &[RunReport], set: &str, kind: ScoreKind) -> Option<DetectionStat> {
    // a score missing from any run is missing from the aggregate
    let ds: Vec<Detection> = runs.iter().map(|r| r.ood.get(set).and_then(|d| d.get(kind))).collect::<Option<_>>()?;
    let auroc: Vec<f64> = ds.iter().map(|d| d.auroc).collect();
    let aupr: Vec<f64> = ds.iter().map(|d| d.aupr).collect();
    Some(DetectionStat { auroc: Stat::of(&auroc), aupr: Stat::of(&aupr) })
}

pub fn aggregate(runs: &[RunReport]) -> Aggregate {
    let col = |f: fn(&RunReport) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
    let sets = runs.first().map(|r| r.ood.keys().cloned().collect::<Vec<_>>()).unwrap_or_default();
    let ood = sets
        .into_iter()
        .map(|s| {
            let scores = AggregateScores {
                confidence: detection_stat(runs, &s, ScoreKind::Confidence),
                total: detection_stat(runs, &s, ScoreKind::Total),
                data: detection_stat(runs, &s, ScoreKind::Data),
                knowledge: detection_stat(runs, &s, ScoreKind::Knowledge),
            };
            (s, scores)
        })
        .collect();
    Aggregate { runs: runs.len(), accuracy: col(|r| r.accuracy), nll: col(|r| r.nll), ece: col(|r| r.ece), ood }
}
