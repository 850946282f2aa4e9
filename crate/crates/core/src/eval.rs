//! AUROC, expected performance over failure scenarios, and run summaries.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{Autoencoder, ParamVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub normal: Vec<f64>,
    pub anomalous: Vec<f64>,
}

/// Probability that a random anomalous score exceeds a random normal score,
/// ties counted as one half. Computed from midranks (Mann-Whitney U).
pub fn auroc(scores: &ScoreSet) -> Result<f64> {
    let (n0, n1) = (scores.normal.len(), scores.anomalous.len());
    if n0 == 0 || n1 == 0 {
        return Err(Error::InvalidScores(
            "both normal and anomalous scores are required".into(),
        ));
    }
    if scores
        .normal
        .iter()
        .chain(&scores.anomalous)
        .any(|s| !s.is_finite())
    {
        return Err(Error::InvalidScores("scores must be finite".into()));
    }

    let mut all: Vec<(f64, bool)> = scores
        .normal
        .iter()
        .map(|&s| (s, false))
        .chain(scores.anomalous.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of 1-based midranks of the anomalous scores.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        let positives = all[i..j].iter().filter(|(_, anomalous)| *anomalous).count();
        rank_sum += midrank * positives as f64;
        i = j;
    }
    let u = rank_sum - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n0 as f64 * n1 as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub probability: f64,
    pub performance: f64,
}

impl ScenarioOutcome {
    pub fn new(probability: f64, performance: f64) -> Self {
        Self {
            probability,
            performance,
        }
    }
}

/// `sum_s p_s * J_s` over a scenario set whose probabilities sum to one.
pub fn expected_performance(scenarios: &[ScenarioOutcome]) -> Result<f64> {
    if scenarios
        .iter()
        .any(|s| !(0.0..=1.0).contains(&s.probability))
    {
        return Err(Error::InvalidScores(
            "scenario probabilities must lie in [0, 1]".into(),
        ));
    }
    let total: f64 = scenarios.iter().map(|s| s.probability).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::ProbabilitySum(total));
    }
    Ok(scenarios
        .iter()
        .map(|s| s.probability * s.performance)
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Sample mean and sample standard deviation (`n - 1` denominator, 0 for a
/// single value).
pub fn summarize(values: &[f64], label: impl Into<String>) -> Result<SummaryRow> {
    if values.is_empty() {
        return Err(Error::InvalidScores(
            "cannot summarize an empty list".into(),
        ));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(SummaryRow {
        label: label.into(),
        mean,
        std,
        runs: n,
    })
}

/// Eval-mode anomaly scores for every held-out sample.
pub fn score_model(
    model: &Autoencoder,
    params: &ParamVector,
    test_normal: &LabeledDataset,
    test_anomalous: &LabeledDataset,
) -> Result<ScoreSet> {
    if test_normal.is_empty() || test_anomalous.is_empty() {
        return Err(Error::InvalidScores("test sets must be non-empty".into()));
    }
    Ok(ScoreSet {
        normal: model.anomaly_scores(params, test_normal.samples())?,
        anomalous: model.anomaly_scores(params, test_anomalous.samples())?,
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Some(if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    })
}
