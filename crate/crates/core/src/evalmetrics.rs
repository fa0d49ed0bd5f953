//! Evaluation quantities: top-k beam accuracy, achievable-rate ratio
//! against the exhaustive-search oracle, and Euclidean positioning error.

use serde::{Deserialize, Serialize};

use crate::channel::{achievable_rate, codebook_gains, synthesize_los_channel, LinkParams};
use crate::codebook::BeamCodebook;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub mean_rate: f64,
    pub oracle_rate: f64,
    pub rate_ratio: f64,
    pub mean_pos_err: f64,
    pub blockage_accuracy: Option<f64>,
}

/// Whether `label` is among the `k` largest entries of `logits`, ranking
/// ties by lower index first.
pub fn in_top_k(logits: &[f64], label: usize, k: usize) -> bool {
    let target = logits[label];
    let rank = logits
        .iter()
        .enumerate()
        .filter(|&(j, &z)| z > target || (z == target && j < label))
        .count();
    rank < k
}

/// Fraction of samples whose label is among the `k` highest logits.
/// `logits` is `labels.len() x classes`, row-major.
pub fn top_k_accuracy(logits: &[f64], classes: usize, labels: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if classes == 0 || logits.len() != labels.len() * classes {
        return Err(Error::invalid(format!(
            "{} logits do not form {} rows of {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} outside [0, {classes})")));
    }
    let hits = logits
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &l)| in_top_k(row, l, k))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean Euclidean distance in metres.
pub fn mean_positioning_error(pred: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictions for {} positions",
            pred.len(),
            truth.len()
        )));
    }
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let d: [f64; 3] = std::array::from_fn(|i| p[i] - t[i]);
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Accuracy of `logit > 0` as a blockage decision.
pub fn blockage_accuracy(logits: &[f64], blocked: &[bool]) -> Result<f64> {
    if logits.len() != blocked.len() || logits.is_empty() {
        return Err(Error::invalid("blockage logits and flags misaligned"));
    }
    let hits = logits.iter().zip(blocked).filter(|(&z, &b)| (z > 0.0) == b).count();
    Ok(hits as f64 / logits.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub mean_rate: f64,
    pub oracle_rate: f64,
    pub rate_ratio: f64,
}

fn summarize(pred_total: f64, oracle_total: f64, n: usize) -> RateSummary {
    let mean_rate = pred_total / n as f64;
    let oracle_rate = oracle_total / n as f64;
    RateSummary {
        mean_rate,
        oracle_rate,
        rate_ratio: if oracle_rate > 0.0 {
            mean_rate / oracle_rate
        } else {
            1.0
        },
    }
}

/// Achievable rate of every beam for a fixed set of samples.
///
/// Channels are resynthesized once from positions and blockage flags; the
/// oracle column is the exhaustive-search beam of each channel.
#[derive(Debug, Clone)]
pub struct RateTable {
    classes: usize,
    rates: Vec<f64>,
    oracle: Vec<usize>,
}

impl RateTable {
    pub fn build(
        positions: &[[f64; 3]],
        blocked: &[bool],
        codebook: &BeamCodebook,
        params: &LinkParams,
    ) -> Result<Self> {
        if positions.len() != blocked.len() {
            return Err(Error::invalid("positions and blockage flags misaligned"));
        }
        let classes = codebook.len();
        let mut rates = Vec::with_capacity(positions.len() * classes);
        let mut oracle = Vec::with_capacity(positions.len());
        for (&pos, &blk) in positions.iter().zip(blocked) {
            let ch = synthesize_los_channel(pos, params, &codebook.geometry, blk)?;
            let gains = codebook_gains(&ch, codebook)?;
            oracle.push(crate::evalmetrics::argmax(&gains));
            rates.extend(gains.iter().map(|g| (1.0 + params.snr_linear * g).log2()));
        }
        Ok(Self { classes, rates, oracle })
    }

    pub fn len(&self) -> usize {
        self.oracle.len()
    }

    pub fn is_empty(&self) -> bool {
        self.oracle.is_empty()
    }

    pub fn rate(&self, sample: usize, beam: usize) -> f64 {
        self.rates[sample * self.classes + beam]
    }

    pub fn oracle_beam(&self, sample: usize) -> usize {
        self.oracle[sample]
    }

    pub fn summary(&self, predictions: &[usize]) -> Result<RateSummary> {
        if predictions.len() != self.len() || predictions.is_empty() {
            return Err(Error::invalid(format!(
                "{} predictions for {} samples",
                predictions.len(),
                self.len()
            )));
        }
        if let Some(&bad) = predictions.iter().find(|&&p| p >= self.classes) {
            return Err(Error::invalid(format!("predicted beam {bad} outside codebook")));
        }
        let mut pred_total = 0.0;
        let mut oracle_total = 0.0;
        for (i, &p) in predictions.iter().enumerate() {
            pred_total += self.rate(i, p);
            oracle_total += self.rate(i, self.oracle[i]);
        }
        Ok(summarize(pred_total, oracle_total, predictions.len()))
    }
}

/// Mean rate under predicted beams, mean rate under oracle beams, and their
/// ratio, for samples described by `(position, blocked)`.
pub fn rate_evaluation(
    samples: &[([f64; 3], bool)],
    predictions: &[usize],
    codebook: &BeamCodebook,
    params: &LinkParams,
) -> Result<RateSummary> {
    if samples.len() != predictions.len() || samples.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    let mut pred_total = 0.0;
    let mut oracle_total = 0.0;
    for (&(pos, blk), &p) in samples.iter().zip(predictions) {
        if p >= codebook.len() {
            return Err(Error::invalid(format!("predicted beam {p} outside codebook")));
        }
        let ch = synthesize_los_channel(pos, params, &codebook.geometry, blk)?;
        let best = crate::channel::oracle_beam(&ch, codebook)?;
        pred_total += achievable_rate(&ch, codebook.precoder(p), params.snr_linear)?;
        oracle_total += achievable_rate(&ch, codebook.precoder(best.flat), params.snr_linear)?;
    }
    Ok(summarize(pred_total, oracle_total, samples.len()))
}
