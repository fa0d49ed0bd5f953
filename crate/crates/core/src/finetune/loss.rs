use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BatchOutputs, OutputGrads};

/// Combination weights of the three task losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_beam: f64,
    pub w_pos: f64,
    pub w_blk: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_beam: 1.0,
            w_pos: 0.1,
            w_blk: 0.1,
        }
    }
}

impl LossWeights {
    pub const BEAM_ONLY: LossWeights = LossWeights {
        w_beam: 1.0,
        w_pos: 0.0,
        w_blk: 0.0,
    };

    pub const POSITION_ONLY: LossWeights = LossWeights {
        w_beam: 0.0,
        w_pos: 1.0,
        w_blk: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.w_beam, self.w_pos, self.w_blk];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || all.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid(format!(
                "loss weights must be nonnegative with a positive sum, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Batch targets. Positions are in the model's (normalized) output frame.
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a> {
    pub beam_labels: &'a [usize],
    pub positions: &'a [[f64; 3]],
    pub blocked: &'a [bool],
}

/// Weighted total plus the unweighted per-task terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub beam: f64,
    pub pos: f64,
    pub blk: f64,
}

/// `w_beam * CE + w_pos * MSE + w_blk * BCE`, each with mean reduction.
pub fn multitask_loss(outputs: &BatchOutputs, targets: &Targets<'_>, weights: &LossWeights) -> Result<LossBreakdown> {
    multitask_loss_with_grads(outputs, targets, weights).map(|(l, _)| l)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss value plus its gradient with respect to every head output whose
/// weight is nonzero.
pub(crate) fn multitask_loss_with_grads(
    outputs: &BatchOutputs,
    targets: &Targets<'_>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, OutputGrads)> {
    weights.validate()?;
    let n = outputs.batch;
    if n == 0 || targets.beam_labels.len() != n || targets.positions.len() != n || targets.blocked.len() != n {
        return Err(Error::invalid(format!(
            "batch of {n} outputs but targets of sizes ({}, {}, {})",
            targets.beam_labels.len(),
            targets.positions.len(),
            targets.blocked.len()
        )));
    }
    if weights.w_blk > 0.0 && outputs.blockage.is_none() {
        return Err(Error::invalid(
            "blockage loss weighted but the model has no blockage head",
        ));
    }
    let classes = outputs.beam_classes;
    if let Some(&bad) = targets.beam_labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("beam label {bad} outside [0, {classes})")));
    }
    let nf = n as f64;
    let mut grads = OutputGrads::default();

    let mut ce = 0.0;
    let mut dbeam = (weights.w_beam > 0.0).then(|| vec![0.0; n * classes]);
    for (i, &label) in targets.beam_labels.iter().enumerate() {
        let row = outputs.beam_row(i);
        let lse = log_sum_exp(row);
        ce += lse - row[label];
        if let Some(g) = dbeam.as_mut() {
            let g = &mut g[i * classes..(i + 1) * classes];
            for (gj, z) in g.iter_mut().zip(row) {
                *gj = (z - lse).exp() * weights.w_beam / nf;
            }
            g[label] -= weights.w_beam / nf;
        }
    }
    ce /= nf;
    grads.beam = dbeam;

    let mut mse = 0.0;
    let mut dpos = (weights.w_pos > 0.0).then(|| vec![0.0; n * 3]);
    for (i, t) in targets.positions.iter().enumerate() {
        for k in 0..3 {
            let diff = outputs.position[3 * i + k] - t[k];
            mse += diff * diff;
            if let Some(g) = dpos.as_mut() {
                g[3 * i + k] = 2.0 * diff * weights.w_pos / (3.0 * nf);
            }
        }
    }
    mse /= 3.0 * nf;
    grads.pos = dpos;

    let mut bce = 0.0;
    if let Some(logits) = &outputs.blockage {
        let mut dblk = (weights.w_blk > 0.0).then(|| vec![0.0; n]);
        for (i, (&z, &b)) in logits.iter().zip(targets.blocked).enumerate() {
            let y = if b { 1.0 } else { 0.0 };
            bce += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
            if let Some(g) = dblk.as_mut() {
                g[i] = (sigmoid(z) - y) * weights.w_blk / nf;
            }
        }
        bce /= nf;
        grads.blk = dblk;
    }

    let total = weights.w_beam * ce + weights.w_pos * mse + weights.w_blk * bce;
    Ok((
        LossBreakdown {
            total,
            beam: ce,
            pos: mse,
            blk: bce,
        },
        grads,
    ))
}
