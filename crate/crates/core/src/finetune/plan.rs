use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::loss::LossWeights;
use crate::error::{Error, Result};
use crate::model::VisionModel;

/// One phase of training with a fixed trainable set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub unfreeze_last_n_blocks: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weights: LossWeights,
    /// Also trains the patch/positional embedding. Only meaningful when every
    /// block is unfrozen (full fine-tuning and from-scratch plans).
    #[serde(default)]
    pub train_embedding: bool,
}

impl Stage {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.unfreeze_last_n_blocks > depth {
            return Err(Error::invalid(format!(
                "stage '{}' unfreezes {} blocks but the backbone has {depth}",
                self.name, self.unfreeze_last_n_blocks
            )));
        }
        if self.epochs == 0 {
            return Err(Error::invalid(format!("stage '{}' needs >= 1 epoch", self.name)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "stage '{}' learning rate must be positive, got {}",
                self.name, self.learning_rate
            )));
        }
        if self.train_embedding && self.unfreeze_last_n_blocks != depth {
            return Err(Error::invalid(format!(
                "stage '{}' trains the embedding but leaves blocks frozen",
                self.name
            )));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
}

impl StagePlan {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("stage plan is empty"));
        }
        for s in &self.stages {
            s.validate(depth)?;
        }
        if self
            .stages
            .windows(2)
            .any(|w| w[1].unfreeze_last_n_blocks < w[0].unfreeze_last_n_blocks)
        {
            return Err(Error::invalid("unfrozen block count must not decrease across stages"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }

    pub fn with_weights(mut self, weights: LossWeights) -> Self {
        for s in &mut self.stages {
            s.weights = weights;
        }
        self
    }
}

/// Epochs and learning rates for the three default stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefaultPlanConfig {
    pub epochs: [usize; 3],
    pub learning_rates: [f64; 3],
    pub weights: LossWeights,
}

impl Default for DefaultPlanConfig {
    fn default() -> Self {
        Self {
            epochs: [10, 10, 10],
            learning_rates: [1e-3, 3e-4, 3e-4],
            weights: LossWeights::default(),
        }
    }
}

/// Heads only, then the last block, then the last two blocks.
pub fn make_default_stage_plan(depth: usize, cfg: &DefaultPlanConfig) -> Result<StagePlan> {
    if depth < 2 {
        return Err(Error::invalid(format!("default plan needs depth >= 2, got {depth}")));
    }
    if cfg.learning_rates[1] > cfg.learning_rates[0] || cfg.learning_rates[2] > cfg.learning_rates[0] {
        return Err(Error::invalid(
            "later-stage learning rates must not exceed the first stage's",
        ));
    }
    let names = ["heads", "last_block", "last_two_blocks"];
    let plan = StagePlan {
        stages: (0..3)
            .map(|i| Stage {
                name: names[i].to_string(),
                unfreeze_last_n_blocks: i,
                epochs: cfg.epochs[i],
                learning_rate: cfg.learning_rates[i],
                weights: cfg.weights,
                train_embedding: false,
            })
            .collect(),
    };
    plan.validate(depth)?;
    Ok(plan)
}

/// A single stage with every parameter trainable.
pub fn full_finetune_plan(depth: usize, epochs: usize, learning_rate: f64, weights: LossWeights) -> Result<StagePlan> {
    let plan = StagePlan {
        stages: vec![Stage {
            name: "full".to_string(),
            unfreeze_last_n_blocks: depth,
            epochs,
            learning_rate,
            weights,
            train_embedding: true,
        }],
    };
    plan.validate(depth)?;
    Ok(plan)
}

/// Sets the trainable mask for `stage`: heads, the last `n` blocks, the
/// final norm when `n >= 1`, and the embedding only when the stage asks.
pub fn apply_stage(model: &mut VisionModel, stage: &Stage) -> Result<BTreeMap<String, bool>> {
    let depth = model.backbone.depth;
    stage.validate(depth)?;
    model.set_all_trainable(false);
    let mut on: Vec<String> = ["head_beam", "head_pos"].iter().map(|s| s.to_string()).collect();
    if model.heads.blockage {
        on.push("head_blk".into());
    }
    let n = stage.unfreeze_last_n_blocks;
    on.extend((depth - n..depth).map(|i| format!("block_{i}")));
    if n >= 1 {
        on.push("norm".into());
    }
    if stage.train_embedding {
        on.push("embed".into());
    }
    model.set_block_trainable(&on, true)
}
