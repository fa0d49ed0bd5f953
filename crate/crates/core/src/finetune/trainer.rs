use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{multitask_loss_with_grads, LossBreakdown, LossWeights, Targets};
use super::optim::{AdamW, AdamWConfig};
use super::plan::{apply_stage, StagePlan};
use crate::channel::LinkParams;
use crate::codebook::BeamCodebook;
use crate::error::{Error, Result};
use crate::evalmetrics::{argmax, blockage_accuracy, top_k_accuracy, EvalReport, RateTable};
use crate::model::{patchify, save_checkpoint, BatchOutputs, Entry, Group, Parameters, VisionModel};
use crate::rng::{derive_rng, streams};
use crate::scenegen::{DatasetManifest, Split};

/// Images and targets held in memory. Positions are in meters.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub image_size: usize,
    /// `len x image_size x image_size x 3`, row-major RGB.
    pub pixels: Vec<u8>,
    pub beam_labels: Vec<usize>,
    pub positions: Vec<[f64; 3]>,
    pub blocked: Vec<bool>,
    /// Per-beam achievable rates, needed for rate metrics.
    pub rates: Option<RateTable>,
}

impl TaskData {
    pub fn len(&self) -> usize {
        self.beam_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beam_labels.is_empty()
    }

    fn image_bytes(&self) -> usize {
        self.image_size * self.image_size * 3
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_bytes();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::invalid("dataset split is empty"));
        }
        if self.pixels.len() != n * self.image_bytes() || self.positions.len() != n || self.blocked.len() != n {
            return Err(Error::invalid("dataset arrays are misaligned"));
        }
        if self.rates.as_ref().is_some_and(|r| r.len() != n) {
            return Err(Error::invalid("rate table does not cover the dataset"));
        }
        Ok(())
    }

    /// Loads the records of `split` (all records when `None`), reading
    /// images relative to `root`.
    pub fn from_manifest(manifest: &DatasetManifest, root: &Path, split: Option<Split>) -> Result<Self> {
        let size = manifest.scene_config.image_size;
        let mut data = TaskData {
            image_size: size,
            pixels: Vec::new(),
            beam_labels: Vec::new(),
            positions: Vec::new(),
            blocked: Vec::new(),
            rates: None,
        };
        for i in manifest.indices(split)? {
            let r = &manifest.records[i];
            let path = root.join(&r.image_ref);
            let img = image::open(&path)
                .map_err(|e| Error::Load {
                    path: path.clone(),
                    message: e.to_string(),
                })?
                .to_rgb8();
            if img.width() as usize != size || img.height() as usize != size {
                return Err(Error::Load {
                    path,
                    message: format!("expected {size}x{size} image, got {}x{}", img.width(), img.height()),
                });
            }
            data.pixels.extend_from_slice(img.as_raw());
            data.beam_labels.push(r.beam_label);
            data.positions.push(r.position);
            data.blocked.push(r.blocked);
        }
        Ok(data)
    }

    /// Attaches a rate table computed from the stored positions.
    pub fn with_rates(mut self, codebook: &BeamCodebook, params: &LinkParams) -> Result<Self> {
        self.rates = Some(RateTable::build(&self.positions, &self.blocked, codebook, params)?);
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub seed: u64,
    /// Meters per unit of the normalized position output.
    pub position_scale: f64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    /// Stage-end checkpoints are written here when set.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

fn default_eval_batch() -> usize {
    64
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            seed: 0,
            position_scale: 50.0,
            optimizer: AdamWConfig::default(),
            eval_batch_size: default_eval_batch(),
            checkpoint_dir: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::invalid("batch sizes must be >= 1"));
        }
        if !(self.position_scale.is_finite() && self.position_scale > 0.0) {
            return Err(Error::invalid("position scale must be positive"));
        }
        Ok(())
    }
}

/// One line of the metrics log: training losses averaged over the epoch and
/// validation metrics at its end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    pub stage_index: usize,
    /// 1-based within the stage.
    pub epoch: usize,
    pub split: String,
    pub loss_total: f64,
    pub loss_beam: f64,
    pub loss_pos: f64,
    pub loss_blk: f64,
    pub top1: f64,
    pub top5: f64,
    pub pos_err_m: f64,
    pub rate_ratio: Option<f64>,
    pub blockage_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub name: String,
    pub checkpoint: Option<PathBuf>,
    pub last: EpochMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub log: Vec<EpochMetrics>,
    pub stages: Vec<StageResult>,
}

impl FinetuneOutcome {
    pub fn final_checkpoint(&self) -> Option<&Path> {
        self.stages.last().and_then(|s| s.checkpoint.as_deref())
    }
}

/// Model input for every sample, either raw images or the cached output of
/// the frozen prefix.
enum Inputs<'a> {
    Images(&'a TaskData, usize),
    Cached(Vec<f64>, usize),
}

impl Inputs<'_> {
    fn gather(&self, idx: &[usize], out: &mut Vec<f64>) {
        out.clear();
        match self {
            Inputs::Images(data, patch) => {
                for &i in idx {
                    patchify(data.image(i), data.image_size, *patch, out);
                }
            }
            Inputs::Cached(rows, width) => {
                for &i in idx {
                    out.extend_from_slice(&rows[i * width..(i + 1) * width]);
                }
            }
        }
    }
}

fn prepare<'a>(model: &VisionModel, data: &'a TaskData, entry: Entry, chunk: usize) -> Inputs<'a> {
    let patch = model.backbone.patch_size;
    if entry == Entry::Patches {
        return Inputs::Images(data, patch);
    }
    let width = model.entry_width(entry);
    let mut rows = Vec::with_capacity(data.len() * width);
    let mut buf = Vec::new();
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(chunk) {
        Inputs::Images(data, patch).gather(idx, &mut buf);
        rows.extend(model.prefix(&buf, idx.len(), entry));
    }
    Inputs::Cached(rows, width)
}

fn forward_all(model: &VisionModel, inputs: &Inputs<'_>, n: usize, entry: Entry, chunk: usize) -> BatchOutputs {
    let all: Vec<usize> = (0..n).collect();
    let mut buf = Vec::new();
    let parts = all
        .chunks(chunk)
        .map(|idx| {
            inputs.gather(idx, &mut buf);
            model.forward_train(&buf, idx.len(), entry).0
        })
        .collect();
    BatchOutputs::concat(parts).expect("nonempty dataset")
}

/// Inference over a whole dataset.
pub fn predict(model: &VisionModel, data: &TaskData, batch_size: usize) -> Result<BatchOutputs> {
    data.validate()?;
    check_compat(model, data)?;
    let inputs = Inputs::Images(data, model.backbone.patch_size);
    Ok(forward_all(
        model,
        &inputs,
        data.len(),
        Entry::Patches,
        batch_size.max(1),
    ))
}

/// Loss and its gradient with respect to every parameter, for a batch of
/// pre-patchified images. Gradients of frozen groups are computed too.
pub fn loss_and_gradients(
    model: &VisionModel,
    patches: &[f64],
    batch: usize,
    targets: &Targets<'_>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Parameters)> {
    let b = &model.backbone;
    if batch == 0 || patches.len() != batch * b.num_patches() * b.patch_dim() {
        return Err(Error::invalid(format!(
            "{} patch values do not form {batch} images of {}x{}",
            patches.len(),
            b.num_patches(),
            b.patch_dim()
        )));
    }
    let (out, tape) = model.forward_train(patches, batch, Entry::Patches);
    let (loss, dout) = multitask_loss_with_grads(&out, targets, weights)?;
    let mut grads = model.params.zeros_like();
    model.backward(&tape, &dout, &mut grads);
    Ok((loss, grads))
}

fn check_compat(model: &VisionModel, data: &TaskData) -> Result<()> {
    if data.image_size != model.backbone.image_size {
        return Err(Error::invalid(format!(
            "dataset images are {} px but the model expects {} px",
            data.image_size, model.backbone.image_size
        )));
    }
    let classes = model.heads.beam_classes;
    if let Some(bad) = data.beam_labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Validation(format!(
            "beam label {bad} outside the model's {classes} classes"
        )));
    }
    Ok(())
}

/// Evaluation metrics of `outputs` against `data`.
pub fn evaluate_outputs(outputs: &BatchOutputs, data: &TaskData, position_scale: f64) -> Result<EvalReport> {
    let m = metrics(outputs, data, position_scale)?;
    let rates = data
        .rates
        .as_ref()
        .ok_or_else(|| Error::invalid("dataset has no rate table"))?;
    let preds: Vec<usize> = (0..outputs.batch).map(|i| argmax(outputs.beam_row(i))).collect();
    let s = rates.summary(&preds)?;
    Ok(EvalReport {
        top1: m.top1,
        top5: m.top5,
        mean_rate: s.mean_rate,
        oracle_rate: s.oracle_rate,
        rate_ratio: s.rate_ratio,
        mean_pos_err: m.pos_err_m,
        blockage_accuracy: m.blockage_accuracy,
    })
}

/// Runs the model over `data` and evaluates it.
pub fn evaluate(model: &VisionModel, data: &TaskData, position_scale: f64, batch_size: usize) -> Result<EvalReport> {
    let out = predict(model, data, batch_size)?;
    evaluate_outputs(&out, data, position_scale)
}

struct ValMetrics {
    top1: f64,
    top5: f64,
    pos_err_m: f64,
    rate_ratio: Option<f64>,
    blockage_accuracy: Option<f64>,
}

fn metrics(out: &BatchOutputs, data: &TaskData, scale: f64) -> Result<ValMetrics> {
    let classes = out.beam_classes;
    let top1 = top_k_accuracy(&out.beam_logits, classes, &data.beam_labels, 1)?;
    let top5 = top_k_accuracy(&out.beam_logits, classes, &data.beam_labels, 5.min(classes))?;
    let pos_err_m = (0..out.batch)
        .map(|i| {
            let p = out.sample(i).position_pred;
            let t = data.positions[i];
            (0..3).map(|k| (p[k] * scale - t[k]).powi(2)).sum::<f64>().sqrt()
        })
        .sum::<f64>()
        / out.batch as f64;
    let rate_ratio = match &data.rates {
        Some(r) => {
            let preds: Vec<usize> = (0..out.batch).map(|i| argmax(out.beam_row(i))).collect();
            Some(r.summary(&preds)?.rate_ratio)
        }
        None => None,
    };
    let blockage_accuracy = match &out.blockage {
        Some(b) => Some(blockage_accuracy(b, &data.blocked)?),
        None => None,
    };
    Ok(ValMetrics {
        top1,
        top5,
        pos_err_m,
        rate_ratio,
        blockage_accuracy,
    })
}

/// Progressive fine-tuning without a per-epoch hook.
pub fn run_progressive_finetune(
    model: &mut VisionModel,
    plan: &StagePlan,
    train: &TaskData,
    val: &TaskData,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    run_progressive_finetune_with(model, plan, train, val, cfg, |_, _| Ok(()))
}

/// Runs every stage of `plan` in order. `on_epoch` sees each log record
/// together with the model right after that epoch.
pub fn run_progressive_finetune_with<F>(
    model: &mut VisionModel,
    plan: &StagePlan,
    train: &TaskData,
    val: &TaskData,
    cfg: &FinetuneConfig,
    mut on_epoch: F,
) -> Result<FinetuneOutcome>
where
    F: FnMut(&EpochMetrics, &VisionModel) -> Result<()>,
{
    cfg.validate()?;
    plan.validate(model.backbone.depth)?;
    for d in [train, val] {
        d.validate()?;
        check_compat(model, d)?;
    }
    let scale = cfg.position_scale;
    let normalize = |d: &TaskData| -> Vec<[f64; 3]> {
        d.positions
            .iter()
            .map(|p| [p[0] / scale, p[1] / scale, p[2] / scale])
            .collect()
    };
    let train_targets = normalize(train);

    let mut outcome = FinetuneOutcome {
        log: Vec::new(),
        stages: Vec::new(),
    };
    for (si, stage) in plan.stages.iter().enumerate() {
        apply_stage(model, stage)?;
        let w = stage.weights;
        let has_blk = model.heads.blockage;
        // heads of tasks with zero weight receive no gradient and stay untouched
        let active = |g: Group| match g {
            Group::HeadPos => w.w_pos > 0.0,
            Group::HeadBlk => w.w_blk > 0.0,
            Group::HeadBeam => w.w_beam > 0.0,
            _ => true,
        };
        let weights = if has_blk { w } else { LossWeights { w_blk: 0.0, ..w } };
        let mut opt = AdamW::new(model, stage.learning_rate, cfg.optimizer, |g| {
            model.is_trainable(g) && active(g)
        });

        let entry = model.entry_point();
        let train_in = prepare(model, train, entry, cfg.eval_batch_size);
        let val_in = prepare(model, val, entry, cfg.eval_batch_size);
        let mut buf = Vec::new();
        let mut last = None;
        for epoch in 1..=stage.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut derive_rng(cfg.seed, &[streams::SHUFFLE, si as u64, epoch as u64]));
            let mut sums = LossBreakdown::default();
            for idx in order.chunks(cfg.batch_size) {
                train_in.gather(idx, &mut buf);
                let (out, tape) = model.forward_train(&buf, idx.len(), entry);
                let labels: Vec<usize> = idx.iter().map(|&i| train.beam_labels[i]).collect();
                let positions: Vec<[f64; 3]> = idx.iter().map(|&i| train_targets[i]).collect();
                let blocked: Vec<bool> = idx.iter().map(|&i| train.blocked[i]).collect();
                let targets = Targets {
                    beam_labels: &labels,
                    positions: &positions,
                    blocked: &blocked,
                };
                let (loss, dout) = multitask_loss_with_grads(&out, &targets, &weights)?;
                if !(loss.total.is_finite() && out.is_finite()) {
                    return Err(Error::Diverged {
                        stage: stage.name.clone(),
                        epoch,
                    });
                }
                let n = idx.len() as f64;
                sums.total += loss.total * n;
                sums.beam += loss.beam * n;
                sums.pos += loss.pos * n;
                sums.blk += loss.blk * n;
                let mut grads = model.params.zeros_like();
                model.backward(&tape, &dout, &mut grads);
                opt.step(&mut model.params, &grads);
            }
            let n = train.len() as f64;
            let val_out = forward_all(model, &val_in, val.len(), entry, cfg.eval_batch_size);
            if !val_out.is_finite() {
                return Err(Error::Diverged {
                    stage: stage.name.clone(),
                    epoch,
                });
            }
            let vm = metrics(&val_out, val, scale)?;
            let rec = EpochMetrics {
                stage: stage.name.clone(),
                stage_index: si,
                epoch,
                split: "val".into(),
                loss_total: sums.total / n,
                loss_beam: sums.beam / n,
                loss_pos: sums.pos / n,
                loss_blk: sums.blk / n,
                top1: vm.top1,
                top5: vm.top5,
                pos_err_m: vm.pos_err_m,
                rate_ratio: vm.rate_ratio,
                blockage_accuracy: vm.blockage_accuracy,
            };
            on_epoch(&rec, model)?;
            outcome.log.push(rec.clone());
            last = Some(rec);
        }
        let last = last.expect("stage has >= 1 epoch");
        let checkpoint = match &cfg.checkpoint_dir {
            Some(dir) => {
                let path = dir.join(format!("stage{}_{}.ckpt", si + 1, stage.name));
                let meta = serde_json::json!({
                    "stage": stage.name,
                    "stage_index": si,
                    "val": last,
                });
                save_checkpoint(&path, model, meta)?;
                Some(path)
            }
            None => None,
        };
        outcome.stages.push(StageResult {
            name: stage.name.clone(),
            checkpoint,
            last,
        });
    }
    Ok(outcome)
}
