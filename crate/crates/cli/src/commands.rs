use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use beamvision::codebook::{build_type1_codebook, BeamCodebook};
use beamvision::finetune::{
    evaluate_outputs, full_finetune_plan, predict, run_progressive_finetune_with, EpochMetrics, LossWeights, TaskData,
};
use beamvision::model::{build_model, read_checkpoint, save_checkpoint, BackboneKind, BatchOutputs};
use beamvision::scenegen::{generate_dataset, manifest_root, split_dataset, DatasetManifest, Split};
use beamvision::Error;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode, PlanKind};
use crate::error::{io, CliError};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn codebook(cfg: &ExperimentConfig) -> Result<BeamCodebook, CliError> {
    let cb = &cfg.codebook;
    Ok(build_type1_codebook(&cb.geometry()?, cb.o1, cb.o2)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| io(path, e))
}

pub fn generate(config: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let g = &cfg.generate;
    let dir = &cfg.paths.data_dir;
    let manifest = generate_dataset(
        g.n_samples,
        &cfg.scene_config(),
        &codebook(&cfg)?,
        &cfg.link.params(),
        g.trajectories,
        dir,
    )?;
    let manifest = split_dataset(&manifest, g.train_fraction, g.split_seed, g.by_trajectory)?;
    manifest.save(&dir.join(MANIFEST_FILE))?;
    let (train, val) = manifest.split_counts().expect("split assigned");
    println!("records {}", manifest.len());
    println!("train {train}");
    println!("val {val}");
    Ok(())
}

fn load_split(
    cfg: &ExperimentConfig,
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
    rates: bool,
) -> Result<TaskData, CliError> {
    let split = manifest.split_counts().map(|_| split);
    let data = TaskData::from_manifest(manifest, root, split)?;
    if rates {
        Ok(data.with_rates(&codebook(cfg)?, &cfg.link.params())?)
    } else {
        Ok(data)
    }
}

fn print_epoch(m: &EpochMetrics) {
    let rr = m.rate_ratio.map_or("-".to_string(), |r| format!("{r:.4}"));
    println!(
        "{} epoch {} loss {:.4} top1 {:.4} top5 {:.4} pos_err {:.2} m rate_ratio {}",
        m.stage, m.epoch, m.loss_total, m.top1, m.top5, m.pos_err_m, rr
    );
}

pub fn pretrain(config: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let mpath = cfg.paths.data_dir.join(MANIFEST_FILE);
    let manifest = DatasetManifest::load(&mpath)?;
    let root = manifest_root(&mpath);
    let train = load_split(&cfg, &manifest, &root, Split::Train, false)?;
    let val = load_split(&cfg, &manifest, &root, Split::Val, false)?;

    let mut backbone = cfg.model.backbone();
    backbone.kind = BackboneKind::TinyTransformer;
    backbone.pretrained_ref = None;
    let mut model = build_model(&backbone, &cfg.model.heads(), cfg.pretrain.seed)?;
    let p = &cfg.pretrain;
    let plan = full_finetune_plan(backbone.depth, p.epochs, p.learning_rate, LossWeights::POSITION_ONLY)?;
    let mut fc = cfg.finetune_config(None);
    fc.seed = p.seed;
    let outcome = run_progressive_finetune_with(&mut model, &plan, &train, &val, &fc, |m, _| {
        print_epoch(m);
        Ok(())
    })?;
    let meta = serde_json::json!({ "pretrain": outcome.log.last() });
    save_checkpoint(&p.checkpoint, &model, meta)?;
    println!("checkpoint {}", p.checkpoint.display());
    Ok(())
}

/// Contents of `run.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunInfo {
    pub mode: Mode,
    pub plan: PlanKind,
    pub seed: u64,
    pub weights: LossWeights,
    pub manifest: PathBuf,
    pub pretrained: Option<PathBuf>,
    pub stages: Vec<beamvision::finetune::Stage>,
}

pub fn default_run_name(mode: Mode, plan: PlanKind, seed: u64) -> String {
    let mode = match mode {
        Mode::SingleTask => "single_task",
        Mode::MultiTask => "multi_task",
    };
    let plan = match plan {
        PlanKind::Default3 => "default3",
        PlanKind::FullFinetune => "full_finetune",
        PlanKind::FromScratch => "from_scratch",
        PlanKind::Explicit => "explicit",
    };
    format!("{mode}_{plan}_seed{seed}")
}

pub fn train(
    config: &Path,
    mode: Option<Mode>,
    plan: Option<PlanKind>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<PathBuf, CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(m) = mode {
        cfg.train.mode = m;
    }
    if let Some(p) = plan {
        cfg.plan.kind = p;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let mode = cfg.train.mode;
    let kind = cfg.plan.kind;
    let seed = cfg.train.seed;
    let weights = cfg.weights(mode);
    let stage_plan = cfg.stage_plan(kind, weights)?;

    let mut backbone = cfg.model.backbone();
    let pretrained = if kind == PlanKind::FromScratch {
        backbone.kind = BackboneKind::TinyTransformer;
        backbone.pretrained_ref = None;
        None
    } else {
        let path = cfg
            .model
            .pretrained_ref
            .clone()
            .unwrap_or_else(|| cfg.pretrain.checkpoint.clone());
        if !path.is_file() {
            return Err(CliError::MissingPretrained(path));
        }
        backbone.pretrained_ref = Some(path.to_string_lossy().into_owned());
        Some(path)
    };

    let run = out.unwrap_or_else(|| cfg.paths.run_dir.join(default_run_name(mode, kind, seed)));
    if run.exists() {
        return Err(CliError::RunExists(run));
    }
    let mpath = cfg.paths.data_dir.join(MANIFEST_FILE);
    let manifest = DatasetManifest::load(&mpath)?;
    let root = manifest_root(&mpath);
    let train = load_split(&cfg, &manifest, &root, Split::Train, false)?;
    let val = load_split(&cfg, &manifest, &root, Split::Val, true)?;
    let mut model = build_model(&backbone, &cfg.model.heads(), seed)?;

    let ckpt_dir = run.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| io(&ckpt_dir, e))?;
    fs::write(run.join(CONFIG_FILE), cfg.to_toml()).map_err(|e| io(run.join(CONFIG_FILE), e))?;
    let info = RunInfo {
        mode,
        plan: kind,
        seed,
        weights,
        manifest: mpath,
        pretrained,
        stages: stage_plan.stages.clone(),
    };
    write_json(&run.join(RUN_FILE), &info)?;

    let log_path = run.join(METRICS_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io(&log_path, e))?);
    let fc = cfg.finetune_config(Some(ckpt_dir));
    run_progressive_finetune_with(&mut model, &stage_plan, &train, &val, &fc, |m, _| {
        print_epoch(m);
        let line = serde_json::to_string(m).expect("serializable");
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| Error::Io {
                path: log_path.clone(),
                source: e,
            })
    })?;
    println!("run {}", run.display());
    Ok(run)
}

pub fn read_metrics(run: &Path) -> Result<Vec<EpochMetrics>, CliError> {
    let path = run.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::NotARun {
        path: run.to_path_buf(),
        message: format!("{METRICS_FILE}: {e}"),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                CliError::Core(Error::Parse {
                    path: path.clone(),
                    message: format!("line {}: {e}", i + 1),
                })
            })
        })
        .collect()
}

pub fn read_run_info(run: &Path) -> Result<RunInfo, CliError> {
    let path = run.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::NotARun {
        path: run.to_path_buf(),
        message: format!("{RUN_FILE}: {e}"),
    })?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Core(Error::Parse {
            path,
            message: e.to_string(),
        })
    })
}

/// Index into `log` of the best stage-end record: highest val top-1, the
/// later stage on ties.
pub fn best_stage_end(log: &[EpochMetrics]) -> Option<usize> {
    let ends = (0..log.len()).filter(|&i| log.get(i + 1).map_or(true, |n| n.stage_index != log[i].stage_index));
    ends.fold(None, |best: Option<usize>, i| match best {
        Some(b) if log[b].top1 > log[i].top1 => Some(b),
        _ => Some(i),
    })
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    run: PathBuf,
    checkpoint: PathBuf,
    stage: String,
    manifest: PathBuf,
    oracle: bool,
    samples: usize,
    report: beamvision::evalmetrics::EvalReport,
}

/// Outputs that pick the rate-oracle beam and the true position.
fn oracle_outputs(data: &TaskData, classes: usize, scale: f64) -> BatchOutputs {
    let rates = data.rates.as_ref().expect("rates attached");
    let n = data.len();
    let mut beam_logits = vec![0.0; n * classes];
    for i in 0..n {
        beam_logits[i * classes + rates.oracle_beam(i)] = 1.0;
    }
    BatchOutputs {
        batch: n,
        beam_classes: classes,
        beam_logits,
        position: data.positions.iter().flat_map(|p| p.map(|v| v / scale)).collect(),
        blockage: Some(data.blocked.iter().map(|&b| if b { 10.0 } else { -10.0 }).collect()),
    }
}

pub fn evaluate(run: &Path, manifest: Option<&Path>, oracle: bool) -> Result<(), CliError> {
    let cpath = run.join(CONFIG_FILE);
    if !cpath.is_file() {
        return Err(CliError::NotARun {
            path: run.to_path_buf(),
            message: format!("missing {CONFIG_FILE}"),
        });
    }
    let cfg = ExperimentConfig::load(&cpath)?;
    let log = read_metrics(run)?;
    let best = best_stage_end(&log).ok_or_else(|| CliError::NotARun {
        path: run.to_path_buf(),
        message: "empty metrics log".into(),
    })?;
    let rec = &log[best];
    let ckpt = run
        .join(CHECKPOINT_DIR)
        .join(format!("stage{}_{}.ckpt", rec.stage_index + 1, rec.stage));
    let model = read_checkpoint(&ckpt)?.model;

    let mpath = manifest.map_or_else(|| cfg.paths.data_dir.join(MANIFEST_FILE), Path::to_path_buf);
    let m = DatasetManifest::load(&mpath)?;
    let val = load_split(&cfg, &m, &manifest_root(&mpath), Split::Val, true)?;
    let scale = cfg.scene.world_extent / 2.0;
    let outputs = if oracle {
        oracle_outputs(&val, model.heads.beam_classes, scale)
    } else {
        predict(&model, &val, cfg.train.eval_batch_size)?
    };
    let report = evaluate_outputs(&outputs, &val, scale)?;
    let out = EvalOutput {
        run: run.to_path_buf(),
        checkpoint: ckpt,
        stage: rec.stage.clone(),
        manifest: mpath,
        oracle,
        samples: val.len(),
        report,
    };
    println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
    let name = if oracle { "eval_oracle.json" } else { "eval.json" };
    write_json(&run.join(name), &out)
}
