//! Experiment configuration file.
//!
//! Every knob of an experiment lives in one TOML file. Relative paths are
//! resolved against the directory containing the file.

use std::fs;
use std::path::{Component, Path, PathBuf};

use beamvision::channel::LinkParams;
use beamvision::codebook::{ArrayGeometry, CodebookParams};
use beamvision::finetune::{
    full_finetune_plan, make_default_stage_plan, AdamWConfig, DefaultPlanConfig, FinetuneConfig, LossWeights, Stage,
    StagePlan,
};
use beamvision::model::{BackboneKind, BackboneSpec, HeadSpec, Pooling};
use beamvision::scenegen::{SceneConfig, UserRegion};
use beamvision::{Error, Result};
use serde::{Deserialize, Serialize};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookSection {
    pub n1: usize,
    pub n2: usize,
    pub o1: usize,
    pub o2: usize,
    #[serde(default = "half")]
    pub spacing_h: f64,
    #[serde(default = "half")]
    pub spacing_v: f64,
}

fn half() -> f64 {
    0.5
}

impl Default for CodebookSection {
    fn default() -> Self {
        let p = CodebookParams::default();
        Self {
            n1: p.n1,
            n2: p.n2,
            o1: p.o1,
            o2: p.o2,
            spacing_h: 0.5,
            spacing_v: 0.5,
        }
    }
}

impl CodebookSection {
    pub fn params(&self) -> CodebookParams {
        CodebookParams {
            n1: self.n1,
            n2: self.n2,
            o1: self.o1,
            o2: self.o2,
        }
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::new(self.n1, self.n2, true, self.spacing_h, self.spacing_v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSection {
    /// Transmit SNR in dB.
    pub snr_db: f64,
    /// Carrier wavelength in meters; defaults to 28 GHz.
    #[serde(default)]
    pub wavelength: Option<f64>,
    pub blockage_attenuation_db: f64,
    pub rsu_position: [f64; 3],
    #[serde(default)]
    pub boresight_azimuth_deg: f64,
    #[serde(default)]
    pub downtilt_deg: f64,
}

impl Default for LinkSection {
    fn default() -> Self {
        Self {
            snr_db: 100.0,
            wavelength: None,
            blockage_attenuation_db: 20.0,
            rsu_position: [0.0, 0.0, 0.0],
            boresight_azimuth_deg: 0.0,
            downtilt_deg: 0.0,
        }
    }
}

impl LinkSection {
    pub fn params(&self) -> LinkParams {
        LinkParams {
            rsu_position: self.rsu_position,
            boresight_azimuth: self.boresight_azimuth_deg.to_radians(),
            downtilt: self.downtilt_deg.to_radians(),
            snr_linear: 10f64.powf(self.snr_db / 10.0),
            carrier_wavelength: self.wavelength.unwrap_or(SPEED_OF_LIGHT / 28e9),
            blockage_attenuation_db: self.blockage_attenuation_db,
            polarization_phase: 0.0,
        }
    }
}

/// Scene section. `rsu_pixel` defaults to the pixel of the RSU position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    pub image_size: usize,
    pub world_extent: f64,
    #[serde(default)]
    pub rsu_pixel: Option<[f64; 2]>,
    pub user_marker_radius: f64,
    pub distractor_count: usize,
    pub blockage_probability: f64,
    pub seed: u64,
    #[serde(default)]
    pub user_region: Option<UserRegion>,
}

impl Default for SceneSection {
    fn default() -> Self {
        let s = SceneConfig::default();
        Self {
            image_size: s.image_size,
            world_extent: s.world_extent,
            rsu_pixel: None,
            user_marker_radius: s.user_marker_radius,
            distractor_count: s.distractor_count,
            blockage_probability: s.blockage_probability,
            seed: s.seed,
            user_region: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub n_samples: usize,
    pub trajectories: usize,
    pub train_fraction: f64,
    pub split_seed: u64,
    #[serde(default)]
    pub by_trajectory: bool,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            trajectories: 17,
            train_fraction: 0.7,
            split_seed: 0,
            by_trajectory: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: BackboneKind,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub image_size: usize,
    #[serde(default = "four")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub pretrained_ref: Option<PathBuf>,
    pub beam_classes: usize,
    #[serde(default = "three")]
    pub position_dims: usize,
    #[serde(default = "yes")]
    pub blockage_head: bool,
}

fn four() -> usize {
    4
}

fn three() -> usize {
    3
}

fn yes() -> bool {
    true
}

impl Default for ModelSection {
    fn default() -> Self {
        let b = BackboneSpec::default();
        let h = HeadSpec::default();
        Self {
            kind: b.kind,
            patch_size: b.patch_size,
            embed_dim: b.embed_dim,
            depth: b.depth,
            heads: b.heads,
            image_size: b.image_size,
            mlp_ratio: b.mlp_ratio,
            pooling: b.pooling,
            pretrained_ref: None,
            beam_classes: h.beam_classes,
            position_dims: h.position_dims,
            blockage_head: h.blockage,
        }
    }
}

impl ModelSection {
    pub fn backbone(&self) -> BackboneSpec {
        BackboneSpec {
            kind: self.kind,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            image_size: self.image_size,
            mlp_ratio: self.mlp_ratio,
            pooling: self.pooling,
            pretrained_ref: self.pretrained_ref.as_ref().map(|p| p.to_string_lossy().into_owned()),
        }
    }

    pub fn heads(&self) -> HeadSpec {
        HeadSpec {
            beam_classes: self.beam_classes,
            position_dims: self.position_dims,
            blockage: self.blockage_head,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    Default3,
    FullFinetune,
    FromScratch,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub kind: PlanKind,
    /// Epochs of the three default stages.
    pub epochs: [usize; 3],
    pub learning_rates: [f64; 3],
    /// Single-stage plans (full fine-tune, from scratch).
    pub full_epochs: usize,
    pub full_learning_rate: f64,
    #[serde(default)]
    pub stages: Vec<Stage>,
}

impl Default for PlanSection {
    fn default() -> Self {
        let d = DefaultPlanConfig::default();
        Self {
            kind: PlanKind::Default3,
            epochs: d.epochs,
            learning_rates: d.learning_rates,
            full_epochs: d.epochs.iter().sum(),
            full_learning_rate: d.learning_rates[0],
            stages: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// `single_task` zeroes the auxiliary loss weights.
    #[serde(default = "multi_task")]
    pub mode: Mode,
    pub batch_size: usize,
    pub seed: u64,
    pub w_beam: f64,
    pub w_pos: f64,
    pub w_blk: f64,
    #[serde(default = "default_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

fn multi_task() -> Mode {
    Mode::MultiTask
}

fn default_decay() -> f64 {
    AdamWConfig::default().weight_decay
}

fn default_eval_batch() -> usize {
    64
}

impl Default for TrainSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            mode: Mode::MultiTask,
            batch_size: 32,
            seed: 0,
            w_beam: w.w_beam,
            w_pos: w.w_pos,
            w_blk: w.w_blk,
            weight_decay: default_decay(),
            eval_batch_size: default_eval_batch(),
        }
    }
}

impl TrainSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            w_beam: self.w_beam,
            w_pos: self.w_pos,
            w_blk: self.w_blk,
        }
    }
}

/// Position-regression pretraining of the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub checkpoint: PathBuf,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 1e-3,
            seed: 0,
            checkpoint: PathBuf::from("pretrained.ckpt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub codebook: CodebookSection,
    pub link: LinkSection,
    pub scene: SceneSection,
    pub generate: GenerateSection,
    pub model: ModelSection,
    pub plan: PlanSection,
    pub train: TrainSection,
    pub pretrain: PretrainSection,
    pub paths: PathsSection,
}

/// Drops `.` and folds `..` without touching the file system.
fn normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push(c);
                }
            }
            other => out.push(other),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Mode {
    SingleTask,
    MultiTask,
}

impl ExperimentConfig {
    /// Parses, absolutizes relative paths and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path
            .parent()
            .filter(|b| !b.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let base = fs::canonicalize(base).map_err(|e| Error::Io {
            path: base.to_path_buf(),
            source: e,
        })?;
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = normalize(&base.join(&*p));
            }
        };
        fix(&mut self.paths.data_dir);
        fix(&mut self.paths.run_dir);
        fix(&mut self.pretrain.checkpoint);
        if let Some(p) = self.model.pretrained_ref.as_mut() {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn scene_config(&self) -> SceneConfig {
        let s = &self.scene;
        let mut cfg = SceneConfig {
            image_size: s.image_size,
            world_extent: s.world_extent,
            rsu_pixel: [0.0, 0.0],
            user_marker_radius: s.user_marker_radius,
            distractor_count: s.distractor_count,
            blockage_probability: s.blockage_probability,
            seed: s.seed,
            user_region: s.user_region,
        };
        let [x, y, _] = self.link.rsu_position;
        cfg.rsu_pixel = s.rsu_pixel.unwrap_or_else(|| cfg.world_to_pixel(x, y));
        cfg
    }

    pub fn finetune_config(&self, checkpoint_dir: Option<PathBuf>) -> FinetuneConfig {
        FinetuneConfig {
            batch_size: self.train.batch_size,
            seed: self.train.seed,
            position_scale: self.scene.world_extent / 2.0,
            optimizer: AdamWConfig {
                weight_decay: self.train.weight_decay,
                ..AdamWConfig::default()
            },
            eval_batch_size: self.train.eval_batch_size,
            checkpoint_dir,
        }
    }

    /// Loss weights for a training mode.
    pub fn weights(&self, mode: Mode) -> LossWeights {
        match mode {
            Mode::MultiTask => self.train.weights(),
            Mode::SingleTask => LossWeights {
                w_pos: 0.0,
                w_blk: 0.0,
                ..self.train.weights()
            },
        }
    }

    pub fn stage_plan(&self, kind: PlanKind, weights: LossWeights) -> Result<StagePlan> {
        let depth = self.model.depth;
        let p = &self.plan;
        match kind {
            PlanKind::Default3 => make_default_stage_plan(
                depth,
                &DefaultPlanConfig {
                    epochs: p.epochs,
                    learning_rates: p.learning_rates,
                    weights,
                },
            ),
            PlanKind::FullFinetune | PlanKind::FromScratch => {
                full_finetune_plan(depth, p.full_epochs, p.full_learning_rate, weights)
            }
            PlanKind::Explicit => {
                let plan = StagePlan {
                    stages: p.stages.clone(),
                }
                .with_weights(weights);
                plan.validate(depth)?;
                Ok(plan)
            }
        }
    }

    /// Cross-field checks, run before any work starts.
    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidArgument(m));
        self.codebook.geometry()?;
        let cb = self.codebook.params();
        if cb.o1 == 0 || cb.o2 == 0 {
            return invalid("codebook oversampling factors must be >= 1".into());
        }
        self.link.params().validate()?;
        let scene = self.scene_config();
        scene.validate()?;
        let [x, y, _] = self.link.rsu_position;
        let expect = scene.world_to_pixel(x, y);
        if (expect[0] - scene.rsu_pixel[0]).abs() > 0.5 || (expect[1] - scene.rsu_pixel[1]).abs() > 0.5 {
            return invalid(format!(
                "scene.rsu_pixel {:?} does not match link.rsu_position, which maps to {:?}",
                scene.rsu_pixel, expect
            ));
        }
        let backbone = self.model.backbone();
        let heads = self.model.heads();
        backbone.validate()?;
        heads.validate()?;
        if heads.beam_classes != cb.size() {
            return invalid(format!(
                "model.beam_classes = {} but the codebook has {} precoders",
                heads.beam_classes,
                cb.size()
            ));
        }
        if backbone.image_size != self.scene.image_size {
            return invalid(format!(
                "model.image_size = {} but scene.image_size = {}",
                backbone.image_size, self.scene.image_size
            ));
        }
        if backbone.kind == BackboneKind::ExternalPretrained && backbone.pretrained_ref.is_none() {
            return invalid("model.kind = external_pretrained requires model.pretrained_ref".into());
        }
        let g = &self.generate;
        if g.n_samples == 0 || g.trajectories == 0 {
            return invalid("generate.n_samples and generate.trajectories must be >= 1".into());
        }
        if !(g.train_fraction > 0.0 && g.train_fraction < 1.0) {
            return invalid(format!(
                "generate.train_fraction must lie in (0, 1), got {}",
                g.train_fraction
            ));
        }
        self.finetune_config(None).validate()?;
        if self.pretrain.epochs == 0 || !(self.pretrain.learning_rate > 0.0) {
            return invalid("pretrain.epochs and pretrain.learning_rate must be positive".into());
        }
        for mode in [Mode::MultiTask, Mode::SingleTask] {
            let w = self.weights(mode);
            w.validate()?;
            if w.w_blk > 0.0 && !heads.blockage {
                return invalid("train.w_blk > 0 requires model.blockage_head".into());
            }
        }
        self.stage_plan(self.plan.kind, self.train.weights())?;
        Ok(())
    }
}
