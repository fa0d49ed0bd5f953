//! Block-structured vision backbone with task-specific linear heads.
//!
//! Parameters are partitioned into groups (`embed`, `block_<i>`, `norm`,
//! `head_beam`, `head_pos`, `head_blk`); trainability is tracked per group.

mod checkpoint;
pub(crate) mod layers;
mod network;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, streams};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use layers::{LayerNorm, Linear};
pub(crate) use network::{Entry, OutputGrads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    TinyTransformer,
    ExternalPretrained,
}

/// How the heads read the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over patch tokens after the final norm.
    #[default]
    Mean,
    /// A learned class token prepended to the sequence.
    ClassToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub image_size: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub pretrained_ref: Option<String>,
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            kind: BackboneKind::TinyTransformer,
            patch_size: 16,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            image_size: 224,
            mlp_ratio: 4,
            pooling: Pooling::Mean,
            pretrained_ref: None,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.depth == 0 {
            return Err(Error::invalid("backbone depth must be >= 1"));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "embed dim {} must be a positive multiple of head count {}",
                self.embed_dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::invalid("mlp ratio must be >= 1"));
        }
        Ok(())
    }

    /// Patches per image.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Sequence length seen by the blocks.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + usize::from(self.pooling == Pooling::ClassToken)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Architecture equality, ignoring where the weights come from.
    pub fn same_architecture(&self, other: &BackboneSpec) -> bool {
        self.patch_size == other.patch_size
            && self.embed_dim == other.embed_dim
            && self.depth == other.depth
            && self.heads == other.heads
            && self.image_size == other.image_size
            && self.mlp_ratio == other.mlp_ratio
            && self.pooling == other.pooling
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub beam_classes: usize,
    pub position_dims: usize,
    pub blockage: bool,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            beam_classes: 1024,
            position_dims: 3,
            blockage: true,
        }
    }
}

impl HeadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.beam_classes < 2 {
            return Err(Error::invalid(format!(
                "beam head needs >= 2 classes, got {}",
                self.beam_classes
            )));
        }
        if self.position_dims != 3 {
            return Err(Error::invalid(format!(
                "position head must be 3-D, got {}",
                self.position_dims
            )));
        }
        Ok(())
    }
}

/// Addressable parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Embed,
    Block(usize),
    Norm,
    HeadBeam,
    HeadPos,
    HeadBlk,
}

impl Group {
    pub fn is_head(&self) -> bool {
        matches!(self, Group::HeadBeam | Group::HeadPos | Group::HeadBlk)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Embed => write!(f, "embed"),
            Group::Block(i) => write!(f, "block_{i}"),
            Group::Norm => write!(f, "norm"),
            Group::HeadBeam => write!(f, "head_beam"),
            Group::HeadPos => write!(f, "head_pos"),
            Group::HeadBlk => write!(f, "head_blk"),
        }
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embed" => Ok(Group::Embed),
            "norm" => Ok(Group::Norm),
            "head_beam" => Ok(Group::HeadBeam),
            "head_pos" => Ok(Group::HeadPos),
            "head_blk" => Ok(Group::HeadBlk),
            _ => s
                .strip_prefix("block_")
                .and_then(|i| i.parse().ok())
                .map(Group::Block)
                .ok_or_else(|| Error::invalid(format!("unknown parameter group '{s}'"))),
        }
    }
}

/// One transformer block: pre-norm attention and MLP, each with a residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    fn init<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            qkv: Linear::init(dim, 3 * dim, fan_in_std(dim), rng),
            proj: Linear::init(dim, dim, fan_in_std(dim), rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::init(dim, hidden, fan_in_std(dim), rng),
            fc2: Linear::init(hidden, dim, fan_in_std(hidden), rng),
        }
    }

    fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            ln1: LayerNorm::zeros(dim),
            qkv: Linear::zeros(dim, 3 * dim),
            proj: Linear::zeros(dim, dim),
            ln2: LayerNorm::zeros(dim),
            fc1: Linear::zeros(dim, hidden),
            fc2: Linear::zeros(hidden, dim),
        }
    }
}

/// Embedding and class-token std.
const INIT_STD: f64 = 0.02;

/// Matches the variance of `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (3.0 * fan_in as f64).sqrt()
}

/// All model weights. Also used, zero-initialized, as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub patch: Linear,
    pub pos: Vec<f64>,
    pub cls: Option<Vec<f64>>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head_beam: Linear,
    pub head_pos: Linear,
    pub head_blk: Option<Linear>,
}

/// Borrowed view of one parameter tensor.
pub struct TensorRef<'a> {
    pub group: Group,
    pub name: &'static str,
    pub data: &'a [f64],
    /// Matrices are weight-decayed; vectors (biases, norms, embeddings) are not.
    pub decay: bool,
}

pub struct TensorMut<'a> {
    pub group: Group,
    pub name: &'static str,
    pub data: &'a mut Vec<f64>,
    pub decay: bool,
}

impl Parameters {
    fn init(backbone: &BackboneSpec, heads: &HeadSpec, seed: u64) -> Self {
        let mut rng = derive_rng(seed, &[streams::INIT]);
        let d = backbone.embed_dim;
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let patch = Linear::init(backbone.patch_dim(), d, fan_in_std(backbone.patch_dim()), &mut rng);
        let pos = (0..backbone.seq_len() * d).map(|_| normal.sample(&mut rng)).collect();
        let cls = (backbone.pooling == Pooling::ClassToken).then(|| (0..d).map(|_| normal.sample(&mut rng)).collect());
        let blocks = (0..backbone.depth)
            .map(|_| Block::init(d, d * backbone.mlp_ratio, &mut rng))
            .collect();
        Self {
            patch,
            pos,
            cls,
            blocks,
            norm: LayerNorm::new(d),
            head_beam: Linear::init(d, heads.beam_classes, fan_in_std(d), &mut rng),
            head_pos: Linear::init(d, heads.position_dims, fan_in_std(d), &mut rng),
            head_blk: heads.blockage.then(|| Linear::init(d, 1, fan_in_std(d), &mut rng)),
        }
    }

    /// Zero tensors with this parameter set's layout.
    pub fn zeros_like(&self) -> Self {
        let d = self.norm.dim;
        Self {
            patch: Linear::zeros(self.patch.in_dim, d),
            pos: vec![0.0; self.pos.len()],
            cls: self.cls.as_ref().map(|c| vec![0.0; c.len()]),
            blocks: self.blocks.iter().map(|b| Block::zeros(d, b.fc1.out_dim)).collect(),
            norm: LayerNorm::zeros(d),
            head_beam: Linear::zeros(d, self.head_beam.out_dim),
            head_pos: Linear::zeros(d, self.head_pos.out_dim),
            head_blk: self.head_blk.as_ref().map(|_| Linear::zeros(d, 1)),
        }
    }

    /// Every tensor in a fixed order (the same order as `tensors_mut`).
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        fn push<'a>(out: &mut Vec<TensorRef<'a>>, group: Group, name: &'static str, data: &'a [f64], decay: bool) {
            out.push(TensorRef {
                group,
                name,
                data,
                decay,
            })
        }
        let mut out = Vec::new();
        let mut add = |group, name, data, decay| push(&mut out, group, name, data, decay);
        add(Group::Embed, "patch.weight", &self.patch.weight, true);
        add(Group::Embed, "patch.bias", &self.patch.bias, false);
        add(Group::Embed, "pos", &self.pos, false);
        if let Some(cls) = &self.cls {
            add(Group::Embed, "cls", cls, false);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let g = Group::Block(i);
            add(g, "ln1.gamma", &b.ln1.gamma, false);
            add(g, "ln1.beta", &b.ln1.beta, false);
            add(g, "qkv.weight", &b.qkv.weight, true);
            add(g, "qkv.bias", &b.qkv.bias, false);
            add(g, "proj.weight", &b.proj.weight, true);
            add(g, "proj.bias", &b.proj.bias, false);
            add(g, "ln2.gamma", &b.ln2.gamma, false);
            add(g, "ln2.beta", &b.ln2.beta, false);
            add(g, "fc1.weight", &b.fc1.weight, true);
            add(g, "fc1.bias", &b.fc1.bias, false);
            add(g, "fc2.weight", &b.fc2.weight, true);
            add(g, "fc2.bias", &b.fc2.bias, false);
        }
        add(Group::Norm, "norm.gamma", &self.norm.gamma, false);
        add(Group::Norm, "norm.beta", &self.norm.beta, false);
        add(Group::HeadBeam, "head_beam.weight", &self.head_beam.weight, true);
        add(Group::HeadBeam, "head_beam.bias", &self.head_beam.bias, false);
        add(Group::HeadPos, "head_pos.weight", &self.head_pos.weight, true);
        add(Group::HeadPos, "head_pos.bias", &self.head_pos.bias, false);
        if let Some(h) = &self.head_blk {
            add(Group::HeadBlk, "head_blk.weight", &h.weight, true);
            add(Group::HeadBlk, "head_blk.bias", &h.bias, false);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        let Parameters {
            patch,
            pos,
            cls,
            blocks,
            norm,
            head_beam,
            head_pos,
            head_blk,
        } = self;
        out.push(TensorMut {
            group: Group::Embed,
            name: "patch.weight",
            data: &mut patch.weight,
            decay: true,
        });
        out.push(TensorMut {
            group: Group::Embed,
            name: "patch.bias",
            data: &mut patch.bias,
            decay: false,
        });
        out.push(TensorMut {
            group: Group::Embed,
            name: "pos",
            data: pos,
            decay: false,
        });
        if let Some(cls) = cls {
            out.push(TensorMut {
                group: Group::Embed,
                name: "cls",
                data: cls,
                decay: false,
            });
        }
        for (i, b) in blocks.iter_mut().enumerate() {
            let g = Group::Block(i);
            let Block {
                ln1,
                qkv,
                proj,
                ln2,
                fc1,
                fc2,
            } = b;
            out.push(TensorMut {
                group: g,
                name: "ln1.gamma",
                data: &mut ln1.gamma,
                decay: false,
            });
            out.push(TensorMut {
                group: g,
                name: "ln1.beta",
                data: &mut ln1.beta,
                decay: false,
            });
            out.push(TensorMut {
                group: g,
                name: "qkv.weight",
                data: &mut qkv.weight,
                decay: true,
            });
            out.push(TensorMut {
                group: g,
                name: "qkv.bias",
                data: &mut qkv.bias,
                decay: false,
            });
            out.push(TensorMut {
                group: g,
                name: "proj.weight",
                data: &mut proj.weight,
                decay: true,
            });
            out.push(TensorMut {
                group: g,
                name: "proj.bias",
                data: &mut proj.bias,
                decay: false,
            });
            out.push(TensorMut {
                group: g,
                name: "ln2.gamma",
                data: &mut ln2.gamma,
                decay: false,
            });
            out.push(TensorMut {
                group: g,
                name: "ln2.beta",
                data: &mut ln2.beta,
                decay: false,
            });
            out.push(TensorMut {
                group: g,
                name: "fc1.weight",
                data: &mut fc1.weight,
                decay: true,
            });
            out.push(TensorMut {
                group: g,
                name: "fc1.bias",
                data: &mut fc1.bias,
                decay: false,
            });
            out.push(TensorMut {
                group: g,
                name: "fc2.weight",
                data: &mut fc2.weight,
                decay: true,
            });
            out.push(TensorMut {
                group: g,
                name: "fc2.bias",
                data: &mut fc2.bias,
                decay: false,
            });
        }
        out.push(TensorMut {
            group: Group::Norm,
            name: "norm.gamma",
            data: &mut norm.gamma,
            decay: false,
        });
        out.push(TensorMut {
            group: Group::Norm,
            name: "norm.beta",
            data: &mut norm.beta,
            decay: false,
        });
        out.push(TensorMut {
            group: Group::HeadBeam,
            name: "head_beam.weight",
            data: &mut head_beam.weight,
            decay: true,
        });
        out.push(TensorMut {
            group: Group::HeadBeam,
            name: "head_beam.bias",
            data: &mut head_beam.bias,
            decay: false,
        });
        out.push(TensorMut {
            group: Group::HeadPos,
            name: "head_pos.weight",
            data: &mut head_pos.weight,
            decay: true,
        });
        out.push(TensorMut {
            group: Group::HeadPos,
            name: "head_pos.bias",
            data: &mut head_pos.bias,
            decay: false,
        });
        if let Some(h) = head_blk {
            out.push(TensorMut {
                group: Group::HeadBlk,
                name: "head_blk.weight",
                data: &mut h.weight,
                decay: true,
            });
            out.push(TensorMut {
                group: Group::HeadBlk,
                name: "head_blk.bias",
                data: &mut h.bias,
                decay: false,
            });
        }
        out
    }
}

/// Per-sample view of the three task outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub beam_logits: Vec<f64>,
    pub position_pred: [f64; 3],
    pub blockage_logit: Option<f64>,
}

/// Task outputs for a batch, row-major per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutputs {
    pub batch: usize,
    pub beam_classes: usize,
    pub beam_logits: Vec<f64>,
    pub position: Vec<f64>,
    pub blockage: Option<Vec<f64>>,
}

impl BatchOutputs {
    pub fn sample(&self, i: usize) -> ModelOutputs {
        let c = self.beam_classes;
        ModelOutputs {
            beam_logits: self.beam_logits[i * c..(i + 1) * c].to_vec(),
            position_pred: [self.position[3 * i], self.position[3 * i + 1], self.position[3 * i + 2]],
            blockage_logit: self.blockage.as_ref().map(|b| b[i]),
        }
    }

    pub fn beam_row(&self, i: usize) -> &[f64] {
        &self.beam_logits[i * self.beam_classes..(i + 1) * self.beam_classes]
    }

    pub fn is_finite(&self) -> bool {
        self.beam_logits.iter().all(|v| v.is_finite())
            && self.position.iter().all(|v| v.is_finite())
            && self.blockage.as_ref().map_or(true, |b| b.iter().all(|v| v.is_finite()))
    }

    /// Concatenates batches in order.
    pub fn concat(parts: Vec<BatchOutputs>) -> Option<BatchOutputs> {
        let mut it = parts.into_iter();
        let mut acc = it.next()?;
        for p in it {
            acc.batch += p.batch;
            acc.beam_logits.extend(p.beam_logits);
            acc.position.extend(p.position);
            if let (Some(a), Some(b)) = (acc.blockage.as_mut(), p.blockage) {
                a.extend(b);
            }
        }
        Some(acc)
    }
}

/// Backbone, heads and the per-group trainable mask.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionModel {
    pub backbone: BackboneSpec,
    pub heads: HeadSpec,
    pub params: Parameters,
    trainable: BTreeMap<Group, bool>,
}

/// Builds a model from its specs. Initialization is seeded; a
/// `pretrained_ref` names a checkpoint whose backbone groups replace the
/// random backbone (heads always start fresh).
pub fn build_model(backbone: &BackboneSpec, heads: &HeadSpec, seed: u64) -> Result<VisionModel> {
    backbone.validate()?;
    heads.validate()?;
    let mut model = VisionModel {
        backbone: backbone.clone(),
        heads: *heads,
        params: Parameters::init(backbone, heads, seed),
        trainable: BTreeMap::new(),
    };
    for g in model.groups() {
        model.trainable.insert(g, true);
    }
    match (&backbone.kind, &backbone.pretrained_ref) {
        (_, Some(r)) => {
            let ckpt = read_checkpoint(Path::new(r))?;
            model.load_backbone_from(&ckpt.model, Path::new(r))?;
        }
        (BackboneKind::ExternalPretrained, None) => {
            return Err(Error::Load {
                path: "<none>".into(),
                message: "external_pretrained backbone requires pretrained_ref".into(),
            });
        }
        (BackboneKind::TinyTransformer, None) => {}
    }
    Ok(model)
}

impl VisionModel {
    /// All groups in canonical order.
    pub fn groups(&self) -> Vec<Group> {
        let mut g = vec![Group::Embed];
        g.extend((0..self.backbone.depth).map(Group::Block));
        g.extend([Group::Norm, Group::HeadBeam, Group::HeadPos]);
        if self.heads.blockage {
            g.push(Group::HeadBlk);
        }
        g
    }

    pub fn has_group(&self, g: Group) -> bool {
        self.trainable.contains_key(&g)
    }

    pub fn is_trainable(&self, g: Group) -> bool {
        self.trainable.get(&g).copied().unwrap_or(false)
    }

    /// Full `group -> trainable` map keyed by group name.
    pub fn trainable_mask(&self) -> BTreeMap<String, bool> {
        self.trainable.iter().map(|(g, t)| (g.to_string(), *t)).collect()
    }

    /// Flips exactly the named groups. Unknown names fail before anything
    /// changes.
    pub fn set_block_trainable<S: AsRef<str>>(
        &mut self,
        selectors: &[S],
        trainable: bool,
    ) -> Result<BTreeMap<String, bool>> {
        let groups = selectors
            .iter()
            .map(|s| {
                let g: Group = s.as_ref().parse()?;
                if self.has_group(g) {
                    Ok(g)
                } else {
                    Err(Error::invalid(format!("model has no parameter group '{}'", s.as_ref())))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        for g in groups {
            self.trainable.insert(g, trainable);
        }
        Ok(self.trainable_mask())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for v in self.trainable.values_mut() {
            *v = trainable;
        }
    }

    pub fn group_param_count(&self, group: Group) -> usize {
        self.params
            .tensors()
            .iter()
            .filter(|t| t.group == group)
            .map(|t| t.data.len())
            .sum()
    }

    pub fn total_params(&self) -> usize {
        self.params.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn count_trainable_params(&self) -> usize {
        self.params
            .tensors()
            .iter()
            .filter(|t| self.is_trainable(t.group))
            .map(|t| t.data.len())
            .sum()
    }

    /// Copies `embed`, every block and `norm` from `source`.
    pub fn load_backbone_from(&mut self, source: &VisionModel, origin: &Path) -> Result<()> {
        if !self.backbone.same_architecture(&source.backbone) {
            return Err(Error::Load {
                path: origin.to_path_buf(),
                message: "pretrained backbone architecture does not match".into(),
            });
        }
        let src = &source.params;
        let dst = &mut self.params;
        dst.patch = src.patch.clone();
        dst.pos = src.pos.clone();
        dst.cls = src.cls.clone();
        dst.blocks = src.blocks.clone();
        dst.norm = src.norm.clone();
        Ok(())
    }

    /// Inference on pre-patchified images (`batch x num_patches x patch_dim`).
    pub fn forward(&self, patches: &[f64], batch: usize) -> BatchOutputs {
        self.forward_train(patches, batch, Entry::Patches).0
    }
}

/// Converts HWC 8-bit images into `num_patches x patch_dim` rows per image,
/// with pixel values mapped to `[-1, 1]`.
///
/// Patches are ordered row-major over the patch grid; inside a patch the
/// layout is `(dy, dx, channel)`.
pub fn patchify(pixels: &[u8], image_size: usize, patch_size: usize, out: &mut Vec<f64>) {
    let side = image_size / patch_size;
    debug_assert_eq!(pixels.len() % (image_size * image_size * 3), 0);
    for img in pixels.chunks_exact(image_size * image_size * 3) {
        for py in 0..side {
            for px in 0..side {
                for dy in 0..patch_size {
                    let row = (py * patch_size + dy) * image_size + px * patch_size;
                    let start = row * 3;
                    out.extend(
                        img[start..start + patch_size * 3]
                            .iter()
                            .map(|&v| v as f64 / 127.5 - 1.0),
                    );
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> BackboneSpec {
        BackboneSpec {
            patch_size: 8,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            image_size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn group_names_round_trip() {
        for g in [
            Group::Embed,
            Group::Block(3),
            Group::Norm,
            Group::HeadBeam,
            Group::HeadPos,
            Group::HeadBlk,
        ] {
            assert_eq!(g.to_string().parse::<Group>().unwrap(), g);
        }
        assert!("block_x".parse::<Group>().is_err());
        assert!("head".parse::<Group>().is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(BackboneSpec {
            image_size: 30,
            ..tiny_spec()
        }
        .validate()
        .is_err());
        assert!(BackboneSpec {
            depth: 0,
            ..tiny_spec()
        }
        .validate()
        .is_err());
        assert!(BackboneSpec {
            heads: 3,
            ..tiny_spec()
        }
        .validate()
        .is_err());
        assert!(HeadSpec {
            beam_classes: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(HeadSpec {
            position_dims: 2,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn head_only_param_count() {
        let spec = BackboneSpec {
            image_size: 64,
            ..Default::default()
        };
        let mut m = build_model(&spec, &HeadSpec::default(), 0).unwrap();
        m.set_all_trainable(false);
        assert_eq!(m.count_trainable_params(), 0);
        m.set_block_trainable(&["head_beam", "head_pos", "head_blk"], true)
            .unwrap();
        // beam 128*1024 + 1024, position 128*3 + 3, blockage 128 + 1
        assert_eq!(128 * 1024 + 1024 + 128 * 3 + 3 + 128 + 1, 132_612);
        assert_eq!(m.count_trainable_params(), 132_612);
        let before = m.count_trainable_params();
        m.set_block_trainable(&["block_3"], true).unwrap();
        assert_eq!(
            m.count_trainable_params() - before,
            m.group_param_count(Group::Block(3))
        );
        assert!(m.set_block_trainable(&["block_9"], true).is_err());
        m.set_all_trainable(true);
        assert_eq!(m.count_trainable_params(), m.total_params());
    }

    #[test]
    fn unknown_selector_changes_nothing() {
        let mut m = build_model(&tiny_spec(), &HeadSpec::default(), 0).unwrap();
        m.set_all_trainable(false);
        assert!(m.set_block_trainable(&["norm", "block_2"], true).is_err());
        assert!(!m.is_trainable(Group::Norm));
    }

    #[test]
    fn missing_blockage_head_has_no_group() {
        let m = build_model(
            &tiny_spec(),
            &HeadSpec {
                blockage: false,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert!(!m.has_group(Group::HeadBlk));
        let mut m = m;
        assert!(m.set_block_trainable(&["head_blk"], true).is_err());
    }

    #[test]
    fn external_without_ref_fails_to_load() {
        let spec = BackboneSpec {
            kind: BackboneKind::ExternalPretrained,
            ..tiny_spec()
        };
        assert!(matches!(
            build_model(&spec, &HeadSpec::default(), 0),
            Err(Error::Load { .. })
        ));
        let spec = BackboneSpec {
            pretrained_ref: Some("/nonexistent/weights.ckpt".into()),
            ..tiny_spec()
        };
        assert!(matches!(
            build_model(&spec, &HeadSpec::default(), 0),
            Err(Error::Load { .. })
        ));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = build_model(&tiny_spec(), &HeadSpec::default(), 9).unwrap();
        let b = build_model(&tiny_spec(), &HeadSpec::default(), 9).unwrap();
        let c = build_model(&tiny_spec(), &HeadSpec::default(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn patchify_layout() {
        // 4x4 image, patch 2: pixel (y, x) has red channel value 10*y + x
        let mut px = vec![0u8; 4 * 4 * 3];
        for y in 0..4 {
            for x in 0..4 {
                px[(y * 4 + x) * 3] = (10 * y + x) as u8;
            }
        }
        let mut out = Vec::new();
        patchify(&px, 4, 2, &mut out);
        assert_eq!(out.len(), 4 * 12);
        let red = |v: f64| ((v + 1.0) * 127.5).round() as u8;
        // patch 1 is the top-right one: pixels (0,2), (0,3), (1,2), (1,3)
        let p1: Vec<u8> = out[12..24].chunks(3).map(|c| red(c[0])).collect();
        assert_eq!(p1, vec![2, 3, 12, 13]);
    }
}
