//! Synthetic top-down street scenes paired with oracle beam labels, the
//! line-delimited manifest format, train/validation splits and an adapter
//! for external ViWi-Drone style tables.
//!
//! World coordinates map linearly onto the image: the origin sits at the
//! image center, +x points right and +y points up, and the square
//! `[-E/2, E/2]^2` (with `E = world_extent`) covers the whole frame.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::channel::{oracle_beam, synthesize_los_channel, LinkParams};
use crate::codebook::{ArrayGeometry, BeamCodebook, CodebookParams};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, streams};

pub const MANIFEST_FORMAT: &str = "beamvision-manifest-v1";

const BACKGROUND: [u8; 3] = [128, 128, 128];
const USER_COLOR: [u8; 3] = [220, 30, 30];
const RSU_COLOR: [u8; 3] = [240, 220, 40];
const BAR_COLOR: [u8; 3] = [25, 25, 25];
const DISTRACTOR_COLORS: [[u8; 3]; 4] = [[40, 70, 200], [30, 150, 60], [70, 110, 170], [90, 170, 120]];

/// Axis-aligned region (meters) that user trajectories stay inside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserRegion {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    /// Side of the square world region shown in the image, meters.
    pub world_extent: f64,
    /// Where the RSU glyph is drawn; may lie outside the frame, in which
    /// case the glyph is clipped.
    pub rsu_pixel: [f64; 2],
    pub user_marker_radius: f64,
    pub distractor_count: usize,
    pub blockage_probability: f64,
    pub seed: u64,
    /// Defaults to the whole visible square.
    #[serde(default)]
    pub user_region: Option<UserRegion>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            world_extent: 100.0,
            rsu_pixel: [112.0, 112.0],
            user_marker_radius: 4.0,
            distractor_count: 6,
            blockage_probability: 0.2,
            seed: 0,
            user_region: None,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::invalid(format!(
                "image size must be >= 32, got {}",
                self.image_size
            )));
        }
        if !(self.world_extent.is_finite() && self.world_extent > 0.0) {
            return Err(Error::invalid(format!(
                "world extent must be positive, got {}",
                self.world_extent
            )));
        }
        if !(0.0..=1.0).contains(&self.blockage_probability) {
            return Err(Error::invalid(format!(
                "blockage probability must lie in [0, 1], got {}",
                self.blockage_probability
            )));
        }
        if !(self.user_marker_radius.is_finite() && self.user_marker_radius > 0.0) {
            return Err(Error::invalid("user marker radius must be positive"));
        }
        if !self.rsu_pixel.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("rsu pixel must be finite"));
        }
        let r = self.region();
        let half = self.world_extent / 2.0;
        for (lo, hi) in [(r.x[0], r.x[1]), (r.y[0], r.y[1])] {
            if !(lo < hi && lo >= -half && hi <= half) {
                return Err(Error::invalid(format!(
                    "user region [{lo}, {hi}] must be nonempty and inside the world extent"
                )));
            }
        }
        Ok(())
    }

    pub fn region(&self) -> UserRegion {
        self.user_region.unwrap_or_else(|| {
            let h = self.world_extent / 2.0;
            UserRegion { x: [-h, h], y: [-h, h] }
        })
    }

    /// Pixel coordinates (column, row) of a world point.
    pub fn world_to_pixel(&self, x: f64, y: f64) -> [f64; 2] {
        let s = self.image_size as f64;
        [s / 2.0 + x / self.world_extent * s, s / 2.0 - y / self.world_extent * s]
    }

    pub fn pixel_to_world(&self, px: f64, py: f64) -> [f64; 2] {
        let s = self.image_size as f64;
        [
            (px - s / 2.0) / s * self.world_extent,
            (s / 2.0 - py) / s * self.world_extent,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_ref: String,
    pub position: [f64; 3],
    pub beam_label: usize,
    pub blocked: bool,
    pub trajectory_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub codebook_params: CodebookParams,
    pub scene_config: SceneConfig,
    /// Link parameters the labels were computed with, when known.
    pub link_params: Option<LinkParams>,
    pub geometry: Option<ArrayGeometry>,
    /// One entry per record once split.
    pub split_assignment: Option<Vec<Split>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    codebook_params: CodebookParams,
    scene_config: SceneConfig,
    #[serde(default)]
    link_params: Option<LinkParams>,
    #[serde(default)]
    geometry: Option<ArrayGeometry>,
}

#[derive(Serialize, Deserialize)]
struct Line {
    #[serde(flatten)]
    record: SampleRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Validation("manifest has no records".into()));
        }
        let size = self.codebook_params.size();
        let bad: Vec<String> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.beam_label >= size)
            .map(|(i, r)| format!("record {} (label {})", i + 1, r.beam_label))
            .collect();
        if !bad.is_empty() {
            return Err(Error::Validation(format!(
                "beam labels outside [0, {size}): {}",
                bad.join(", ")
            )));
        }
        if let Some(s) = &self.split_assignment {
            if s.len() != self.records.len() {
                return Err(Error::Validation("split assignment does not cover every record".into()));
            }
        }
        Ok(())
    }

    /// Record indices in `split`, or all indices for `None`.
    pub fn indices(&self, split: Option<Split>) -> Result<Vec<usize>> {
        match (split, &self.split_assignment) {
            (None, _) => Ok((0..self.records.len()).collect()),
            (Some(want), Some(assign)) => Ok(assign
                .iter()
                .enumerate()
                .filter(|(_, s)| **s == want)
                .map(|(i, _)| i)
                .collect()),
            (Some(_), None) => Err(Error::invalid("manifest has not been split")),
        }
    }

    /// Record counts `(train, val)`.
    pub fn split_counts(&self) -> Option<(usize, usize)> {
        self.split_assignment.as_ref().map(|a| {
            let train = a.iter().filter(|s| **s == Split::Train).count();
            (train, a.len() - train)
        })
    }

    /// Header line followed by one JSON object per record.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            codebook_params: self.codebook_params,
            scene_config: self.scene_config.clone(),
            link_params: self.link_params,
            geometry: self.geometry,
        };
        let io = |e| Error::io(path, e);
        serde_json::to_writer(&mut w, &header).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
        for (i, r) in self.records.iter().enumerate() {
            let line = Line {
                record: r.clone(),
                split: self.split_assignment.as_ref().map(|s| s[i]),
            };
            serde_json::to_writer(&mut w, &line).map_err(|e| io(e.into()))?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| parse("empty manifest".into()))?
            .map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(&header_line).map_err(|e| parse(format!("bad header: {e}")))?;
        if header.format != MANIFEST_FORMAT {
            return Err(parse(format!("unsupported manifest format '{}'", header.format)));
        }
        let mut records = Vec::new();
        let mut splits = Vec::new();
        let mut bad = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Line>(&line) {
                Ok(l) => {
                    records.push(l.record);
                    splits.push(l.split);
                }
                Err(e) => bad.push(format!("record {}: {e}", n + 1)),
            }
        }
        if !bad.is_empty() {
            return Err(parse(bad.join("; ")));
        }
        let split_assignment = if !splits.is_empty() && splits.iter().all(Option::is_some) {
            Some(splits.into_iter().map(|s| s.expect("checked")).collect())
        } else if splits.iter().any(Option::is_some) {
            return Err(parse("split field present on only some records".into()));
        } else {
            None
        };
        let m = DatasetManifest {
            records,
            codebook_params: header.codebook_params,
            scene_config: header.scene_config,
            link_params: header.link_params,
            geometry: header.geometry,
            split_assignment,
        };
        m.validate()?;
        Ok(m)
    }
}

fn blend(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3], alpha: f64) {
    if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 || alpha <= 0.0 {
        return;
    }
    let px = img.get_pixel_mut(x as u32, y as u32);
    for c in 0..3 {
        let v = px.0[c] as f64 * (1.0 - alpha) + color[c] as f64 * alpha;
        px.0[c] = v.round().clamp(0.0, 255.0) as u8;
    }
}

fn fill_rect(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let xa = (x0.floor() as i64).max(0);
    let xb = (x1.ceil() as i64).min(w);
    let ya = (y0.floor() as i64).max(0);
    let yb = (y1.ceil() as i64).min(h);
    for y in ya..yb {
        for x in xa..xb {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

/// Disc with 4x4 supersampled coverage, so sub-pixel centers stay visible.
fn fill_disc(img: &mut RgbImage, cx: f64, cy: f64, r: f64, color: [u8; 3]) {
    const SS: usize = 4;
    let x0 = (cx - r).floor() as i64 - 1;
    let x1 = (cx + r).ceil() as i64 + 1;
    let y0 = (cy - r).floor() as i64 - 1;
    let y1 = (cy + r).ceil() as i64 + 1;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    if (px - cx).powi(2) + (py - cy).powi(2) <= r * r {
                        hits += 1;
                    }
                }
            }
            blend(img, x, y, color, hits as f64 / (SS * SS) as f64);
        }
    }
}

/// Thick segment from `a` to `b` (pixel coordinates).
fn draw_bar(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], half_width: f64, color: [u8; 3]) {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let xmin = a[0].min(b[0]) - half_width - 1.0;
    let xmax = a[0].max(b[0]) + half_width + 1.0;
    let ymin = a[1].min(b[1]) - half_width - 1.0;
    let ymax = a[1].max(b[1]) + half_width + 1.0;
    for y in ymin.floor() as i64..=ymax.ceil() as i64 {
        for x in xmin.floor() as i64..=xmax.ceil() as i64 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
            if (px - qx).powi(2) + (py - qy).powi(2) <= half_width * half_width {
                blend(img, x, y, color, 1.0);
            }
        }
    }
}

/// Renders one scene. Randomness (distractor layout) comes only from `rng`.
pub fn render_scene<R: Rng>(position: [f64; 3], config: &SceneConfig, blocked: bool, rng: &mut R) -> Result<RgbImage> {
    config.validate()?;
    let half = config.world_extent / 2.0;
    if !position.iter().all(|v| v.is_finite()) || position[0].abs() > half || position[1].abs() > half {
        return Err(Error::OutOfBounds(format!(
            "position ({}, {}) outside the {} m world extent",
            position[0], position[1], config.world_extent
        )));
    }
    let size = config.image_size as u32;
    let s = config.image_size as f64;
    let mut img = RgbImage::from_pixel(size, size, Rgb(BACKGROUND));

    for _ in 0..config.distractor_count {
        let w = rng.gen_range(s / 24.0..s / 8.0);
        let h = rng.gen_range(s / 24.0..s / 8.0);
        let x = rng.gen_range(0.0..s - w);
        let y = rng.gen_range(0.0..s - h);
        let color = DISTRACTOR_COLORS[rng.gen_range(0..DISTRACTOR_COLORS.len())];
        fill_rect(&mut img, x, y, x + w, y + h, color);
    }

    let [rx, ry] = config.rsu_pixel;
    let g = (s / 40.0).max(2.0);
    fill_rect(&mut img, rx - g, ry - g, rx + g, ry + g, RSU_COLOR);

    let [ux, uy] = config.world_to_pixel(position[0], position[1]);
    let r = config.user_marker_radius;
    if blocked {
        // bar across the line of sight, just on the RSU side of the user
        let (dx, dy) = (rx - ux, ry - uy);
        let dist = (dx * dx + dy * dy).sqrt().max(1e-9);
        let (ex, ey) = (dx / dist, dy / dist);
        let off = (2.5 * r).min(dist / 2.0);
        let (cx, cy) = (ux + ex * off, uy + ey * off);
        let l = 2.0 * r;
        draw_bar(
            &mut img,
            [cx - ey * l, cy + ex * l],
            [cx + ey * l, cy - ex * l],
            (r / 3.0).max(1.0),
            BAR_COLOR,
        );
    }
    fill_disc(&mut img, ux, uy, r, USER_COLOR);
    Ok(img)
}

fn user_rsu_clearance(p: [f64; 2], params: &LinkParams) -> f64 {
    let [x, y, _] = params.rsu_position;
    ((p[0] - x).powi(2) + (p[1] - y).powi(2)).sqrt()
}

/// Smooth random walk inside the user region, reflecting at its borders
/// and steering away from the RSU mast.
fn trajectory(t: usize, count: usize, config: &SceneConfig, params: &LinkParams) -> Vec<[f64; 3]> {
    let mut rng = derive_rng(config.seed, &[streams::TRAJECTORY, t as u64]);
    let reg = config.region();
    let span = (reg.x[1] - reg.x[0]).min(reg.y[1] - reg.y[0]);
    let step = 0.04 * span;
    let clearance = (0.02 * span).max(1.0);
    let turn = Normal::new(0.0, 0.35).expect("valid std");
    let mut p = [0.0; 2];
    for _ in 0..1000 {
        p = [rng.gen_range(reg.x[0]..reg.x[1]), rng.gen_range(reg.y[0]..reg.y[1])];
        if user_rsu_clearance(p, params) >= clearance {
            break;
        }
    }
    let mut heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let reflect = |v: f64, lo: f64, hi: f64| -> (f64, bool) {
        if v < lo {
            ((2.0 * lo - v).min(hi), true)
        } else if v > hi {
            ((2.0 * hi - v).max(lo), true)
        } else {
            (v, false)
        }
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push([p[0], p[1], 0.0]);
        heading += turn.sample(&mut rng);
        for _ in 0..8 {
            let (nx, fx) = reflect(p[0] + step * heading.cos(), reg.x[0], reg.x[1]);
            let (ny, fy) = reflect(p[1] + step * heading.sin(), reg.y[0], reg.y[1]);
            if fx {
                heading = std::f64::consts::PI - heading;
            }
            if fy {
                heading = -heading;
            }
            if user_rsu_clearance([nx, ny], params) >= clearance {
                p = [nx, ny];
                break;
            }
            heading += std::f64::consts::FRAC_PI_2;
        }
    }
    out
}

/// Generates `n_samples` records along `trajectories` paths, writing PNG
/// images to `out_dir/images`. The manifest itself is not written.
pub fn generate_dataset(
    n_samples: usize,
    config: &SceneConfig,
    codebook: &BeamCodebook,
    params: &LinkParams,
    trajectories: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_samples == 0 || trajectories == 0 {
        return Err(Error::invalid("need >= 1 sample and >= 1 trajectory"));
    }
    config.validate()?;
    params.validate()?;
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let mut records = Vec::with_capacity(n_samples);
    let base = n_samples / trajectories;
    let extra = n_samples % trajectories;
    for t in 0..trajectories {
        let count = base + usize::from(t < extra);
        for position in trajectory(t, count, config, params) {
            let i = records.len();
            let mut rng = derive_rng(config.seed, &[streams::RECORD, i as u64]);
            let blocked = rng.gen_bool(config.blockage_probability);
            let ch = synthesize_los_channel(position, params, &codebook.geometry, blocked)?;
            let label = oracle_beam(&ch, codebook)?.flat;
            let img = render_scene(position, config, blocked, &mut rng)?;
            let image_ref = format!("images/{i:06}.png");
            let path = out_dir.join(&image_ref);
            img.save(&path).map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(&path, io),
                other => Error::io(&path, std::io::Error::other(other.to_string())),
            })?;
            records.push(SampleRecord {
                image_ref,
                position,
                beam_label: label,
                blocked,
                trajectory_id: t,
            });
        }
    }
    Ok(DatasetManifest {
        records,
        codebook_params: codebook.params(),
        scene_config: config.clone(),
        link_params: Some(*params),
        geometry: Some(codebook.geometry),
        split_assignment: None,
    })
}

/// Assigns every record to train or val. The train count is
/// `floor(train_fraction * N)`; with `by_trajectory`, whole trajectories are
/// added to train until that count is reached.
pub fn split_dataset(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
    by_trajectory: bool,
) -> Result<DatasetManifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = manifest.records.len();
    // the epsilon keeps products such as 0.7 * 10 = 7.000000000000001 or
    // 0.29 * 100 = 28.999999999999996 on their exact value
    let target = (train_fraction * n as f64 + 1e-9).floor() as usize;
    let mut rng = derive_rng(seed, &[streams::SPLIT]);
    let mut assign = vec![Split::Val; n];
    if by_trajectory {
        let mut ids: Vec<usize> = manifest
            .records
            .iter()
            .map(|r| r.trajectory_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        ids.shuffle(&mut rng);
        let mut train_ids = BTreeSet::new();
        let mut count = 0;
        for id in ids {
            if count >= target {
                break;
            }
            count += manifest.records.iter().filter(|r| r.trajectory_id == id).count();
            train_ids.insert(id);
        }
        for (a, r) in assign.iter_mut().zip(&manifest.records) {
            if train_ids.contains(&r.trajectory_id) {
                *a = Split::Train;
            }
        }
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &i in &order[..target] {
            assign[i] = Split::Train;
        }
    }
    let mut out = manifest.clone();
    out.split_assignment = Some(assign);
    Ok(out)
}

/// Column mapping for CSV tables in the ViWi-Drone layout.
///
/// External beam labels are re-based as `flat = label - label_base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub image: String,
    pub x: String,
    pub y: String,
    pub z: String,
    pub beam: String,
    #[serde(default)]
    pub blocked: Option<String>,
    #[serde(default)]
    pub trajectory: Option<String>,
    #[serde(default)]
    pub label_base: usize,
    pub codebook: CodebookParams,
    #[serde(default)]
    pub scene: Option<SceneConfig>,
}

impl ColumnMapping {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ManifestSchema {
    Native,
    ViwiDrone(ColumnMapping),
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" | "" => Some(false),
        _ => None,
    }
}

/// Loads a manifest written by this crate or an external CSV table.
pub fn load_external_manifest(path: &Path, schema: &ManifestSchema) -> Result<DatasetManifest> {
    let mapping = match schema {
        ManifestSchema::Native => return DatasetManifest::load(path),
        ManifestSchema::ViwiDrone(m) => m,
    };
    let parse = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse(e.to_string()))?;
    let headers = reader.headers().map_err(|e| parse(e.to_string()))?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| parse(format!("missing column '{name}'")))
    };
    let ci = col(&mapping.image)?;
    let cx = col(&mapping.x)?;
    let cy = col(&mapping.y)?;
    let cz = col(&mapping.z)?;
    let cb = col(&mapping.beam)?;
    let cblk = mapping.blocked.as_deref().map(col).transpose()?;
    let ctr = mapping.trajectory.as_deref().map(col).transpose()?;

    let mut records = Vec::new();
    let mut bad = Vec::new();
    for (n, row) in reader.records().enumerate() {
        let rec_no = n + 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                bad.push(format!("record {rec_no}: {e}"));
                continue;
            }
        };
        let field = |c: usize| row.get(c).unwrap_or("").trim();
        let num = |c: usize| field(c).parse::<f64>().ok().filter(|v| v.is_finite());
        let parsed = (|| {
            let position = [num(cx)?, num(cy)?, num(cz)?];
            let raw: usize = field(cb).parse().ok()?;
            let beam_label = raw.checked_sub(mapping.label_base)?;
            let blocked = match cblk {
                Some(c) => parse_bool(field(c))?,
                None => false,
            };
            let trajectory_id = match ctr {
                Some(c) => field(c).parse().ok()?,
                None => 0,
            };
            let image_ref = field(ci).to_string();
            (!image_ref.is_empty()).then_some(SampleRecord {
                image_ref,
                position,
                beam_label,
                blocked,
                trajectory_id,
            })
        })();
        match parsed {
            Some(r) => records.push(r),
            None => bad.push(format!("record {rec_no}")),
        }
    }
    if !bad.is_empty() {
        return Err(parse(format!("schema violation in {}", bad.join(", "))));
    }
    let m = DatasetManifest {
        records,
        codebook_params: mapping.codebook,
        scene_config: mapping.scene.clone().unwrap_or_default(),
        link_params: None,
        geometry: None,
        split_assignment: None,
    };
    m.validate()?;
    Ok(m)
}

/// Directory that a manifest's relative `image_ref`s resolve against.
pub fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}
