//! The unified cross-embodiment episode format: modality-keyed frames with
//! availability masks, zero padding for inactive dimensions, normalization
//! statistics, persistence, and train/validation splitting.

mod container;

pub use container::{load_episode, save_episode, EpisodeIoError};

use crate::embodiment::{ActModality, EmbodimentSpec, ObsModality};
use crate::geometry::{relative_pose, Pose};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Rendered image size used throughout the synthetic harness.
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_HEIGHT: usize = 32;
pub const IMAGE_WIDTH: usize = 32;

/// Fixed channel statistics applied to every image modality.
pub const IMAGE_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGE_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Floor applied to every standard deviation component.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("empty dataset")]
    Empty,
    #[error("validation fraction {0} outside (0, 1)")]
    BadFraction(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObsShape {
    Image { c: usize, h: usize, w: usize },
    Vector { dim: usize },
}

/// Which modalities an episode carries and their shapes. Only available
/// modalities appear; absent ones are flagged masked, never zero-filled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySchema {
    pub obs: BTreeMap<ObsModality, ObsShape>,
    pub act: BTreeMap<ActModality, usize>,
}

impl ModalitySchema {
    /// Schema implied by an embodiment's availability masks.
    pub fn for_embodiment(spec: &EmbodimentSpec) -> Self {
        let mut obs = BTreeMap::new();
        for m in ObsModality::ALL {
            if !spec.obs_available(m) {
                continue;
            }
            let shape = match m.vector_dim() {
                Some(dim) => ObsShape::Vector { dim },
                None => ObsShape::Image {
                    c: IMAGE_CHANNELS,
                    h: IMAGE_HEIGHT,
                    w: IMAGE_WIDTH,
                },
            };
            obs.insert(m, shape);
        }
        let mut act = BTreeMap::new();
        for m in ActModality::ALL {
            if spec.act_available(m) {
                act.insert(m, m.dim());
            }
        }
        ModalitySchema { obs, act }
    }
}

/// Raw image payload, u8 channel-major (C x H x W).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Image {
            c,
            h,
            w,
            data: vec![0; c * h * w],
        }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ObsValue {
    Image(Image),
    Vector(Vec<f64>),
}

/// One recorded time step: observations and actions keyed by modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub obs: BTreeMap<ObsModality, ObsValue>,
    pub act: BTreeMap<ActModality, Vec<f64>>,
    pub timestamp: f64,
}

/// Availability and active-dimension snapshot stored with every episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSnapshot {
    pub obs_mask: BTreeMap<ObsModality, bool>,
    pub act_mask: BTreeMap<ActModality, bool>,
    pub obs_active_dims: BTreeMap<ObsModality, Vec<bool>>,
    pub act_active_dims: BTreeMap<ActModality, Vec<bool>>,
}

impl MaskSnapshot {
    pub fn from_spec(spec: &EmbodimentSpec) -> Self {
        MaskSnapshot {
            obs_mask: spec.obs_mask.clone(),
            act_mask: spec.act_mask.clone(),
            obs_active_dims: spec.obs_active_dims.clone(),
            act_active_dims: spec.act_active_dims.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub task: String,
    pub seed: u64,
    /// Success label per task substep, set by the collection harness.
    pub substep_success: Vec<bool>,
}

/// A time-indexed sequence of frames from one embodiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub embodiment: String,
    pub schema: ModalitySchema,
    pub frames: Vec<Frame>,
    pub masks: MaskSnapshot,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn new(spec: &EmbodimentSpec, meta: EpisodeMeta) -> Self {
        Episode {
            embodiment: spec.name.clone(),
            schema: ModalitySchema::for_embodiment(spec),
            frames: Vec::new(),
            masks: MaskSnapshot::from_spec(spec),
            meta,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// `[x_eef - x_body, log(R_body^T R_eef)]` for one 6-dim body pose and one
/// 6-dim EEF pose.
fn relative_vec6(body: &[f64], eef: &[f64]) -> [f64; 6] {
    let rel = relative_pose(&Pose::from_vec6(body), &Pose::from_vec6(eef));
    rel.to_vec6()
}

/// Derive the 12-dim EEF-to-body modality from the body pose and the stacked
/// right/left EEF poses.
pub fn derive_eef_to_body(body_pose: &[f64], eef_pose: &[f64]) -> Vec<f64> {
    assert_eq!(body_pose.len(), 6);
    assert_eq!(eef_pose.len(), 12);
    let mut out = Vec::with_capacity(12);
    out.extend_from_slice(&relative_vec6(body_pose, &eef_pose[0..6]));
    out.extend_from_slice(&relative_vec6(body_pose, &eef_pose[6..12]));
    out
}

fn check_obs_shape(m: ObsModality, v: &ObsValue, shape: &ObsShape) -> Result<(), DatasetError> {
    match (v, shape) {
        (ObsValue::Image(img), ObsShape::Image { c, h, w }) => {
            if img.c != *c || img.h != *h || img.w != *w || img.data.len() != c * h * w {
                return Err(DatasetError::Schema(format!(
                    "image shape mismatch for {}",
                    m.name()
                )));
            }
        }
        (ObsValue::Vector(vec), ObsShape::Vector { dim }) => {
            if vec.len() != *dim {
                return Err(DatasetError::Schema(format!(
                    "vector length {} != {dim} for {}",
                    vec.len(),
                    m.name()
                )));
            }
        }
        _ => {
            return Err(DatasetError::Schema(format!(
                "kind mismatch for {}",
                m.name()
            )))
        }
    }
    Ok(())
}

/// Append one frame. The EEF-to-body modality is derived from the body and
/// EEF poses when not supplied, and inactive dimensions are zeroed per the
/// embodiment's active-dim masks.
pub fn record_frame(
    episode: &mut Episode,
    mut obs: BTreeMap<ObsModality, ObsValue>,
    act: BTreeMap<ActModality, Vec<f64>>,
    timestamp: f64,
) -> Result<(), DatasetError> {
    if episode.schema.obs.contains_key(&ObsModality::EefToBodyPose)
        && !obs.contains_key(&ObsModality::EefToBodyPose)
    {
        let body = match obs.get(&ObsModality::BodyPose) {
            Some(ObsValue::Vector(v)) if v.len() == 6 => v.clone(),
            _ => return Err(DatasetError::Schema("body_pose missing or malformed".into())),
        };
        let eef = match obs.get(&ObsModality::EefPose) {
            Some(ObsValue::Vector(v)) if v.len() == 12 => v.clone(),
            _ => return Err(DatasetError::Schema("eef_pose missing or malformed".into())),
        };
        obs.insert(
            ObsModality::EefToBodyPose,
            ObsValue::Vector(derive_eef_to_body(&body, &eef)),
        );
    }

    // Keys must match the schema exactly.
    for (m, shape) in &episode.schema.obs {
        let v = obs
            .get(m)
            .ok_or_else(|| DatasetError::Schema(format!("missing obs modality {}", m.name())))?;
        check_obs_shape(*m, v, shape)?;
    }
    if obs.len() != episode.schema.obs.len() {
        return Err(DatasetError::Schema("unexpected obs modality".into()));
    }
    for (m, dim) in &episode.schema.act {
        let v = act
            .get(m)
            .ok_or_else(|| DatasetError::Schema(format!("missing act modality {}", m.name())))?;
        if v.len() != *dim {
            return Err(DatasetError::Schema(format!(
                "act length {} != {dim} for {}",
                v.len(),
                m.name()
            )));
        }
    }
    if act.len() != episode.schema.act.len() {
        return Err(DatasetError::Schema("unexpected act modality".into()));
    }

    let mut frame = Frame {
        obs,
        act,
        timestamp,
    };
    pad_frame(&mut frame, &episode.masks);
    episode.frames.push(frame);
    Ok(())
}

fn zero_inactive(v: &mut [f64], active: &[bool]) {
    if active.len() == v.len() {
        for (x, &a) in v.iter_mut().zip(active) {
            if !a {
                *x = 0.0;
            }
        }
    }
}

fn pad_frame(frame: &mut Frame, masks: &MaskSnapshot) {
    for (m, v) in frame.obs.iter_mut() {
        if let ObsValue::Vector(vec) = v {
            if let Some(active) = masks.obs_active_dims.get(m) {
                zero_inactive(vec, active);
            }
        }
    }
    for (m, vec) in frame.act.iter_mut() {
        if let Some(active) = masks.act_active_dims.get(m) {
            zero_inactive(vec, active);
        }
    }
}

/// Zero every dimension marked inactive for this embodiment. Fully absent
/// modalities are not touched here; they are flagged for trunk masking by the
/// schema instead. Idempotent.
pub fn apply_padding(frame: &mut Frame, spec: &EmbodimentSpec) {
    pad_frame(frame, &MaskSnapshot::from_spec(spec));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VecStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-dimension mean/std for every vector modality, plus the fixed channel
/// constants for images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub obs: BTreeMap<ObsModality, VecStats>,
    pub act: BTreeMap<ActModality, VecStats>,
    pub image_mean: [f64; 3],
    pub image_std: [f64; 3],
}

impl NormStats {
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

struct Accum {
    n: f64,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl Accum {
    fn new(dim: usize) -> Self {
        Accum {
            n: 0.0,
            sum: vec![0.0; dim],
            sumsq: vec![0.0; dim],
        }
    }

    fn push(&mut self, v: &[f64]) {
        self.n += 1.0;
        for (i, &x) in v.iter().enumerate() {
            self.sum[i] += x;
            self.sumsq[i] += x * x;
        }
    }

    fn finish(self) -> VecStats {
        let mean: Vec<f64> = self.sum.iter().map(|s| s / self.n).collect();
        let std = self
            .sumsq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / self.n - m * m).max(0.0)).sqrt().max(STD_FLOOR))
            .collect();
        VecStats { mean, std }
    }
}

/// Population mean and standard deviation per vector dimension across all
/// frames of all episodes; standard deviations are floored at 1e-8.
pub fn compute_norm_stats(dataset: &[Episode]) -> Result<NormStats, DatasetError> {
    if dataset.is_empty() || dataset.iter().all(|e| e.is_empty()) {
        return Err(DatasetError::Empty);
    }
    let mut obs_acc: BTreeMap<ObsModality, Accum> = BTreeMap::new();
    let mut act_acc: BTreeMap<ActModality, Accum> = BTreeMap::new();
    for ep in dataset {
        for frame in &ep.frames {
            for (m, v) in &frame.obs {
                if let ObsValue::Vector(vec) = v {
                    obs_acc
                        .entry(*m)
                        .or_insert_with(|| Accum::new(vec.len()))
                        .push(vec);
                }
            }
            for (m, vec) in &frame.act {
                act_acc
                    .entry(*m)
                    .or_insert_with(|| Accum::new(vec.len()))
                    .push(vec);
            }
        }
    }
    Ok(NormStats {
        obs: obs_acc.into_iter().map(|(m, a)| (m, a.finish())).collect(),
        act: act_acc.into_iter().map(|(m, a)| (m, a.finish())).collect(),
        image_mean: IMAGE_MEAN,
        image_std: IMAGE_STD,
    })
}

pub fn normalize_vec(v: &[f64], stats: &VecStats) -> Vec<f64> {
    v.iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(x, (m, s))| (x - m) / s)
        .collect()
}

pub fn denormalize_vec(v: &[f64], stats: &VecStats) -> Vec<f64> {
    v.iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(x, (m, s))| x * s + m)
        .collect()
}

/// Map u8 pixels to normalized f32 values channel by channel:
/// `(pixel / 255 - mean_c) / std_c`.
pub fn normalize_image(img: &Image, stats: &NormStats) -> Vec<f32> {
    let plane = img.h * img.w;
    img.data
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let c = i / plane;
            ((p as f64 / 255.0 - stats.image_mean[c]) / stats.image_std[c]) as f32
        })
        .collect()
}

/// Deterministic seeded episode-level split; no frame ever appears in both
/// halves. The validation count is `floor(n * fraction)` with a minimum of 1.
pub fn split(
    n_episodes: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DatasetError> {
    if !(0.0..1.0).contains(&val_fraction) || val_fraction <= 0.0 {
        return Err(DatasetError::BadFraction(val_fraction));
    }
    if n_episodes == 0 {
        return Err(DatasetError::Empty);
    }
    let mut idx: Vec<usize> = (0..n_episodes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_val = ((n_episodes as f64 * val_fraction).floor() as usize).max(1);
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    Ok((train, val))
}

/// On-disk listing of a dataset: episode files, embodiment, and the path of
/// the normalization statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub embodiment: String,
    pub episodes: Vec<PathBuf>,
    pub stats: Option<PathBuf>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Load every listed episode, resolving relative paths against the
    /// manifest's directory.
    pub fn load_episodes(&self, manifest_path: &Path) -> Result<Vec<Episode>, EpisodeIoError> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        self.episodes
            .iter()
            .map(|p| {
                let full = if p.is_absolute() {
                    p.clone()
                } else {
                    base.join(p)
                };
                load_episode(&full)
            })
            .collect()
    }
}

/// Randomized episode builders, used by the gradient checker and by unit
/// tests that need schema-valid data without running the task harness.
pub mod synthetic {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    pub fn random_obs(
        spec: &EmbodimentSpec,
        rng: &mut impl Rng,
    ) -> BTreeMap<ObsModality, ObsValue> {
        let schema = ModalitySchema::for_embodiment(spec);
        let mut obs = BTreeMap::new();
        for (m, shape) in &schema.obs {
            if *m == ObsModality::EefToBodyPose {
                continue; // derived
            }
            let v = match shape {
                ObsShape::Image { c, h, w } => {
                    let data: Vec<u8> = (0..c * h * w).map(|_| rng.gen()).collect();
                    ObsValue::Image(Image {
                        c: *c,
                        h: *h,
                        w: *w,
                        data,
                    })
                }
                ObsShape::Vector { dim } => {
                    ObsValue::Vector((0..*dim).map(|_| rng.gen::<f64>() - 0.5).collect())
                }
            };
            obs.insert(*m, v);
        }
        obs
    }

    pub fn random_act(
        spec: &EmbodimentSpec,
        rng: &mut impl Rng,
    ) -> BTreeMap<ActModality, Vec<f64>> {
        let schema = ModalitySchema::for_embodiment(spec);
        schema
            .act
            .iter()
            .map(|(m, dim)| (*m, (0..*dim).map(|_| rng.gen::<f64>() - 0.5).collect()))
            .collect()
    }

    pub fn random_episode(spec: &EmbodimentSpec, seed: u64, frames: usize) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ep = Episode::new(
            spec,
            EpisodeMeta {
                task: "test".into(),
                seed,
                substep_success: vec![true, true],
            },
        );
        for t in 0..frames {
            record_frame(
                &mut ep,
                random_obs(spec, &mut rng),
                random_act(spec, &mut rng),
                t as f64 * 0.05,
            )
            .unwrap();
        }
        ep
    }
}
