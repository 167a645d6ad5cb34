//! Behavioral-cloning objective, the pretrain/finetune procedure, and
//! validation-loss tracking.
//!
//! The total loss is the unweighted sum over available action modalities of
//! the per-modality term: mean over the batch of the mean over valid chunk
//! steps of the mean absolute error over active dimensions. Steps past the
//! episode end and zero-padded dimensions carry zero weight.

use crate::dataset::{normalize_vec, split, Episode, NormStats};
use crate::embodiment::{ActModality, EmbodimentSpec};
use crate::mxt::{forward, save_checkpoint, MxtModel, MxtConfig, ObsBatch};
use crate::nn::{self, add_scalars, backward, gather_grads, AdamW, Scalar, Tensor};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] crate::mxt::CheckpointError),
}

/// Optimization settings. Learning rates and decay follow the reference
/// configuration; steps and chunk size are desk-scale defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub chunk: usize,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub weight_decay: f64,
    pub trunk_dropout_pretrain: f64,
    pub trunk_dropout_finetune: f64,
    pub val_fraction: f64,
    pub val_interval: usize,
    pub val_max_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            steps: 2000,
            chunk: 20,
            lr_pretrain: 1e-4,
            lr_finetune: 5e-5,
            weight_decay: 1e-4,
            trunk_dropout_pretrain: 0.4,
            trunk_dropout_finetune: 0.1,
            val_fraction: 0.10,
            val_interval: 500,
            val_max_samples: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr_pretrain <= 0.0 || self.lr_finetune <= 0.0 {
            return Err(TrainError::InvalidConfig("learning rates must be > 0".into()));
        }
        if self.chunk == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("chunk and batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Per-step loss record.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub step: usize,
    pub embodiment: String,
    pub per_modality: BTreeMap<ActModality, f64>,
    pub total: f64,
}

/// Raw (unnormalized) h-step action labels starting at frame t, with a
/// validity flag per step; steps past the episode end are invalid.
pub fn chunk_label(
    episode: &Episode,
    t: usize,
    h: usize,
) -> (BTreeMap<ActModality, Array2<f64>>, Vec<bool>) {
    let tlen = episode.len();
    assert!(t < tlen, "chunk start out of range");
    let mut labels = BTreeMap::new();
    let validity: Vec<bool> = (0..h).map(|s| t + s < tlen).collect();
    for (m, dim) in &episode.schema.act {
        let mut arr = Array2::zeros((h, *dim));
        for s in 0..h {
            if t + s < tlen {
                let v = &episode.frames[t + s].act[m];
                for d in 0..*dim {
                    arr[[s, d]] = v[d];
                }
            }
        }
        labels.insert(*m, arr);
    }
    (labels, validity)
}

/// Loss weights for one modality over a batch: weight(b, s, d) =
/// valid(b,s) * active(d) / (B * valid_steps(b) * active_dims), so the
/// weighted sum of absolute errors equals the batch/step/dim mean.
pub fn loss_weights(validity: &[Vec<bool>], active: &[bool], h: usize) -> Array2<f64> {
    let b = validity.len();
    let dim = active.len();
    let n_active = active.iter().filter(|&&a| a).count();
    let mut w = Array2::zeros((b * h, dim));
    if n_active == 0 {
        return w;
    }
    for (bi, val) in validity.iter().enumerate() {
        assert_eq!(val.len(), h);
        let vb = val.iter().filter(|&&v| v).count();
        if vb == 0 {
            continue;
        }
        let weight = 1.0 / (b as f64 * vb as f64 * n_active as f64);
        for (s, &ok) in val.iter().enumerate() {
            if !ok {
                continue;
            }
            for (d, &a) in active.iter().enumerate() {
                if a {
                    w[[bi * h + s, d]] = weight;
                }
            }
        }
    }
    w
}

/// One batch's graph: forward, per-modality losses over available action
/// modalities, and the summed total.
pub struct BatchLoss<F: Scalar> {
    pub total: Tensor<F>,
    pub per_modality: BTreeMap<ActModality, f64>,
    pub leafs: Vec<Tensor<F>>,
}

pub fn batch_loss<F: Scalar>(
    model: &MxtModel<F>,
    samples: &[(&Episode, usize)],
    stats: &NormStats,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> BatchLoss<F> {
    assert!(!samples.is_empty());
    let h = model.config.chunk;
    let frames: Vec<&crate::dataset::Frame> =
        samples.iter().map(|(ep, t)| &ep.frames[*t]).collect();
    let obs = ObsBatch::from_frames(&frames, stats);
    let (chunks, leafs) = forward(model, &obs, train, rng);

    let masks = &samples[0].0.masks;
    let mut labels: BTreeMap<ActModality, Array2<f64>> = BTreeMap::new();
    let mut validity: Vec<Vec<bool>> = Vec::with_capacity(samples.len());
    for (ep, t) in samples {
        let (lab, val) = chunk_label(ep, *t, h);
        validity.push(val);
        for (m, arr) in lab {
            let acc = labels
                .entry(m)
                .or_insert_with(|| Array2::zeros((samples.len() * h, arr.dim().1)));
            let b = validity.len() - 1;
            for s in 0..h {
                for d in 0..arr.dim().1 {
                    acc[[b * h + s, d]] = arr[[s, d]];
                }
            }
        }
    }

    let mut per_modality = BTreeMap::new();
    let mut terms = Vec::new();
    for m in ActModality::ALL {
        if !masks.act_mask.get(&m).copied().unwrap_or(false) {
            continue;
        }
        let raw = &labels[&m];
        let mstats = &stats.act[&m];
        let mut norm = Array2::from_elem(raw.dim(), F::ZERO);
        for r in 0..raw.dim().0 {
            let row: Vec<f64> = raw.row(r).to_vec();
            for (d, x) in normalize_vec(&row, mstats).iter().enumerate() {
                norm[[r, d]] = F::from_f64(*x);
            }
        }
        let active = &masks.act_active_dims[&m];
        let w64 = loss_weights(&validity, active, h);
        let w = w64.mapv(F::from_f64);
        let term = nn::weighted_l1(&chunks[&m], &norm, &w);
        per_modality.insert(m, term.value()[[0, 0]].to_f64());
        terms.push(term);
    }
    let total = add_scalars(&terms);
    BatchLoss {
        total,
        per_modality,
        leafs,
    }
}

/// Deterministic mean loss over a validation set, dropout off. Chunk starts
/// are strided so at most `val_max_samples` are evaluated.
pub fn validate<F: Scalar>(
    model: &MxtModel<F>,
    episodes: &[&Episode],
    stats: &NormStats,
    cfg: &TrainConfig,
) -> f64 {
    let mut pairs: Vec<(&Episode, usize)> = Vec::new();
    for ep in episodes {
        for t in 0..ep.len() {
            pairs.push((ep, t));
        }
    }
    assert!(!pairs.is_empty(), "empty validation set");
    let stride = pairs.len().div_ceil(cfg.val_max_samples);
    let picked: Vec<(&Episode, usize)> = pairs.into_iter().step_by(stride).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused with dropout off
    let mut sum = 0.0;
    let mut n = 0usize;
    for chunk in picked.chunks(cfg.batch_size) {
        let bl = batch_loss(model, chunk, stats, false, &mut rng);
        sum += bl.total.value()[[0, 0]].to_f64() * chunk.len() as f64;
        n += chunk.len();
    }
    sum / n as f64
}

/// One optimization pass over a fixed dataset at the given learning rate and
/// trunk dropout; tracks the best validation loss and optionally writes a
/// checkpoint whenever it improves.
pub struct TrainOutcome {
    pub history: Vec<LossReport>,
    pub best_val: f64,
    pub best_step: usize,
    pub initial_val: f64,
}

fn dropout_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (step as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15))
}

#[allow(clippy::too_many_arguments)]
pub fn train<F: Scalar>(
    model: &mut MxtModel<F>,
    episodes: &[Episode],
    stats: &NormStats,
    cfg: &TrainConfig,
    lr: f64,
    trunk_dropout: f64,
    ckpt_out: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if episodes.is_empty() || episodes.iter().all(|e| e.is_empty()) {
        return Err(TrainError::EmptyDataset);
    }
    model.config.trunk_dropout = trunk_dropout;
    model.config.chunk = cfg.chunk;

    let (train_idx, val_idx) = split(episodes.len(), cfg.val_fraction, cfg.seed)
        .map_err(|_| TrainError::EmptyDataset)?;
    let train_eps: Vec<&Episode> = train_idx
        .iter()
        .map(|&i| &episodes[i])
        .filter(|e| !e.is_empty())
        .collect();
    let val_eps: Vec<&Episode> = val_idx
        .iter()
        .map(|&i| &episodes[i])
        .filter(|e| !e.is_empty())
        .collect();
    if train_eps.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let mut opt = AdamW::new(&model.store, lr, cfg.weight_decay);
    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut history = Vec::with_capacity(cfg.steps);
    let initial_val = validate(model, &val_eps, stats, cfg);
    let mut best_val = initial_val;
    let mut best_step = 0;

    for step in 0..cfg.steps {
        let samples: Vec<(&Episode, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let ep = train_eps[sampler.gen_range(0..train_eps.len())];
                (ep, sampler.gen_range(0..ep.len()))
            })
            .collect();
        let mut drng = dropout_rng(cfg.seed, step);
        let bl = batch_loss(model, &samples, stats, true, &mut drng);
        backward(&bl.total);
        let grads = gather_grads(&model.store, &bl.leafs);
        opt.step(&mut model.store, &grads);
        history.push(LossReport {
            step,
            embodiment: model.spec.name.clone(),
            total: bl.total.value()[[0, 0]].to_f64(),
            per_modality: bl.per_modality,
        });

        if (step + 1) % cfg.val_interval == 0 || step + 1 == cfg.steps {
            let v = validate(model, &val_eps, stats, cfg);
            if v < best_val {
                best_val = v;
                best_step = step + 1;
                if let Some(path) = ckpt_out {
                    save_checkpoint(path, model, Some(stats))?;
                }
            }
        }
    }
    // Guarantee a checkpoint exists even if validation never improved.
    if let Some(path) = ckpt_out {
        if !path.exists() {
            save_checkpoint(path, model, Some(stats))?;
        }
    }
    Ok(TrainOutcome {
        history,
        best_val,
        best_step,
        initial_val,
    })
}

/// Joint pretraining over one or more source-embodiment datasets with a
/// shared trunk; batches interleave embodiments round-robin. Returns the
/// shared store wrapped as a model view per embodiment plus the histories.
pub struct PretrainOutcome<F: Scalar> {
    pub views: Vec<MxtModel<F>>,
    pub history: Vec<LossReport>,
    pub best_val: f64,
    pub best_step: usize,
    pub initial_val: f64,
}

pub fn pretrain<F: Scalar>(
    config: &MxtConfig,
    datasets: &[(EmbodimentSpec, Vec<Episode>, NormStats)],
    cfg: &TrainConfig,
    ckpt_out: Option<&Path>,
) -> Result<PretrainOutcome<F>, TrainError> {
    cfg.validate()?;
    if datasets.is_empty() || datasets.iter().any(|(_, eps, _)| eps.is_empty()) {
        return Err(TrainError::EmptyDataset);
    }
    let mut mcfg = config.clone();
    mcfg.trunk_dropout = cfg.trunk_dropout_pretrain;
    mcfg.chunk = cfg.chunk;
    let specs: Vec<EmbodimentSpec> = datasets.iter().map(|(s, _, _)| s.clone()).collect();
    let (mut store, prefixes) = MxtModel::<F>::build_shared(mcfg.clone(), &specs, cfg.seed);
    let mut views: Vec<MxtModel<F>> = specs
        .iter()
        .zip(&prefixes)
        .map(|(spec, prefix)| MxtModel {
            config: mcfg.clone(),
            spec: spec.clone(),
            store: crate::nn::ParamStore::new(),
            prefix: prefix.clone(),
        })
        .collect();

    // Per-dataset train/val splits.
    let mut train_sets: Vec<Vec<&Episode>> = Vec::new();
    let mut val_sets: Vec<Vec<&Episode>> = Vec::new();
    for (_, eps, _) in datasets {
        let (ti, vi) = split(eps.len(), cfg.val_fraction, cfg.seed)
            .map_err(|_| TrainError::EmptyDataset)?;
        train_sets.push(ti.iter().map(|&i| &eps[i]).collect());
        val_sets.push(vi.iter().map(|&i| &eps[i]).collect());
    }
    if train_sets.iter().any(|t| t.is_empty()) {
        return Err(TrainError::EmptyDataset);
    }

    let validate_all = |store: &mut ParamStoreSlot<F>, views: &mut [MxtModel<F>]| -> f64 {
        let mut sum = 0.0;
        for (k, (_, _, stats)) in datasets.iter().enumerate() {
            store.lend(&mut views[k]);
            sum += validate(&views[k], &val_sets[k], stats, cfg);
            store.reclaim(&mut views[k]);
        }
        sum / datasets.len() as f64
    };

    let mut store_slot = ParamStoreSlot { store: std::mem::take(&mut store) };
    let mut opt = AdamW::new(&store_slot.store, cfg.lr_pretrain, cfg.weight_decay);
    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut history = Vec::with_capacity(cfg.steps);
    let initial_val = validate_all(&mut store_slot, &mut views);
    let mut best_val = initial_val;
    let mut best_step = 0;

    for step in 0..cfg.steps {
        let k = step % datasets.len();
        let (_, _, stats) = &datasets[k];
        let samples: Vec<(&Episode, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let ep = train_sets[k][sampler.gen_range(0..train_sets[k].len())];
                (ep, sampler.gen_range(0..ep.len()))
            })
            .collect();
        let mut drng = dropout_rng(cfg.seed, step);
        store_slot.lend(&mut views[k]);
        let bl = batch_loss(&views[k], &samples, stats, true, &mut drng);
        backward(&bl.total);
        let grads = gather_grads(&views[k].store, &bl.leafs);
        store_slot.reclaim(&mut views[k]);
        opt.step(&mut store_slot.store, &grads);
        history.push(LossReport {
            step,
            embodiment: specs[k].name.clone(),
            total: bl.total.value()[[0, 0]].to_f64(),
            per_modality: bl.per_modality,
        });

        if (step + 1) % cfg.val_interval == 0 || step + 1 == cfg.steps {
            let v = validate_all(&mut store_slot, &mut views);
            if v < best_val {
                best_val = v;
                best_step = step + 1;
                if let Some(path) = ckpt_out {
                    store_slot.lend(&mut views[0]);
                    save_checkpoint(path, &views[0], None)?;
                    store_slot.reclaim(&mut views[0]);
                }
            }
        }
    }
    store_slot.lend(&mut views[0]);
    if let Some(path) = ckpt_out {
        if !path.exists() {
            save_checkpoint(path, &views[0], None)?;
        }
    }
    // Leave the store with view 0 so callers can read trunk weights.
    Ok(PretrainOutcome {
        views,
        history,
        best_val,
        best_step,
        initial_val,
    })
}

/// Moves the single shared store in and out of per-embodiment views.
struct ParamStoreSlot<F: Scalar> {
    store: crate::nn::ParamStore<F>,
}

impl<F: Scalar> ParamStoreSlot<F> {
    fn lend(&mut self, view: &mut MxtModel<F>) {
        std::mem::swap(&mut self.store, &mut view.store);
    }
    fn reclaim(&mut self, view: &mut MxtModel<F>) {
        std::mem::swap(&mut self.store, &mut view.store);
    }
}

/// Write the loss history as CSV: step, embodiment, total, one column per
/// action modality.
pub fn write_loss_history(path: &Path, history: &[LossReport]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,embodiment,total,body_pose,eef_pose,gripper_action")?;
    for r in history {
        let cell = |m: ActModality| {
            r.per_modality
                .get(&m)
                .map(|v| format!("{v:.9}"))
                .unwrap_or_default()
        };
        writeln!(
            f,
            "{},{},{:.9},{},{},{}",
            r.step,
            r.embodiment,
            r.total,
            cell(ActModality::BodyPose),
            cell(ActModality::EefPose),
            cell(ActModality::GripperAction),
        )?;
    }
    Ok(())
}
