//! Modular transformer policy: embodiment-specific tokenizers and
//! detokenizers around a shared encoder-decoder trunk, plus the aggregated
//! single-tokenizer ablation variant.
//!
//! Token slot order is fixed across embodiments: main_image, wrist_image,
//! body_pose, eef_pose, eef_to_body_pose, gripper_state. Absent modalities
//! occupy their slots as zero dummy tokens that are blocked as attention keys
//! everywhere, so their values can never influence an output.

mod checkpoint;
mod model;

pub use checkpoint::{
    load_checkpoint, model_from_checkpoint, save_checkpoint, Checkpoint, CheckpointError,
};
pub use model::{
    forward, forward_from_tokens, reinit_for_embodiment, tokenize_all, MxtModel, ObsBatch,
};

use crate::embodiment::{ActModality, ObsModality};
use serde::{Deserialize, Serialize};

/// Side length of rendered images; the conv stack downsamples by 8 to a
/// grid of feature cells.
pub const IMAGE_SIDE: usize = 32;
pub const GRID_SIDE: usize = 4;
pub const GRID_CELLS: usize = GRID_SIDE * GRID_SIDE;

/// Architecture hyperparameters. Defaults match the reference configuration;
/// `tiny` is the gradcheck configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MxtConfig {
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub trunk_heads: usize,
    pub feedforward: usize,
    pub trunk_dropout: f64,
    pub tokenizer_heads: usize,
    pub tokenizer_head_dim: usize,
    pub tokenizer_mlp: Vec<usize>,
    pub tokenizer_dropout: f64,
    pub main_image_tokens: usize,
    pub wrist_image_tokens: usize,
    pub proprio_tokens: usize,
    pub detok_tokens: usize,
    pub detok_heads: usize,
    pub detok_head_dim: usize,
    pub detok_dropout: f64,
    pub conv_channels: [usize; 2],
    pub chunk: usize,
    /// Aggregated ablation: one visual tokenizer, one proprio tokenizer, one
    /// detokenizer over the concatenated action vector.
    pub agg: bool,
}

impl Default for MxtConfig {
    fn default() -> Self {
        MxtConfig {
            hidden: 128,
            encoder_layers: 4,
            decoder_layers: 4,
            trunk_heads: 16,
            feedforward: 256,
            trunk_dropout: 0.1,
            tokenizer_heads: 4,
            tokenizer_head_dim: 32,
            tokenizer_mlp: vec![128, 128],
            tokenizer_dropout: 0.1,
            main_image_tokens: 16,
            wrist_image_tokens: 8,
            proprio_tokens: 4,
            detok_tokens: 6,
            detok_heads: 4,
            detok_head_dim: 16,
            detok_dropout: 0.1,
            conv_channels: [16, 32],
            chunk: 20,
            agg: false,
        }
    }
}

impl MxtConfig {
    /// Gradcheck-sized configuration: hidden 16, one encoder and one decoder
    /// layer, 2-token tokenizers.
    pub fn tiny(chunk: usize) -> Self {
        MxtConfig {
            hidden: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            trunk_heads: 2,
            feedforward: 32,
            trunk_dropout: 0.0,
            tokenizer_heads: 2,
            tokenizer_head_dim: 8,
            tokenizer_mlp: vec![16, 16],
            tokenizer_dropout: 0.0,
            main_image_tokens: 2,
            wrist_image_tokens: 2,
            proprio_tokens: 2,
            detok_tokens: 2,
            detok_heads: 2,
            detok_head_dim: 8,
            detok_dropout: 0.0,
            conv_channels: [4, 8],
            chunk,
            agg: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.hidden == 0 || self.hidden % self.trunk_heads != 0 {
            return Err("hidden must be a positive multiple of trunk_heads".into());
        }
        for (name, t) in [
            ("main_image_tokens", self.main_image_tokens),
            ("wrist_image_tokens", self.wrist_image_tokens),
            ("proprio_tokens", self.proprio_tokens),
            ("detok_tokens", self.detok_tokens),
        ] {
            if t == 0 {
                return Err(format!("{name} must be >= 1"));
            }
        }
        if self.chunk == 0 {
            return Err("chunk must be >= 1".into());
        }
        Ok(())
    }

    /// Slot width for one observation modality in the trunk input sequence.
    pub fn obs_tokens(&self, m: ObsModality) -> usize {
        match m {
            ObsModality::MainImage => self.main_image_tokens,
            ObsModality::WristImage => self.wrist_image_tokens,
            _ => self.proprio_tokens,
        }
    }

    /// Trunk input length: fixed slots for every modality (present or dummy)
    /// in the standard architecture, two groups in the aggregated variant.
    pub fn trunk_input_len(&self) -> usize {
        if self.agg {
            self.main_image_tokens + self.proprio_tokens
        } else {
            ObsModality::ALL.iter().map(|&m| self.obs_tokens(m)).sum()
        }
    }

    /// Trunk output length: one slice of latent action tokens per
    /// detokenizer.
    pub fn trunk_output_len(&self) -> usize {
        if self.agg {
            self.detok_tokens
        } else {
            ActModality::ALL.len() * self.detok_tokens
        }
    }

    /// Token range of an observation modality's slot in the standard layout.
    pub fn obs_slot(&self, m: ObsModality) -> std::ops::Range<usize> {
        assert!(!self.agg, "slot layout applies to the standard variant");
        let mut start = 0;
        for &o in ObsModality::ALL.iter() {
            if o == m {
                return start..start + self.obs_tokens(m);
            }
            start += self.obs_tokens(o);
        }
        unreachable!()
    }

    /// Token range of an action modality's latent slice in the trunk output.
    pub fn act_slot(&self, m: ActModality) -> std::ops::Range<usize> {
        assert!(!self.agg);
        let i = ActModality::ALL.iter().position(|&a| a == m).unwrap();
        i * self.detok_tokens..(i + 1) * self.detok_tokens
    }

    /// Total action width of the aggregated detokenizer.
    pub fn agg_action_dim(&self) -> usize {
        ActModality::ALL.iter().map(|m| m.dim()).sum()
    }
}
