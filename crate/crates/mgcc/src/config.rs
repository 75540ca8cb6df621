//! Configuration for all model, training, grounding, and render settings.
//!
//! Defaults are the desk-scale configuration; `paper_scale()` documents the
//! published sizes (they are not runnable here without the real pretrained
//! components).

use crate::error::{MgccError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MgccConfig {
    /// Global seed; every component derives its own stream from this.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub grounding: GroundingConfig,
    pub render: RenderConfig,
    /// Visual encoder selection: "toy" (seeded projection) or "external"
    /// (a plugin registered by the embedding application).
    pub visual_encoder: String,
    /// Target text encoder selection: "toy" or "external".
    pub target_encoder: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Visual embedding width d.
    pub d: usize,
    /// Backbone hidden width e.
    pub e: usize,
    /// Visual tokens per image k.
    pub k: usize,
    /// Learned image tokens n.
    pub n: usize,
    /// Base vocabulary size (byte tokenizer); image tokens occupy the top
    /// n slots of the extended id space.
    pub base_vocab: usize,
    pub backbone_layers: usize,
    pub backbone_heads: usize,
    /// Refinement stack depth N.
    pub cmrm_layers: usize,
    /// Query projection width p used in the attention scaling.
    pub cmrm_proj_width: usize,
    /// Refinement feed-forward depth: 1 = single linear map, 2 = two-layer
    /// with a smooth nonlinearity between.
    pub cmrm_ffn_depth: usize,
    /// Mapper internal width m.
    pub mapper_width: usize,
    /// Mapper encoder/decoder heads.
    pub mapper_heads: usize,
    /// Learnable query count L (the generator's conditioning row count).
    pub queries: usize,
    /// Conditioning width c.
    pub conditioning_width: usize,
    /// Toy visual encoder input size (square, grayscale by default).
    pub image_size: usize,
    pub image_channels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lambda_ce: f64,
    pub lambda_mse: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Synthetic dataset used by `mgcc train`.
    pub dataset_count: usize,
    pub dataset_seed: u64,
    pub max_story_len: usize,
    /// Checkpoint output directory.
    pub out_dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GroundingConfig {
    /// Layout canvas in pixels.
    pub canvas_width: u32,
    pub canvas_height: u32,
    /// In-context examples included in each prompt.
    pub example_count: usize,
    /// Path to an example bank file; empty means the built-in bank.
    pub examples_path: String,
    /// Re-query attempts on malformed completions.
    pub max_attempts: usize,
    pub client: ClientConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    /// "scripted" or "remote".
    pub kind: String,
    /// Scripted transcript file (JSON); used when kind = "scripted".
    pub transcript: String,
    /// Remote endpoint URL; used when kind = "remote".
    pub endpoint: String,
    pub timeout_secs: u64,
    pub max_retries: usize,
    /// Initial backoff delay; doubles per retry.
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub width: u32,
    pub height: u32,
}

impl Default for MgccConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            grounding: GroundingConfig::default(),
            render: RenderConfig::default(),
            visual_encoder: "toy".to_string(),
            target_encoder: "toy".to_string(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 16,
            e: 32,
            k: 4,
            n: 8,
            base_vocab: 256,
            backbone_layers: 2,
            backbone_heads: 4,
            cmrm_layers: 4,
            cmrm_proj_width: 32,
            cmrm_ffn_depth: 1,
            mapper_width: 32,
            mapper_heads: 4,
            queries: 8,
            conditioning_width: 16,
            image_size: 8,
            image_channels: 1,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-8,
            lambda_ce: 1.0,
            lambda_mse: 1.0,
            steps: 500,
            batch_size: 32,
            dataset_count: 32,
            dataset_seed: 33,
            max_story_len: 3,
            out_dir: "ckpt".to_string(),
        }
    }
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            canvas_width: 512,
            canvas_height: 512,
            example_count: 5,
            examples_path: String::new(),
            max_attempts: 3,
            client: ClientConfig::default(),
        }
    }
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            kind: "scripted".to_string(),
            transcript: String::new(),
            endpoint: String::new(),
            timeout_secs: 30,
            max_retries: 3,
            backoff_ms: 100,
            max_in_flight: 1,
        }
    }
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
        }
    }
}

impl MgccConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: MgccConfig =
            toml::from_str(&text).map_err(|e| MgccError::Config(format!("{path:?}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        for (name, v) in [
            ("d", m.d),
            ("e", m.e),
            ("k", m.k),
            ("n", m.n),
            ("base_vocab", m.base_vocab),
            ("backbone_heads", m.backbone_heads),
            ("cmrm_proj_width", m.cmrm_proj_width),
            ("mapper_width", m.mapper_width),
            ("mapper_heads", m.mapper_heads),
            ("queries", m.queries),
            ("conditioning_width", m.conditioning_width),
            ("image_size", m.image_size),
            ("image_channels", m.image_channels),
        ] {
            if v == 0 {
                return Err(MgccError::Config(format!("model.{name} must be positive")));
            }
        }
        if m.e % m.backbone_heads != 0 {
            return Err(MgccError::Config(format!(
                "e ({}) must divide evenly into backbone heads ({})",
                m.e, m.backbone_heads
            )));
        }
        if m.mapper_width % m.mapper_heads != 0 {
            return Err(MgccError::Config(format!(
                "mapper_width ({}) must divide evenly into mapper heads ({})",
                m.mapper_width, m.mapper_heads
            )));
        }
        if !(1..=2).contains(&m.cmrm_ffn_depth) {
            return Err(MgccError::Config(
                "cmrm_ffn_depth must be 1 or 2".to_string(),
            ));
        }
        match self.visual_encoder.as_str() {
            "toy" | "external" => {}
            other => {
                return Err(MgccError::Config(format!(
                    "visual_encoder must be \"toy\" or \"external\", got {other:?}"
                )))
            }
        }
        match self.target_encoder.as_str() {
            "toy" | "external" => {}
            other => {
                return Err(MgccError::Config(format!(
                    "target_encoder must be \"toy\" or \"external\", got {other:?}"
                )))
            }
        }
        match self.grounding.client.kind.as_str() {
            "scripted" | "remote" => {}
            other => {
                return Err(MgccError::Config(format!(
                    "client kind must be \"scripted\" or \"remote\", got {other:?}"
                )))
            }
        }
        if self.grounding.canvas_width == 0 || self.grounding.canvas_height == 0 {
            return Err(MgccError::Config("canvas must be positive".to_string()));
        }
        if self.grounding.max_attempts == 0 {
            return Err(MgccError::Config("max_attempts must be ≥ 1".to_string()));
        }
        Ok(())
    }

    /// The published configuration, for reference: OPT-6.7B width, CLIP ViT-L
    /// embedding width, and the 512-wide mapper. Not runnable at desk scale.
    pub fn paper_scale() -> Self {
        let mut cfg = Self::default();
        cfg.model.d = 768;
        cfg.model.e = 4096;
        cfg.model.mapper_width = 512;
        cfg.model.conditioning_width = 768;
        cfg
    }
}
