//! Orchestration: trainable parameter groups, the Adam trainer, synthetic
//! data, checkpoints, the mock grounded generator, and end-to-end
//! generation.

mod adam;
mod checkpoint;
mod generate;
mod params;
mod render;
mod story;
mod synth;
mod trainer;

pub use adam::OptimizerState;
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointManifest, OptimizerMeta, TensorRecord, BLOB_FILE,
    MANIFEST_FILE,
};
pub use generate::{
    conditioning_to_json, generate_image, GenerateOptions, GenerationArtifacts, GenerationError,
};
pub use params::{StagedParams, TrainableParams};
pub use render::{
    label_color, rasterize_layout, scale_box, GeneratorBackend, ImageGenerator, MockGenerator,
};
pub use story::{load_story_file, save_story_file, StoryFile};
pub use synth::{make_synthetic_dataset, SynthSettings, SyntheticStory, OBJECT_VOCABULARY};
pub use trainer::{
    example_loss_and_grads, example_loss_graph, training_step, FrozenStack, LossReport,
    TrainExample,
};

use crate::config::MgccConfig;

/// Reduced configuration for 64-bit gradient checking: small enough that
/// central finite differences over every trainable element finish quickly,
/// while exercising every module (multi-layer backbone attention, a stacked
/// refinement module, the full 4+4 mapper).
pub fn gradcheck_config() -> MgccConfig {
    let mut cfg = MgccConfig::default();
    cfg.seed = 1234;
    cfg.model.d = 4;
    cfg.model.e = 4;
    cfg.model.k = 2;
    cfg.model.n = 2;
    cfg.model.backbone_layers = 1;
    cfg.model.backbone_heads = 2;
    cfg.model.cmrm_layers = 2;
    cfg.model.cmrm_proj_width = 4;
    cfg.model.cmrm_ffn_depth = 1;
    cfg.model.mapper_width = 8;
    cfg.model.mapper_heads = 2;
    cfg.model.queries = 2;
    cfg.model.conditioning_width = 4;
    cfg.model.image_size = 4;
    cfg.model.image_channels = 1;
    cfg
}
