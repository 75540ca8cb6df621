//! End-to-end generation: backbone → refinement → mapper for conditioning,
//! grounding for the layout, then the generator backend for pixels.

use super::params::TrainableParams;
use super::render::GeneratorBackend;
use super::trainer::FrozenStack;
use crate::backbone::{build_interleaved_sequence, forward_hidden_states, StoryExample};
use crate::error::{MgccError, Result};
use crate::grounding::{generate_layout, CompletionClient, InContextExample, Layout};
use crate::mapper::map_to_conditioning;
use crate::pixels::PixelImage;
use crate::refinement::refine_stack;
use crate::{FeatureMatrix, Real};

/// Everything a generation run produces.
#[derive(Debug, Clone)]
pub struct GenerationArtifacts<F: Real> {
    pub image: PixelImage,
    pub layout: Layout,
    pub conditioning: FeatureMatrix<F>,
}

/// Generation settings for one run.
pub struct GenerateOptions<'a> {
    pub client: Option<&'a CompletionClient>,
    pub examples: &'a [InContextExample],
    pub canvas: (u32, u32),
    pub max_attempts: usize,
    pub seed: u64,
    /// With grounding disabled the generator receives no layout and renders
    /// from conditioning alone.
    pub use_grounding: bool,
}

/// A generation failure with whatever was computed before the failing
/// stage, so callers can inspect partial progress.
#[derive(Debug)]
pub struct GenerationError<F: Real> {
    pub error: MgccError,
    pub conditioning: Option<FeatureMatrix<F>>,
}

impl<F: Real> std::fmt::Display for GenerationError<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl<F: Real> From<MgccError> for GenerationError<F> {
    fn from(error: MgccError) -> Self {
        Self {
            error,
            conditioning: None,
        }
    }
}

/// Run the full generation flow for a story. Deterministic given (story,
/// params, client transcript, seed).
pub fn generate_image<F: Real>(
    story: &StoryExample,
    params: &TrainableParams<F>,
    frozen: &FrozenStack<F>,
    backend: &GeneratorBackend<F>,
    options: &GenerateOptions<'_>,
) -> std::result::Result<GenerationArtifacts<F>, GenerationError<F>> {
    let (seq, mask) = build_interleaved_sequence(
        story,
        &frozen.backbone,
        &params.h_cap,
        &params.emd,
        frozen.visual_encoder.as_ref(),
    )?;
    let f_mm = forward_hidden_states(&seq, &frozen.backbone)?;
    let refined = refine_stack(&f_mm, &mask, &params.cmrm)?;
    let conditioning = map_to_conditioning(&refined, &params.queries, &params.mapper)?;

    let layout = if options.use_grounding {
        let client = options.client.ok_or_else(|| GenerationError {
            error: MgccError::Config(
                "grounding is enabled but no completion client is configured".into(),
            ),
            conditioning: Some(conditioning.clone()),
        })?;
        let captions = story.captions();
        match generate_layout(
            &captions,
            client,
            options.examples,
            options.canvas,
            options.max_attempts,
        ) {
            Ok(layout) => layout,
            Err(error) => {
                return Err(GenerationError {
                    error,
                    conditioning: Some(conditioning),
                })
            }
        }
    } else {
        Layout::empty(options.canvas)
    };

    let layout_for_render = options.use_grounding.then_some(&layout);
    let image = backend
        .generate(&conditioning, layout_for_render, options.seed)
        .map_err(|error| GenerationError {
            error,
            conditioning: Some(conditioning.clone()),
        })?;

    Ok(GenerationArtifacts {
        image,
        layout,
        conditioning,
    })
}

/// Serialize a conditioning matrix as JSON with exact f32 values.
pub fn conditioning_to_json<F: Real>(m: &FeatureMatrix<F>) -> String {
    #[derive(serde::Serialize)]
    struct Dump {
        rows: usize,
        cols: usize,
        data: Vec<f32>,
    }
    serde_json::to_string(&Dump {
        rows: m.nrows(),
        cols: m.ncols(),
        data: m.iter().map(|&v| v.to_f64() as f32).collect(),
    })
    .expect("conditioning serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MgccConfig;
    use crate::grounding::ScriptedClient;
    use crate::pipeline::render::MockGenerator;

    fn tiny_config() -> MgccConfig {
        let mut cfg = MgccConfig::default();
        cfg.model.d = 4;
        cfg.model.e = 8;
        cfg.model.k = 2;
        cfg.model.n = 2;
        cfg.model.backbone_layers = 1;
        cfg.model.backbone_heads = 2;
        cfg.model.cmrm_layers = 1;
        cfg.model.cmrm_proj_width = 8;
        cfg.model.mapper_width = 8;
        cfg.model.mapper_heads = 2;
        cfg.model.queries = 2;
        cfg.model.conditioning_width = 4;
        cfg.model.image_size = 4;
        cfg
    }

    fn scripted(completion: &str) -> CompletionClient {
        let mut c = ScriptedClient::new();
        c.register_default(vec![completion.to_string()]);
        CompletionClient::Scripted(c)
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let cfg = tiny_config();
        let frozen = FrozenStack::<f32>::from_config(&cfg).unwrap();
        let params = TrainableParams::<f32>::init(&cfg.model, 5);
        let backend = GeneratorBackend::Mock(MockGenerator::new(32, 32));
        let story = StoryExample::from_captions(vec!["A car on the road.".into()]).unwrap();
        let run = || {
            let client = scripted("Objects: [('a car', [100, 100, 50, 50])]");
            let options = GenerateOptions {
                client: Some(&client),
                examples: &[],
                canvas: (512, 512),
                max_attempts: 3,
                seed: 11,
                use_grounding: true,
            };
            generate_image(&story, &params, &frozen, &backend, &options).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.image, b.image);
        assert_eq!(a.layout, b.layout);
        assert_eq!(a.conditioning, b.conditioning);
    }

    #[test]
    fn captions_only_story_generates() {
        let cfg = tiny_config();
        let frozen = FrozenStack::<f32>::from_config(&cfg).unwrap();
        let params = TrainableParams::<f32>::init(&cfg.model, 5);
        let backend = GeneratorBackend::Mock(MockGenerator::new(16, 16));
        // Five captions, no images: the longest captions-only input shape.
        let captions: Vec<String> = (1..=5).map(|i| format!("Caption number {i}.")).collect();
        let story = StoryExample::from_captions(captions).unwrap();
        let client = scripted("Objects: []");
        let options = GenerateOptions {
            client: Some(&client),
            examples: &[],
            canvas: (512, 512),
            max_attempts: 1,
            seed: 0,
            use_grounding: true,
        };
        let artifacts = generate_image(&story, &params, &frozen, &backend, &options).unwrap();
        assert_eq!(artifacts.conditioning.dim(), (2, 4));
        assert!(artifacts.layout.objects.is_empty());
    }

    #[test]
    fn grounding_failure_attaches_partial_conditioning() {
        let cfg = tiny_config();
        let frozen = FrozenStack::<f32>::from_config(&cfg).unwrap();
        let params = TrainableParams::<f32>::init(&cfg.model, 5);
        let backend = GeneratorBackend::Mock(MockGenerator::new(16, 16));
        let story = StoryExample::from_captions(vec!["A story.".into()]).unwrap();
        let client = scripted("never a layout");
        let options = GenerateOptions {
            client: Some(&client),
            examples: &[],
            canvas: (512, 512),
            max_attempts: 2,
            seed: 0,
            use_grounding: true,
        };
        let err = generate_image(&story, &params, &frozen, &backend, &options).unwrap_err();
        assert!(matches!(err.error, MgccError::Grounding { .. }));
        assert!(err.conditioning.is_some(), "partial outputs must attach");
    }

    #[test]
    fn disabled_grounding_renders_background_only() {
        let cfg = tiny_config();
        let frozen = FrozenStack::<f32>::from_config(&cfg).unwrap();
        let params = TrainableParams::<f32>::init(&cfg.model, 5);
        let backend = GeneratorBackend::Mock(MockGenerator::new(16, 16));
        let story = StoryExample::from_captions(vec!["A car.".into()]).unwrap();
        let options = GenerateOptions {
            client: None,
            examples: &[],
            canvas: (512, 512),
            max_attempts: 1,
            seed: 4,
            use_grounding: false,
        };
        let artifacts = generate_image(&story, &params, &frozen, &backend, &options).unwrap();
        assert!(artifacts.layout.objects.is_empty());
        // Uniform background: every pixel equals the first.
        let first = artifacts.image.pixel(0, 0).to_vec();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(artifacts.image.pixel(x, y), &first[..]);
            }
        }
    }
}
