//! Synthetic story generation: templated captions naming objects, layouts
//! valid by construction, and procedurally rendered images.

use super::render::{label_color, scale_box};
use crate::backbone::StoryExample;
use crate::error::{MgccError, Result};
use crate::exec;
use crate::grounding::{BoundingBox, Layout, LayoutObject};
use crate::pixels::PixelImage;
use crate::util::{derive_seed, rng_from_seed};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Object vocabulary; labels are chosen to never be substrings of each
/// other so text-containment checks are exact.
pub const OBJECT_VOCABULARY: [&str; 6] = [
    "a box", "a ball", "a tree", "a house", "a car", "a star",
];

/// One synthetic example: templated captions, per-step images, the full
/// target layout, and the rendered target image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStory {
    pub captions: Vec<String>,
    pub images: Vec<PixelImage>,
    pub target_layout: Layout,
    pub target_image: PixelImage,
}

impl SyntheticStory {
    /// Interleaved story view: caption i followed by image i, final caption
    /// last. The target image is not part of the input sequence.
    pub fn story_example(&self) -> Result<StoryExample> {
        StoryExample::interleaved(self.captions.clone(), self.images.clone())
    }

    pub fn final_caption(&self) -> &str {
        self.captions.last().expect("stories have captions")
    }
}

/// Geometry and canvas settings for synthesis.
#[derive(Debug, Clone, Copy)]
pub struct SynthSettings {
    pub canvas: (u32, u32),
    /// Story images are rendered at this size with this channel count, so
    /// they match the visual encoder's expected input.
    pub image_size: u32,
    pub image_channels: u32,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            canvas: (512, 512),
            image_size: 8,
            image_channels: 1,
        }
    }
}

fn render_objects(
    objects: &[LayoutObject],
    canvas: (u32, u32),
    size: u32,
    channels: u32,
) -> PixelImage {
    let mut img = PixelImage::filled(size, size, channels, 16);
    for obj in objects {
        let rgb = label_color(&obj.label);
        let color: Vec<u8> = (0..channels as usize).map(|i| rgb[i % 3]).collect();
        let (x, y, w, h) = scale_box(&obj.bbox, canvas, (size, size));
        img.fill_rect(x, y, w, h, &color);
    }
    img
}

fn count_word(count: usize) -> &'static str {
    match count {
        1 => "one",
        2 => "two",
        _ => "three",
    }
}

fn generate_story(seed: u64, index: usize, max_story_len: usize, s: SynthSettings) -> SyntheticStory {
    let mut rng = rng_from_seed(derive_seed(seed, &format!("synth-{index}")));
    let story_len = rng.random_range(1..=max_story_len);
    let (cw, ch) = s.canvas;

    let mut captions = Vec::new();
    let mut images = Vec::new();
    let mut objects: Vec<LayoutObject> = Vec::new();
    let mut available: Vec<&str> = OBJECT_VOCABULARY.to_vec();

    for step in 0..story_len {
        let picks = if available.len() >= 2 && rng.random_bool(0.4) {
            2
        } else {
            1
        };
        let mut phrases = Vec::new();
        for _ in 0..picks.min(available.len()) {
            let label = available.remove(rng.random_range(0..available.len()));
            let count = rng.random_range(1..=3usize);
            phrases.push(format!("{} {}", count_word(count), label));
            for _ in 0..count {
                let w = rng.random_range(40..=120i64);
                let h = rng.random_range(40..=120i64);
                let x = rng.random_range(0..=(cw as i64 - w));
                let y = rng.random_range(0..=(ch as i64 - h));
                objects.push(LayoutObject {
                    label: label.to_string(),
                    bbox: BoundingBox::new(x, y, w, h),
                });
            }
        }
        let caption = format!("Frame {}: the scene shows {}.", step + 1, phrases.join(" and "));
        captions.push(caption);
        if step + 1 < story_len {
            // Each intermediate image shows the scene accumulated so far.
            images.push(render_objects(
                &objects,
                s.canvas,
                s.image_size,
                s.image_channels,
            ));
        }
    }

    let target_layout = Layout {
        canvas: s.canvas,
        objects,
    };
    let target_image = render_objects(
        &target_layout.objects,
        s.canvas,
        s.image_size,
        s.image_channels,
    );
    SyntheticStory {
        captions,
        images,
        target_layout,
        target_image,
    }
}

/// Seed-deterministic synthetic dataset; each example derives its own seed,
/// so generation parallelizes without changing results.
pub fn make_synthetic_dataset(
    count: usize,
    seed: u64,
    max_story_len: usize,
    settings: SynthSettings,
) -> Result<Vec<SyntheticStory>> {
    if count == 0 {
        return Err(MgccError::Input("dataset count must be ≥ 1".into()));
    }
    if !(1..=5).contains(&max_story_len) {
        return Err(MgccError::Input(
            "max_story_len must be between 1 and 5".into(),
        ));
    }
    Ok(exec::map_range(count, |i| {
        generate_story(seed, i, max_story_len, settings)
    }))
}
