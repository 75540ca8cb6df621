//! Mock grounded image generator and the generator plugin interface.
//!
//! The mock makes both of its conditioning inputs observable in pixels: the
//! background color is a hash of the conditioning matrix (and seed), and
//! each layout box is drawn as a filled rectangle whose color is a fixed
//! hash of its label. Layout coordinates stay in canvas units; they are
//! scaled to the render size by exact integer division at draw time.

use crate::error::Result;
use crate::grounding::{BoundingBox, Layout};
use crate::pixels::PixelImage;
use crate::util::matrix_le_bytes;
use crate::{FeatureMatrix, Real};
use sha2::{Digest, Sha256};

/// Plugin interface for image generators. `layout` is `None` when layout
/// conditioning is disabled.
pub trait ImageGenerator<F: Real>: Send + Sync {
    fn generate(
        &self,
        conditioning: &FeatureMatrix<F>,
        layout: Option<&Layout>,
        seed: u64,
    ) -> Result<PixelImage>;
}

/// Stable color for a layout label.
pub fn label_color(label: &str) -> [u8; 3] {
    let digest = Sha256::digest(label.as_bytes());
    [digest[0], digest[1], digest[2]]
}

/// Scale a canvas-space box to render-space by integer division. Width and
/// height keep at least one pixel so every valid box stays visible.
pub fn scale_box(b: &BoundingBox, canvas: (u32, u32), render: (u32, u32)) -> (u32, u32, u32, u32) {
    let sx = |v: i64| -> u32 {
        (v.max(0) as u64 * render.0 as u64 / canvas.0.max(1) as u64) as u32
    };
    let sy = |v: i64| -> u32 {
        (v.max(0) as u64 * render.1 as u64 / canvas.1.max(1) as u64) as u32
    };
    let x = sx(b.x).min(render.0.saturating_sub(1));
    let y = sy(b.y).min(render.1.saturating_sub(1));
    let w = sx(b.w).max(1);
    let h = sy(b.h).max(1);
    (x, y, w, h)
}

/// Draw layout rectangles onto an image, in object order. `channels` must
/// match the image; colors are truncated or repeated to fit.
pub fn rasterize_layout(img: &mut PixelImage, layout: &Layout) {
    let render = (img.width, img.height);
    let ch = img.channels as usize;
    for obj in &layout.objects {
        let rgb = label_color(&obj.label);
        let color: Vec<u8> = (0..ch).map(|i| rgb[i % 3]).collect();
        let (x, y, w, h) = scale_box(&obj.bbox, layout.canvas, render);
        img.fill_rect(x, y, w, h, &color);
    }
}

/// Deterministic mock generator.
#[derive(Debug, Clone)]
pub struct MockGenerator {
    pub width: u32,
    pub height: u32,
}

impl MockGenerator {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    fn background<F: Real>(&self, conditioning: &FeatureMatrix<F>, seed: u64) -> [u8; 3] {
        let mut hasher = Sha256::new();
        hasher.update(matrix_le_bytes(conditioning));
        hasher.update(seed.to_le_bytes());
        let digest = hasher.finalize();
        [digest[0], digest[1], digest[2]]
    }
}

impl<F: Real> ImageGenerator<F> for MockGenerator {
    fn generate(
        &self,
        conditioning: &FeatureMatrix<F>,
        layout: Option<&Layout>,
        seed: u64,
    ) -> Result<PixelImage> {
        let bg = self.background(conditioning, seed);
        let mut img = PixelImage::filled(self.width, self.height, 3, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                img.set_pixel(x, y, &bg);
            }
        }
        if let Some(layout) = layout {
            rasterize_layout(&mut img, layout);
        }
        Ok(img)
    }
}

/// Generator backend selection: the built-in mock or a user plugin.
pub enum GeneratorBackend<F: Real> {
    Mock(MockGenerator),
    External(Box<dyn ImageGenerator<F>>),
}

impl<F: Real> GeneratorBackend<F> {
    pub fn generate(
        &self,
        conditioning: &FeatureMatrix<F>,
        layout: Option<&Layout>,
        seed: u64,
    ) -> Result<PixelImage> {
        match self {
            Self::Mock(m) => m.generate(conditioning, layout, seed),
            Self::External(g) => g.generate(conditioning, layout, seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::LayoutObject;
    use ndarray::Array2;

    fn cond() -> Array2<f64> {
        Array2::from_shape_vec((2, 2), vec![0.1, -0.2, 0.3, 0.4]).unwrap()
    }

    #[test]
    fn mock_is_deterministic_in_all_inputs() {
        let backend = MockGenerator::new(16, 16);
        let layout = Layout {
            canvas: (512, 512),
            objects: vec![LayoutObject {
                label: "a car".into(),
                bbox: BoundingBox::new(100, 100, 50, 50),
            }],
        };
        let a: PixelImage = ImageGenerator::<f64>::generate(&backend, &cond(), Some(&layout), 7).unwrap();
        let b: PixelImage = ImageGenerator::<f64>::generate(&backend, &cond(), Some(&layout), 7).unwrap();
        assert_eq!(a, b);
        let c: PixelImage = ImageGenerator::<f64>::generate(&backend, &cond(), Some(&layout), 8).unwrap();
        assert_ne!(a, c, "seed must reach the background hash");
    }

    #[test]
    fn conditioning_changes_background() {
        let backend = MockGenerator::new(4, 4);
        let a: PixelImage = ImageGenerator::<f64>::generate(&backend, &cond(), None, 7).unwrap();
        let other = cond().mapv(|v| v + 0.5);
        let b: PixelImage = ImageGenerator::<f64>::generate(&backend, &other, None, 7).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn reference_box_lands_at_exact_scaled_coordinates() {
        // [482, 100, 27, 18] on 512x512 rendered at 64x64:
        // x = 482·64/512 = 60, y = 100·64/512 = 12,
        // w = 27·64/512 = 3, h = 18·64/512 = 2.
        let backend = MockGenerator::new(64, 64);
        let layout = Layout {
            canvas: (512, 512),
            objects: vec![LayoutObject {
                label: "a car".into(),
                bbox: BoundingBox::new(482, 100, 27, 18),
            }],
        };
        assert_eq!(scale_box(&layout.objects[0].bbox, (512, 512), (64, 64)), (60, 12, 3, 2));
        let img: PixelImage =
            ImageGenerator::<f64>::generate(&backend, &cond(), Some(&layout), 3).unwrap();
        let color = label_color("a car");
        for y in 12..14 {
            for x in 60..63 {
                assert_eq!(img.pixel(x, y), &color, "pixel ({x},{y})");
            }
        }
        // Just outside the rectangle is background.
        assert_ne!(img.pixel(59, 12), &color);
        assert_ne!(img.pixel(60, 14), &color);
    }

    #[test]
    fn tiny_boxes_keep_one_pixel() {
        let b = BoundingBox::new(0, 0, 2, 2);
        let (_, _, w, h) = scale_box(&b, (512, 512), (64, 64));
        assert_eq!((w, h), (1, 1));
    }

    #[test]
    fn label_colors_are_stable() {
        assert_eq!(label_color("a car"), label_color("a car"));
        assert_ne!(label_color("a car"), label_color("a child"));
    }
}
