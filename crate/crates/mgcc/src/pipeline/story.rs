//! Story files: captions in order plus optional image paths, as JSON.

use crate::backbone::StoryExample;
use crate::error::{MgccError, Result};
use crate::pixels::PixelImage;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// On-disk story: `{"captions": [...], "images": ["relative/path.png", ...]}`.
/// Image j is interleaved after caption j; images must number at most
/// captions − 1 so every image precedes the final caption.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoryFile {
    pub captions: Vec<String>,
    #[serde(default)]
    pub images: Vec<String>,
}

/// Load a story file; image paths resolve relative to the story file.
pub fn load_story_file(path: &Path) -> Result<StoryExample> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MgccError::Input(format!("reading story {path:?}: {e}")))?;
    let file: StoryFile = serde_json::from_str(&text)
        .map_err(|e| MgccError::Input(format!("parsing story {path:?}: {e}")))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let images: Result<Vec<PixelImage>> = file
        .images
        .iter()
        .map(|p| PixelImage::load_png(&base.join(p)))
        .collect();
    StoryExample::interleaved(file.captions, images?)
}

pub fn save_story_file(file: &StoryFile, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(file)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_captions_only_story() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("story.json");
        std::fs::write(&path, r#"{"captions": ["First.", "Second."]}"#).unwrap();
        let story = load_story_file(&path).unwrap();
        assert_eq!(story.captions(), vec!["First.", "Second."]);
    }

    #[test]
    fn loads_interleaved_story_with_images() {
        let dir = tempfile::tempdir().unwrap();
        let img = PixelImage::filled(4, 4, 1, 80);
        img.save_png(&dir.path().join("step0.png")).unwrap();
        let path = dir.path().join("story.json");
        std::fs::write(
            &path,
            r#"{"captions": ["First.", "Second."], "images": ["step0.png"]}"#,
        )
        .unwrap();
        let story = load_story_file(&path).unwrap();
        assert_eq!(story.items().len(), 3);
    }

    #[test]
    fn too_many_images_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = PixelImage::filled(4, 4, 1, 80);
        img.save_png(&dir.path().join("a.png")).unwrap();
        let path = dir.path().join("story.json");
        std::fs::write(&path, r#"{"captions": ["Only."], "images": ["a.png"]}"#).unwrap();
        assert!(matches!(
            load_story_file(&path),
            Err(MgccError::Input(_))
        ));
    }
}
