//! Prompt assembly for the layout generator.
//!
//! The prompt is a bit-exact concatenation: task description, image-detail
//! block parameterized by the canvas, the in-context examples, then the
//! query story with a trailing `Objects:` cue. Assembly is a pure function
//! of its inputs, so identical inputs produce identical bytes everywhere.

use super::layout::{parse_layout, serialize_objects, LayoutObject};
use crate::error::{MgccError, Result};

/// Task-description block, fixed verbatim.
pub const TASK_DESCRIPTION: &str = "You are an intelligent bounding box generator. \
I will provide you with a entire story sequence for a occasion. \
Your task is to generate the bounding boxes for the last sequence \
remaining the context of the earlier sequence";

/// Image-detail block template; `{W}`/`{H}` are replaced with the canvas.
const IMAGE_DETAIL_TEMPLATE: &str = "The images are of size {W}x{H}. \
The top-left corner has coordinates [0, 0] and the bottom-right corner has coordinates [{W}, {H}]. \
Format of the bounding boxes should be fixed: a list of tuples, one tuple (label, [x, y, w, h]) per object, \
where the label is a short description in single quotes, x and y are the pixel coordinates of the top-left \
corner of the box, and w and h are its width and height in pixels. Each box must lie entirely inside the \
image. Generate the bounding boxes only for the last sequence and do not write anything after the closing \
bracket. If needed, take the context of the previous sequence and have the guess.";

/// The built-in example bank (5 curated examples on a 512x512 canvas).
pub const DEFAULT_EXAMPLE_BANK: &str = include_str!("../../assets/examples.txt");

/// Canvas every in-context example is authored against.
pub const EXAMPLE_CANVAS: (u32, u32) = (512, 512);

/// One curated story/layout pair shown to the model before the query.
#[derive(Debug, Clone, PartialEq)]
pub struct InContextExample {
    pub story: String,
    pub objects: Vec<LayoutObject>,
}

impl InContextExample {
    /// Canonical two-line block: `Story sequence: …\nObjects: […]`.
    pub fn canonical_block(&self) -> String {
        format!(
            "Story sequence: {}\nObjects: {}",
            self.story,
            serialize_objects(&self.objects)
        )
    }
}

/// Parse an example bank: repeated canonical blocks separated by blank
/// lines.
pub fn parse_example_bank(text: &str) -> Result<Vec<InContextExample>> {
    const STORY_PREFIX: &str = "Story sequence: ";
    const OBJECTS_PREFIX: &str = "Objects: ";
    let mut examples = Vec::new();
    for block in text.split("\n\n").map(str::trim).filter(|b| !b.is_empty()) {
        let (story_line, objects_line) = block.split_once('\n').ok_or_else(|| {
            MgccError::Input(format!(
                "example block must be two lines, got {block:?}"
            ))
        })?;
        let story = story_line
            .strip_prefix(STORY_PREFIX)
            .ok_or_else(|| {
                MgccError::Input(format!("example block must start with {STORY_PREFIX:?}"))
            })?
            .to_string();
        if !objects_line.starts_with(OBJECTS_PREFIX) {
            return Err(MgccError::Input(format!(
                "example block must contain {OBJECTS_PREFIX:?}"
            )));
        }
        let layout = parse_layout(objects_line, EXAMPLE_CANVAS)?;
        examples.push(InContextExample {
            story,
            objects: layout.objects,
        });
    }
    Ok(examples)
}

/// Serialize a bank back to its canonical file form.
pub fn serialize_example_bank(examples: &[InContextExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&ex.canonical_block());
        out.push_str("\n\n");
    }
    out
}

/// The built-in bank, parsed. Panics only if the bundled asset is broken,
/// which the tests guard.
pub fn default_examples() -> Vec<InContextExample> {
    parse_example_bank(DEFAULT_EXAMPLE_BANK).expect("bundled example bank parses")
}

/// Assemble the full prompt for a story. Byte-identical across runs and
/// platforms for identical inputs; an empty example bank is allowed.
pub fn assemble_prompt(
    captions: &[&str],
    examples: &[InContextExample],
    canvas: (u32, u32),
) -> Result<String> {
    if captions.is_empty() {
        return Err(MgccError::Input("prompt needs at least one caption".into()));
    }
    if canvas.0 == 0 || canvas.1 == 0 {
        return Err(MgccError::Input("canvas must be positive".into()));
    }
    let detail = IMAGE_DETAIL_TEMPLATE
        .replace("{W}", &canvas.0.to_string())
        .replace("{H}", &canvas.1.to_string());

    let mut prompt = String::new();
    prompt.push_str(TASK_DESCRIPTION);
    prompt.push_str("\n\n");
    prompt.push_str(&detail);
    prompt.push_str("\n\n");
    for ex in examples {
        prompt.push_str(&ex.canonical_block());
        prompt.push_str("\n\n");
    }
    prompt.push_str("Story sequence: ");
    prompt.push_str(&captions.join(" "));
    prompt.push_str("\nObjects:");
    Ok(prompt)
}
