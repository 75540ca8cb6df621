//! Contextual object grounding: assemble the layout prompt, query a
//! completion client, and parse/validate the returned bounding boxes.
//!
//! Grounding runs only at inference; training never touches a client.

mod client;
mod layout;
mod prompt;

pub use client::{
    CompletionClient, RemoteClient, RemoteConfig, ScriptedClient, Transcript, TranscriptEntry,
};
pub use layout::{
    parse_layout, serialize_objects, validate_layout, BoundingBox, Layout, LayoutObject,
    Violation, ViolationRule,
};
pub use prompt::{
    assemble_prompt, default_examples, parse_example_bank, serialize_example_bank,
    InContextExample, DEFAULT_EXAMPLE_BANK, EXAMPLE_CANVAS, TASK_DESCRIPTION,
};

use crate::error::{MgccError, Result};

/// Ask the client for a layout, re-querying with the same prompt on parse
/// or validation failures, up to `max_attempts` client calls.
///
/// The returned layout may legitimately contain objects mentioned only in
/// earlier captions; the prompt instructs the model to use that context.
pub fn generate_layout(
    captions: &[&str],
    client: &CompletionClient,
    examples: &[InContextExample],
    canvas: (u32, u32),
    max_attempts: usize,
) -> Result<Layout> {
    if max_attempts == 0 {
        return Err(MgccError::Input("max_attempts must be ≥ 1".into()));
    }
    let prompt = assemble_prompt(captions, examples, canvas)?;
    let mut last_completion = String::new();
    for _ in 0..max_attempts {
        let completion = client.complete(&prompt)?;
        match parse_layout(&completion, canvas) {
            Ok(layout) if validate_layout(&layout).is_empty() => return Ok(layout),
            _ => last_completion = completion,
        }
    }
    Err(MgccError::Grounding {
        attempts: max_attempts,
        last_completion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFERENCE_COMPLETION: &str =
        "Objects: [('a car', [482, 100, 27, 18]), ('a child', [102, 107, 201, 402])]";

    fn scripted(completions: Vec<String>) -> CompletionClient {
        let mut c = ScriptedClient::new();
        c.register_default(completions);
        CompletionClient::Scripted(c)
    }

    #[test]
    fn reference_completion_grounds_to_two_boxes() {
        let client = scripted(vec![REFERENCE_COMPLETION.to_string()]);
        let layout = generate_layout(
            &["He was excited to get home."],
            &client,
            &default_examples(),
            (512, 512),
            3,
        )
        .unwrap();
        assert_eq!(layout.objects.len(), 2);
        assert_eq!(layout.objects[0].label, "a car");
        assert_eq!(layout.objects[0].bbox, BoundingBox::new(482, 100, 27, 18));
        assert_eq!(layout.objects[1].label, "a child");
        assert_eq!(layout.objects[1].bbox, BoundingBox::new(102, 107, 201, 402));
    }

    #[test]
    fn retries_after_garbage_then_succeeds() {
        let client = scripted(vec![
            "total nonsense".to_string(),
            "Objects: [('a tree', [10, 10, 50, 50])]".to_string(),
        ]);
        let layout = generate_layout(&["A tree."], &client, &[], (512, 512), 2).unwrap();
        assert_eq!(layout.objects[0].label, "a tree");
        assert_eq!(client.calls(), 2);
    }

    #[test]
    fn exhausts_attempts_with_exactly_max_calls() {
        let client = scripted(vec!["garbage".to_string()]);
        let err = generate_layout(&["A story."], &client, &[], (512, 512), 3).unwrap_err();
        match err {
            MgccError::Grounding {
                attempts,
                last_completion,
            } => {
                assert_eq!(attempts, 3);
                assert_eq!(last_completion, "garbage");
            }
            other => panic!("expected grounding error, got {other:?}"),
        }
        assert_eq!(client.calls(), 3);
    }

    #[test]
    fn invalid_layout_triggers_retry() {
        // Parses fine but fails canvas validation, then a valid one.
        let client = scripted(vec![
            "Objects: [('a car', [500, 10, 20, 20])]".to_string(),
            "Objects: [('a car', [10, 10, 20, 20])]".to_string(),
        ]);
        let layout = generate_layout(&["A car."], &client, &[], (512, 512), 2).unwrap();
        assert_eq!(layout.objects[0].bbox, BoundingBox::new(10, 10, 20, 20));
        assert_eq!(client.calls(), 2);
    }

    #[test]
    fn empty_object_list_is_a_valid_result() {
        let client = scripted(vec!["Objects: []".to_string()]);
        let layout = generate_layout(&["Nothing here."], &client, &[], (512, 512), 1).unwrap();
        assert!(layout.objects.is_empty());
    }

    #[test]
    fn client_transport_errors_propagate_immediately() {
        let client = CompletionClient::Scripted(ScriptedClient::new());
        assert!(matches!(
            generate_layout(&["A story."], &client, &[], (512, 512), 3),
            Err(MgccError::Client(_))
        ));
    }
}
