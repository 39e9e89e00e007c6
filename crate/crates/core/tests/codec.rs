mod support;

use ier_core::codec::{parse_reply, render, render_prompt, SpecialToken};
use ier_core::sample::Scope;
use proptest::prelude::*;

#[test]
fn prompt_is_byte_exact() {
    for hint in ["luxury", "Halloween", "a rainy day in Paris"] {
        let expected = format!(
            "HUMAN: ⟨IMAGE⟩ Given the input image and analyzing the image content, please give one image editing suggestion about the editing hint: {hint}. ASSISTANT:"
        );
        assert_eq!(render_prompt(hint).as_bytes(), expected.as_bytes());
    }
}

#[test]
fn round_trip_on_randomized_samples() {
    let (ok, n) = support::template_round_trips(99, 500);
    assert_eq!(ok, n);
}

#[test]
fn reply_text_layout() {
    let parsed = parse_reply("For local editing suggestion: add a gold necklace.⟨EDIT⟩").unwrap();
    assert_eq!(parsed.scope, Scope::Local);
    assert_eq!(parsed.suggestion, "add a gold necklace");
    assert!(parsed.has_edit_token);
    let no_edit = parse_reply("For global editing suggestion: turn the sky orange.").unwrap();
    assert!(!no_edit.has_edit_token);
    for bad in [
        "For regional editing suggestion: x.⟨EDIT⟩",
        "Global editing suggestion: x.",
        "For local editing suggestion: x",
        "For local editing suggestion: .⟨EDIT⟩",
    ] {
        assert!(parse_reply(bad).is_err(), "{bad}");
    }
}

proptest! {
    #[test]
    fn rendered_ids_keep_one_image_slot(seed in any::<u64>()) {
        let (samples, vocab) = support::random_samples(seed, 4);
        for s in &samples {
            let r = render(s, &vocab).unwrap();
            let images = r.token_ids.iter().filter(|&&t| t == SpecialToken::Image.id()).count();
            prop_assert_eq!(images, 1);
            prop_assert_eq!(r.edit_token_position, Some(r.token_ids.len() - 1));
            prop_assert_eq!(r.box_supervised, s.scope == Scope::Local);
        }
    }
}
