//! Instruction template rendering and reply parsing.

use crate::codec::vocab::{SpecialToken, Vocabulary, EDIT_LITERAL};
use crate::error::{CodecError, ReplySegment};
use crate::sample::{validate_sample, EditingSample, Scope, Violation};

pub const TEMPLATE_VERSION: &str = "v1";

const PROMPT_RESOURCE: &str = include_str!("../../resources/templates/instruction_prompt.v1.txt");
const REPLY_RESOURCE: &str = include_str!("../../resources/templates/instruction_reply.v1.txt");

const HINT_SLOT: &str = "{editing hint}";
const SCOPE_SLOT: &str = "{scope}";
const SUGGESTION_SLOT: &str = "{suggestion}";

pub fn prompt_template() -> &'static str {
    PROMPT_RESOURCE.trim_end_matches(['\n', '\r'])
}

pub fn reply_template() -> &'static str {
    REPLY_RESOURCE.trim_end_matches(['\n', '\r'])
}

pub fn render_prompt(hint: &str) -> String {
    prompt_template().replace(HINT_SLOT, hint)
}

pub fn render_reply(scope: Scope, suggestion: &str) -> String {
    reply_template()
        .replace(SCOPE_SLOT, scope.as_str())
        .replace(SUGGESTION_SLOT, suggestion)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedExample {
    pub prompt_text: String,
    pub target_text: String,
    pub token_ids: Vec<u32>,
    pub image_slot_position: usize,
    pub edit_token_position: Option<usize>,
    pub text_loss_mask: Vec<bool>,
    pub box_supervised: bool,
}

impl RenderedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Index of the first target position.
    pub fn target_start(&self) -> usize {
        self.text_loss_mask
            .iter()
            .position(|&m| m)
            .unwrap_or(self.token_ids.len())
    }
}

/// Token ids of `BOS + prompt`, the generation context for a hint.
pub fn encode_prompt(vocab: &Vocabulary, hint: &str) -> Vec<u32> {
    let mut ids = vec![SpecialToken::Begin.id()];
    ids.extend(vocab.encode(&render_prompt(hint)));
    ids
}

/// Vocabulary covering the rendered prompt and reply of every sample.
pub fn vocabulary_for(samples: &[EditingSample]) -> Vocabulary {
    let texts: Vec<String> = samples
        .iter()
        .flat_map(|s| [render_prompt(&s.hint), format!(" {}", render_reply(s.scope, &s.suggestion))])
        .collect();
    Vocabulary::build(texts.iter().map(String::as_str))
}

pub fn render(sample: &EditingSample, vocab: &Vocabulary) -> Result<RenderedExample, CodecError> {
    let violations = validate_sample(sample);
    if let Some(v) = violations.first() {
        return Err(match v {
            Violation::ReservedLiteral { literal, .. } => CodecError::ReservedLiteral(literal.clone()),
            other => CodecError::InvalidSample(other.to_string()),
        });
    }
    let prompt_text = render_prompt(&sample.hint);
    let target_text = render_reply(sample.scope, &sample.suggestion);

    let mut token_ids = encode_prompt(vocab, &sample.hint);
    let prompt_len = token_ids.len();
    token_ids.extend(vocab.encode(&format!(" {target_text}")));

    let image_slot_position = token_ids
        .iter()
        .position(|&t| t == SpecialToken::Image.id())
        .expect("template carries the IMAGE token");
    let edit_token_position = token_ids
        .iter()
        .rposition(|&t| t == SpecialToken::Edit.id());
    let text_loss_mask = (0..token_ids.len()).map(|i| i >= prompt_len).collect();

    Ok(RenderedExample {
        prompt_text,
        target_text,
        token_ids,
        image_slot_position,
        edit_token_position,
        text_loss_mask,
        box_supervised: sample.scope == Scope::Local,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedReply {
    pub scope: Scope,
    pub suggestion: String,
    pub has_edit_token: bool,
}

fn mismatch(segment: ReplySegment, detail: impl Into<String>) -> CodecError {
    CodecError::Parse {
        segment,
        detail: detail.into(),
    }
}

/// Structures an assistant reply. Surrounding whitespace is ignored.
pub fn parse_reply(text: &str) -> Result<ParsedReply, CodecError> {
    let (prefix, rest) = reply_template()
        .split_once(SCOPE_SLOT)
        .expect("reply template has a scope slot");
    let (separator, terminator) = rest
        .split_once(SUGGESTION_SLOT)
        .expect("reply template has a suggestion slot");
    let period = terminator
        .strip_suffix(EDIT_LITERAL)
        .expect("reply template ends with the EDIT literal");

    let text = text.trim();
    let body = text
        .strip_prefix(prefix)
        .ok_or_else(|| mismatch(ReplySegment::Prefix, format!("expected {prefix:?}")))?;
    let (scope, body) = [Scope::Global, Scope::Local]
        .into_iter()
        .find_map(|s| body.strip_prefix(s.as_str()).map(|b| (s, b)))
        .ok_or_else(|| mismatch(ReplySegment::Scope, "expected \"global\" or \"local\""))?;
    let body = body
        .strip_prefix(separator)
        .ok_or_else(|| mismatch(ReplySegment::Separator, format!("expected {separator:?}")))?;
    let (body, has_edit_token) = match body.strip_suffix(EDIT_LITERAL) {
        Some(b) => (b, true),
        None => (body, false),
    };
    let suggestion = body
        .strip_suffix(period)
        .ok_or_else(|| mismatch(ReplySegment::Terminator, format!("expected final {period:?}")))?;
    if suggestion.trim().is_empty() {
        return Err(mismatch(ReplySegment::Suggestion, "empty suggestion"));
    }
    if suggestion.contains(EDIT_LITERAL) {
        return Err(mismatch(ReplySegment::Suggestion, "EDIT token inside suggestion"));
    }
    Ok(ParsedReply {
        scope,
        suggestion: suggestion.to_string(),
        has_edit_token,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;

    fn sample(scope: Scope, suggestion: &str) -> EditingSample {
        EditingSample {
            image_ref: "img".into(),
            hint: "Halloween".into(),
            scope,
            suggestion: suggestion.into(),
            target_box: (scope == Scope::Local).then(|| BoundingBox::new(0.1, 0.1, 0.3, 0.3).unwrap()),
            edited_object: "bats".into(),
            provenance: Default::default(),
        }
    }

    fn vocab_for(samples: &[EditingSample]) -> Vocabulary {
        let texts: Vec<String> = samples
            .iter()
            .flat_map(|s| [render_prompt(&s.hint), format!(" {}", render_reply(s.scope, &s.suggestion))])
            .collect();
        Vocabulary::build(texts.iter().map(String::as_str))
    }

    #[test]
    fn prompt_matches_template_text() {
        assert_eq!(
            render_prompt("luxury"),
            "HUMAN: ⟨IMAGE⟩ Given the input image and analyzing the image content, please give one image editing suggestion about the editing hint: luxury. ASSISTANT:"
        );
    }

    #[test]
    fn render_local_and_global() {
        let local = sample(Scope::Local, "add two bats above the pendant");
        let global = sample(Scope::Global, "turn the sky orange");
        let vocab = vocab_for(&[local.clone(), global.clone()]);

        let r = render(&local, &vocab).unwrap();
        assert_eq!(
            r.target_text,
            "For local editing suggestion: add two bats above the pendant.⟨EDIT⟩"
        );
        assert!(r.box_supervised);
        assert_eq!(r.token_ids[r.image_slot_position], SpecialToken::Image.id());
        assert_eq!(r.edit_token_position, Some(r.len() - 1));
        let start = r.target_start();
        assert!(r.text_loss_mask[..start].iter().all(|m| !m));
        assert!(r.text_loss_mask[start..].iter().all(|&m| m));
        assert_eq!(vocab.decode(&r.token_ids[start..]).trim_start(), r.target_text);
        assert_eq!(vocab.decode(&r.token_ids[..start]), r.prompt_text);

        let r = render(&global, &vocab).unwrap();
        assert!(r.target_text.starts_with("For global editing suggestion:"));
        assert!(!r.box_supervised);
        assert!(r.edit_token_position.is_some());
    }

    #[test]
    fn render_rejects_reserved_literal() {
        let s = sample(Scope::Global, "add ⟨EDIT⟩ here");
        let vocab = vocab_for(&[]);
        assert!(matches!(render(&s, &vocab), Err(CodecError::ReservedLiteral(_))));
    }

    #[test]
    fn parse_examples() {
        assert_eq!(
            parse_reply("For global editing suggestion: replace the background with a marble hall.⟨EDIT⟩").unwrap(),
            ParsedReply {
                scope: Scope::Global,
                suggestion: "replace the background with a marble hall".into(),
                has_edit_token: true
            }
        );
        assert_eq!(
            parse_reply("For local editing suggestion: a corgi.⟨EDIT⟩").unwrap(),
            ParsedReply {
                scope: Scope::Local,
                suggestion: "a corgi".into(),
                has_edit_token: true
            }
        );
        let no_edit = parse_reply("For local editing suggestion: a corgi.").unwrap();
        assert!(!no_edit.has_edit_token);

        let seg = |t: &str| match parse_reply(t) {
            Err(CodecError::Parse { segment, .. }) => segment,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(seg("hello"), ReplySegment::Prefix);
        assert_eq!(seg("For regional editing suggestion: x.⟨EDIT⟩"), ReplySegment::Scope);
        assert_eq!(seg("For local edit: x.⟨EDIT⟩"), ReplySegment::Separator);
        assert_eq!(seg("For local editing suggestion: a corgi"), ReplySegment::Terminator);
        assert_eq!(seg("For local editing suggestion: .⟨EDIT⟩"), ReplySegment::Suggestion);
    }
}
