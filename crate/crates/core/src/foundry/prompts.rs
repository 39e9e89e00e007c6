//! Versioned Step-2/Step-3 prompts, reply parsing and the mock's templated
//! fallback replies.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::sample::{ConceptAssociation, PerceptionReport};

const ASSOCIATE_V1: &str = include_str!("../../resources/prompts/associate_concepts.v1.txt");
const DRAFT_V1: &str = include_str!("../../resources/prompts/draft_instructions.v1.txt");

pub const PROMPT_VERSION: &str = "v1";
pub const REASK_SUFFIX: &str = "\n\nYour previous answer was not valid JSON. Return valid JSON only.";

const OBJECTS_HEADER: &str = "Objects in the image";
const CONCEPTS_HEADER: &str = "Concepts associated with the hint";
const HINT_PREFIX: &str = "Editing hint: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Perceive,
    AssociateConcepts,
    DraftInstructions,
    Dedup,
    CurateGlobal,
    CurateLocal,
    Balance,
}

impl Step {
    pub fn as_str(&self) -> &'static str {
        match self {
            Step::Perceive => "perceive",
            Step::AssociateConcepts => "associate_concepts",
            Step::DraftInstructions => "draft_instructions",
            Step::Dedup => "dedup",
            Step::CurateGlobal => "curate_global",
            Step::CurateLocal => "curate_local",
            Step::Balance => "balance",
        }
    }
}

fn object_lines(report: &PerceptionReport) -> String {
    if report.objects.is_empty() {
        return "- (none)".into();
    }
    report
        .objects
        .iter()
        .map(|o| {
            let [x1, y1, x2, y2] = o.bbox;
            format!("- {} | [{x1:.4}, {y1:.4}, {x2:.4}, {y2:.4}] | {}", o.tag, o.caption)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_associate_prompt(report: &PerceptionReport, hint: &str, k: usize) -> String {
    ASSOCIATE_V1
        .replace("{caption}", &report.global_caption)
        .replace("{objects}", &object_lines(report))
        .replace("{hint}", hint)
        .replace("{k}", &k.to_string())
}

pub fn render_draft_prompt(report: &PerceptionReport, concepts: &[ConceptAssociation], hint: &str) -> String {
    let concept_lines = concepts
        .iter()
        .map(|c| format!("- {} | {}", c.concept, c.rationale))
        .collect::<Vec<_>>()
        .join("\n");
    DRAFT_V1
        .replace("{caption}", &report.global_caption)
        .replace("{objects}", &object_lines(report))
        .replace("{hint}", hint)
        .replace("{concepts}", &concept_lines)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAssociations {
    pub associations: Vec<ConceptAssociation>,
    pub dropped_lines: usize,
}

fn strip_list_marker(line: &str) -> &str {
    let t = line.trim();
    if let Some(rest) = t.strip_prefix("- ").or_else(|| t.strip_prefix("* ")) {
        return rest.trim();
    }
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim();
        }
    }
    t
}

/// Parses `concept: reason` lines. Blank lines are ignored; any other line
/// without both parts counts as dropped. Keeps at most `k`.
pub fn parse_associations(reply: &str, k: usize) -> ParsedAssociations {
    let mut associations = Vec::new();
    let mut dropped_lines = 0;
    for line in reply.lines().filter(|l| !l.trim().is_empty()) {
        let body = strip_list_marker(line);
        let parsed = body
            .split_once(':')
            .and_then(|(c, r)| ConceptAssociation::new(c.trim_matches(|ch| ch == '*' || ch == '"'), r));
        match parsed {
            Some(a) if associations.len() < k => associations.push(a),
            Some(_) => {}
            None => dropped_lines += 1,
        }
    }
    ParsedAssociations {
        associations,
        dropped_lines,
    }
}

/// The outermost JSON array in `reply`, tolerating code fences and prose.
pub fn extract_json_array(reply: &str) -> Result<Vec<serde_json::Value>, String> {
    let start = reply.find('[').ok_or("no JSON array in reply")?;
    let end = reply.rfind(']').ok_or("unterminated JSON array")?;
    if end < start {
        return Err("unterminated JSON array".into());
    }
    serde_json::from_str(&reply[start..=end]).map_err(|e| e.to_string())
}

fn section_lines<'a>(prompt: &'a str, header: &str) -> Vec<&'a str> {
    prompt
        .lines()
        .skip_while(|l| !l.starts_with(header))
        .skip(1)
        .take_while(|l| l.starts_with("- "))
        .map(|l| &l[2..])
        .collect()
}

fn prompt_hint(prompt: &str) -> String {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(HINT_PREFIX))
        .unwrap_or("")
        .trim()
        .to_string()
}

/// Deterministic reply for a prompt the fixtures do not cover, derived only
/// from the prompt text.
pub fn fallback_reply(step: Step, prompt: &str) -> String {
    let hint = prompt_hint(prompt);
    match step {
        Step::AssociateConcepts => [
            format!("a {hint} ornament: it carries the {hint} theme into the picture"),
            format!("a {hint} pattern: it echoes {hint} without changing the layout"),
            format!("{hint} lighting: light sets the {hint} mood of the whole scene"),
        ]
        .join("\n"),
        Step::DraftInstructions => {
            let objects: Vec<(String, serde_json::Value)> = section_lines(prompt, OBJECTS_HEADER)
                .into_iter()
                .filter_map(|l| {
                    let mut parts = l.split(" | ");
                    let tag = parts.next()?.trim().to_string();
                    let bbox: serde_json::Value = serde_json::from_str(parts.next()?.trim()).ok()?;
                    Some((tag, bbox))
                })
                .collect();
            let concepts: Vec<String> = section_lines(prompt, CONCEPTS_HEADER)
                .into_iter()
                .filter_map(|l| l.split(" | ").next().map(|c| c.trim().to_string()))
                .collect();
            let mut drafts = Vec::new();
            for (i, concept) in concepts.iter().enumerate() {
                drafts.push(json!({
                    "scope": "global",
                    "suggestion": format!("give the whole image a {hint} mood with {concept}"),
                    "object": "image",
                }));
                if !objects.is_empty() {
                    let (tag, bbox) = &objects[i % objects.len()];
                    drafts.push(json!({
                        "scope": "local",
                        "suggestion": concept,
                        "object": tag,
                        "box": bbox,
                    }));
                }
            }
            serde_json::to_string_pretty(&drafts).expect("json values serialize")
        }
        _ => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::PerceivedObjectRecord;

    fn report() -> PerceptionReport {
        PerceptionReport {
            global_caption: "a dog on a sofa".into(),
            objects: vec![PerceivedObjectRecord {
                tag: "dog".into(),
                bbox: [0.1, 0.2, 0.6, 0.9],
                caption: "a brown dog".into(),
            }],
        }
    }

    #[test]
    fn prompts_fill_every_slot() {
        let a = render_associate_prompt(&report(), "luxury", 4);
        let concepts = vec![ConceptAssociation::new("a gold necklace", "it is luxurious").unwrap()];
        let d = render_draft_prompt(&report(), &concepts, "luxury");
        for p in [&a, &d] {
            for slot in ["{caption}", "{objects}", "{hint}", "{k}", "{concepts}"] {
                assert!(!p.contains(slot), "{slot}");
            }
            assert!(p.contains("Editing hint: luxury"));
            assert!(p.contains("- dog | [0.1000, 0.2000, 0.6000, 0.9000] | a brown dog"));
        }
        assert!(a.contains("up to 4 concepts"));
        assert!(d.contains("- a gold necklace | it is luxurious"));
        assert!(!d.to_lowercase().contains("example"));
    }

    #[test]
    fn association_parsing() {
        let reply = "1. a gold necklace: gold signals wealth\n- luxury mansion: grand homes\n\nhigh-end lobby: marble and brass\njust a line\n* velvet: rich fabric";
        let p = parse_associations(reply, 10);
        assert_eq!(p.associations.len(), 4);
        assert_eq!(p.dropped_lines, 1);
        assert_eq!(p.associations[0].concept, "a gold necklace");
        assert_eq!(parse_associations(reply, 1).associations.len(), 1);
    }

    #[test]
    fn json_extraction() {
        let fenced = "Sure!\n```json\n[{\"scope\": \"global\"}]\n```";
        assert_eq!(extract_json_array(fenced).unwrap().len(), 1);
        assert!(extract_json_array("no json here").is_err());
        assert!(extract_json_array("[{\"scope\": }]").is_err());
    }

    #[test]
    fn fallback_drafts_follow_the_prompt() {
        let concepts = parse_associations(
            &fallback_reply(Step::AssociateConcepts, &render_associate_prompt(&report(), "luxury", 5)),
            5,
        );
        assert_eq!(concepts.associations.len(), 3);
        assert_eq!(concepts.dropped_lines, 0);
        let prompt = render_draft_prompt(&report(), &concepts.associations, "luxury");
        let drafts = extract_json_array(&fallback_reply(Step::DraftInstructions, &prompt)).unwrap();
        assert_eq!(drafts.len(), 6);
        assert_eq!(drafts[1]["object"], "dog");
        assert_eq!(drafts[1]["box"], json!([0.1, 0.2, 0.6, 0.9]));
    }
}
