//! Dataset records and their validation.

use std::fmt;
use std::io::{BufRead, Write};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::codec::RESERVED_LITERALS;
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Global,
    Local,
}

impl Scope {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scope::Global => "global",
            Scope::Local => "local",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(Scope::Global),
            "local" => Ok(Scope::Local),
            other => Err(format!("unknown scope {other:?}")),
        }
    }
}

/// Where a sample came from: pipeline step identifiers and the hashes of the
/// prompts that produced it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default)]
    pub steps: Vec<String>,
    #[serde(default)]
    pub prompt_hashes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditingSample {
    #[serde(rename = "image")]
    pub image_ref: String,
    pub hint: String,
    pub scope: Scope,
    pub suggestion: String,
    #[serde(
        rename = "box",
        default,
        skip_serializing_if = "Option::is_none",
        serialize_with = "ser_box",
        deserialize_with = "de_box"
    )]
    pub target_box: Option<BoundingBox>,
    #[serde(rename = "object", default)]
    pub edited_object: String,
    #[serde(default)]
    pub provenance: Provenance,
}

fn ser_box<S: Serializer>(b: &Option<BoundingBox>, s: S) -> Result<S::Ok, S::Error> {
    match b {
        None => s.serialize_none(),
        Some(b) => {
            let text = format!(
                "[{:.6},{:.6},{:.6},{:.6}]",
                b.x1(),
                b.y1(),
                b.x2(),
                b.y2()
            );
            let raw = RawValue::from_string(text).map_err(serde::ser::Error::custom)?;
            raw.serialize(s)
        }
    }
}

fn de_box<'de, D: Deserializer<'de>>(d: D) -> Result<Option<BoundingBox>, D::Error> {
    let raw: Option<[f64; 4]> = Option::deserialize(d)?;
    raw.map(|c| BoundingBox::try_from(c).map_err(D::Error::custom))
        .transpose()
}

/// A violated sample invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyImageRef,
    EmptyHint,
    EmptySuggestion,
    ReservedLiteral { field: &'static str, literal: String },
    InteriorPeriod,
    LocalRequiresBox,
    GlobalHasBox,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyImageRef => f.write_str("image reference is empty"),
            Violation::EmptyHint => f.write_str("hint is empty"),
            Violation::EmptySuggestion => f.write_str("suggestion is empty"),
            Violation::ReservedLiteral { field, literal } => {
                write!(f, "{field} contains reserved literal {literal}")
            }
            Violation::InteriorPeriod => f.write_str("suggestion contains a period"),
            Violation::LocalRequiresBox => f.write_str("local requires box"),
            Violation::GlobalHasBox => f.write_str("global must not carry a box"),
        }
    }
}

fn reserved_in(text: &str) -> Option<&'static str> {
    RESERVED_LITERALS.iter().copied().find(|lit| text.contains(lit))
}

/// Lists every violated invariant; an empty report means the sample is valid.
pub fn validate_sample(s: &EditingSample) -> Vec<Violation> {
    let mut out = Vec::new();
    if s.image_ref.trim().is_empty() {
        out.push(Violation::EmptyImageRef);
    }
    if s.hint.trim().is_empty() {
        out.push(Violation::EmptyHint);
    }
    if let Some(lit) = reserved_in(&s.hint) {
        out.push(Violation::ReservedLiteral {
            field: "hint",
            literal: lit.to_string(),
        });
    }
    if s.suggestion.trim().is_empty() {
        out.push(Violation::EmptySuggestion);
    }
    if let Some(lit) = reserved_in(&s.suggestion) {
        out.push(Violation::ReservedLiteral {
            field: "suggestion",
            literal: lit.to_string(),
        });
    }
    if s.suggestion.contains('.') {
        out.push(Violation::InteriorPeriod);
    }
    match (s.scope, s.target_box.is_some()) {
        (Scope::Local, false) => out.push(Violation::LocalRequiresBox),
        (Scope::Global, true) => out.push(Violation::GlobalHasBox),
        _ => {}
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceivedObject {
    pub tag: String,
    pub bbox: BoundingBox,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptionReport {
    pub global_caption: String,
    pub objects: Vec<PerceivedObjectRecord>,
}

/// Wire form of a perceived object; the box is kept as raw corners so that
/// contract violations can be reported rather than failing deserialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceivedObjectRecord {
    pub tag: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default)]
    pub caption: String,
}

impl PerceptionReport {
    /// Checks the report invariants, returning the validated objects.
    pub fn validated(&self) -> Result<Vec<PerceivedObject>, String> {
        self.objects
            .iter()
            .enumerate()
            .map(|(i, o)| {
                if o.tag.trim().is_empty() {
                    return Err(format!("object {i} has an empty tag"));
                }
                let bbox = BoundingBox::try_from(o.bbox)
                    .map_err(|e| format!("object {i} ({}): {e}", o.tag))?;
                Ok(PerceivedObject {
                    tag: o.tag.clone(),
                    bbox,
                    caption: o.caption.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptAssociation {
    pub concept: String,
    pub rationale: String,
}

impl ConceptAssociation {
    pub fn new(concept: impl Into<String>, rationale: impl Into<String>) -> Option<Self> {
        let concept = concept.into().trim().to_string();
        let rationale = rationale.into().trim().to_string();
        (!concept.is_empty() && !rationale.is_empty()).then_some(Self { concept, rationale })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_txt: f64,
    pub lambda_loc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_txt: 1.0,
            lambda_loc: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda_txt >= 0.0 && self.lambda_loc >= 0.0) {
            return Err(format!("loss weights must be >= 0, got {self:?}"));
        }
        Ok(())
    }
}

pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl<R: BufRead, T: for<'de> Deserialize<'de>>(r: R) -> Result<Vec<T>, String> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn local() -> EditingSample {
        EditingSample {
            image_ref: "dog_01".into(),
            hint: "Halloween".into(),
            scope: Scope::Local,
            suggestion: "add two bats above the pendant".into(),
            target_box: Some(BoundingBox::new(0.15625, 0.1, 0.5, 0.4).unwrap()),
            edited_object: "bats".into(),
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn validation_reports() {
        assert!(validate_sample(&local()).is_empty());

        let mut s = local();
        s.target_box = None;
        assert_eq!(validate_sample(&s), vec![Violation::LocalRequiresBox]);
        assert_eq!(Violation::LocalRequiresBox.to_string(), "local requires box");

        let mut s = local();
        s.scope = Scope::Global;
        assert_eq!(validate_sample(&s), vec![Violation::GlobalHasBox]);

        let mut s = local();
        s.suggestion = "add a bat ⟨EDIT⟩".into();
        assert_eq!(validate_sample(&s).len(), 1);

        let mut s = local();
        s.suggestion = "add a bat. then a cat".into();
        assert_eq!(validate_sample(&s), vec![Violation::InteriorPeriod]);
    }

    #[test]
    fn jsonl_schema() {
        let line = serde_json::to_string(&local()).unwrap();
        assert!(line.contains(r#""box":[0.156250,0.100000,0.500000,0.400000]"#), "{line}");
        assert!(line.starts_with(r#"{"image":"dog_01","hint":"Halloween","scope":"local""#));
        let back: EditingSample = serde_json::from_str(&line).unwrap();
        assert_eq!(back, local());

        let mut g = local();
        g.scope = Scope::Global;
        g.target_box = None;
        let line = serde_json::to_string(&g).unwrap();
        assert!(!line.contains("\"box\""));
        let back: EditingSample = serde_json::from_str(&line).unwrap();
        assert_eq!(back.target_box, None);
    }

    #[test]
    fn jsonl_rejects_bad_box() {
        let line = r#"{"image":"a","hint":"h","scope":"local","suggestion":"s","box":[0.5,0.1,0.2,0.4],"object":"o"}"#;
        assert!(serde_json::from_str::<EditingSample>(line).is_err());
    }

    #[test]
    fn perception_report_validation() {
        let r = PerceptionReport {
            global_caption: "a dog".into(),
            objects: vec![PerceivedObjectRecord {
                tag: "dog".into(),
                bbox: [0.4, 0.1, 0.3, 0.5],
                caption: "brown dog".into(),
            }],
        };
        let err = r.validated().unwrap_err();
        assert!(err.contains("dog"), "{err}");
    }

    #[test]
    fn loss_weight_defaults() {
        let w = LossWeights::default();
        assert_eq!((w.lambda_txt, w.lambda_loc), (1.0, 2.0));
        assert!(LossWeights { lambda_txt: -1.0, lambda_loc: 0.0 }.validate().is_err());
    }
}
