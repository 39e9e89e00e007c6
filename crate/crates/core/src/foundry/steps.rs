//! The four collection steps: perception, concept association, instruction
//! drafting, and curation (dedup, global score filter, local simplicity).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::FoundryError;
use crate::foundry::clients::{cosine, ChatClient, ChatRequest, EmbeddingClient, PerceptionClient, RetryPolicy};
use crate::foundry::prompts::{
    extract_json_array, parse_associations, render_associate_prompt, render_draft_prompt, Step, REASK_SUFFIX,
};
use crate::geometry::BoundingBox;
use crate::rng::sha256_hex;
use crate::sample::{validate_sample, ConceptAssociation, EditingSample, PerceptionReport, Provenance, Scope};

/// Conjunctions that make a local suggestion compound.
pub const LOCAL_STOP_WORDS: [&str; 3] = ["and", "then", "while"];

/// Image references and their files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    image_ref: String,
    path: PathBuf,
}

impl Manifest {
    /// Reads a `image_ref,path` CSV; relative paths resolve against the
    /// manifest's directory.
    pub fn read(path: &Path) -> Result<Self, FoundryError> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut rdr = csv::Reader::from_path(path)?;
        let mut entries = BTreeMap::new();
        for row in rdr.deserialize() {
            let row: ManifestRow = row?;
            let file = if row.path.is_absolute() { row.path } else { base.join(row.path) };
            if entries.insert(row.image_ref.clone(), file).is_some() {
                return Err(FoundryError::Config(format!("duplicate manifest entry {:?}", row.image_ref)));
            }
        }
        Ok(Self { entries })
    }

    pub fn contains(&self, image_ref: &str) -> bool {
        self.entries.contains_key(image_ref)
    }
}

/// A draft or sample that left the pipeline, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub image: String,
    pub hint: String,
    pub step: Step,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub raw: serde_json::Value,
}

impl Reject {
    pub(crate) fn of_sample(s: &EditingSample, step: Step, reason: impl Into<String>, detail: Option<String>) -> Self {
        Self {
            image: s.image_ref.clone(),
            hint: s.hint.clone(),
            step,
            reason: reason.into(),
            detail,
            raw: serde_json::to_value(s).expect("samples serialize"),
        }
    }
}

pub fn perceive(
    image_ref: &str,
    manifest: &Manifest,
    client: &dyn PerceptionClient,
    retry: &RetryPolicy,
) -> Result<PerceptionReport, FoundryError> {
    if !manifest.contains(image_ref) {
        return Err(FoundryError::Manifest(image_ref.to_string()));
    }
    let report = retry.run(|| client.perceive(image_ref))?;
    report
        .validated()
        .map_err(|v| FoundryError::Contract(format!("perception report for {image_ref:?}: {v}")))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Associations {
    pub associations: Vec<ConceptAssociation>,
    pub dropped_lines: usize,
    pub prompt_hash: String,
}

pub fn associate_concepts(
    report: &PerceptionReport,
    hint: &str,
    client: &dyn ChatClient,
    k: usize,
    retry: &RetryPolicy,
) -> Result<Associations, FoundryError> {
    let prompt = render_associate_prompt(report, hint, k);
    let request = ChatRequest {
        step: Step::AssociateConcepts,
        prompt,
        temperature: 1.0,
    };
    let reply = retry.run(|| client.chat(&request))?;
    let parsed = parse_associations(&reply, k);
    if parsed.associations.is_empty() {
        return Err(FoundryError::Step {
            step: Step::AssociateConcepts.as_str(),
            reason: format!("no parseable associations ({} malformed lines)", parsed.dropped_lines),
            raw_reply: Some(reply),
        });
    }
    Ok(Associations {
        associations: parsed.associations,
        dropped_lines: parsed.dropped_lines,
        prompt_hash: sha256_hex(&request.prompt),
    })
}

#[derive(Debug, Clone, Deserialize)]
struct RawDraft {
    scope: String,
    suggestion: String,
    #[serde(default)]
    object: String,
    #[serde(rename = "box", default)]
    bbox: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Drafts {
    pub samples: Vec<EditingSample>,
    pub quarantined: Vec<Reject>,
    pub prompt_hash: String,
    pub reasked: bool,
}

fn draft_to_sample(
    value: &serde_json::Value,
    image_ref: &str,
    hint: &str,
    provenance: &Provenance,
) -> Result<EditingSample, String> {
    let raw: RawDraft = serde_json::from_value(value.clone()).map_err(|e| format!("malformed draft: {e}"))?;
    let scope: Scope = raw.scope.parse::<Scope>().map_err(|e| e.to_string())?;
    let target_box = match raw.bbox {
        Some(c) => Some(BoundingBox::try_from(c).map_err(|e| format!("invalid box: {e}"))?),
        None => None,
    };
    let suggestion = raw.suggestion.trim();
    let suggestion = suggestion.strip_suffix('.').unwrap_or(suggestion).trim().to_string();
    let sample = EditingSample {
        image_ref: image_ref.to_string(),
        hint: hint.to_string(),
        scope,
        suggestion,
        target_box,
        edited_object: raw.object.trim().to_string(),
        provenance: provenance.clone(),
    };
    let violations = validate_sample(&sample);
    if !violations.is_empty() {
        return Err(violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "));
    }
    Ok(sample)
}

/// Step 3. Invalid drafts are quarantined, never dropped; an unparseable
/// reply gets exactly one re-ask.
pub fn draft_instructions(
    image_ref: &str,
    report: &PerceptionReport,
    associations: &Associations,
    hint: &str,
    client: &dyn ChatClient,
    retry: &RetryPolicy,
) -> Result<Drafts, FoundryError> {
    if associations.associations.is_empty() {
        return Err(FoundryError::Step {
            step: Step::DraftInstructions.as_str(),
            reason: "no associations to draft from".into(),
            raw_reply: None,
        });
    }
    let prompt = render_draft_prompt(report, &associations.associations, hint);
    let prompt_hash = sha256_hex(&prompt);
    let ask = |prompt: String| {
        let request = ChatRequest {
            step: Step::DraftInstructions,
            prompt,
            temperature: 1.0,
        };
        retry.run(|| client.chat(&request))
    };
    let reply = ask(prompt.clone())?;
    let (values, reasked) = match extract_json_array(&reply) {
        Ok(v) => (v, false),
        Err(first) => {
            let again = ask(format!("{prompt}{REASK_SUFFIX}"))?;
            match extract_json_array(&again) {
                Ok(v) => (v, true),
                Err(second) => {
                    return Err(FoundryError::Step {
                        step: Step::DraftInstructions.as_str(),
                        reason: format!("reply is not a JSON array ({first}; after re-ask: {second})"),
                        raw_reply: Some(again),
                    })
                }
            }
        }
    };

    let provenance = Provenance {
        steps: [Step::Perceive, Step::AssociateConcepts, Step::DraftInstructions]
            .iter()
            .map(|s| s.as_str().to_string())
            .collect(),
        prompt_hashes: vec![associations.prompt_hash.clone(), prompt_hash.clone()],
    };
    let mut samples = Vec::new();
    let mut quarantined = Vec::new();
    for v in &values {
        match draft_to_sample(v, image_ref, hint, &provenance) {
            Ok(s) => samples.push(s),
            Err(reason) => quarantined.push(Reject {
                image: image_ref.to_string(),
                hint: hint.to_string(),
                step: Step::DraftInstructions,
                reason,
                detail: None,
                raw: v.clone(),
            }),
        }
    }
    Ok(Drafts {
        samples,
        quarantined,
        prompt_hash,
        reasked,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemovedPair {
    pub image: String,
    pub removed: String,
    pub kept: String,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DedupOutcome {
    pub kept: Vec<EditingSample>,
    pub removed: Vec<(EditingSample, RemovedPair)>,
}

/// Exact duplicates first, then a greedy first-wins cosine scan among
/// samples of the same image, in input order.
pub fn dedup(
    samples: Vec<EditingSample>,
    client: &dyn EmbeddingClient,
    threshold: f64,
) -> Result<DedupOutcome, FoundryError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(FoundryError::Config(format!("dedup threshold {threshold} outside [0, 1]")));
    }
    let mut kept: Vec<(EditingSample, Vec<f64>)> = Vec::new();
    let mut removed = Vec::new();
    for s in samples {
        let same_image = || kept.iter().filter(|(k, _)| k.image_ref == s.image_ref);
        if let Some((k, _)) = same_image().find(|(k, _)| k.suggestion == s.suggestion) {
            let pair = RemovedPair {
                image: s.image_ref.clone(),
                removed: s.suggestion.clone(),
                kept: k.suggestion.clone(),
                cosine: 1.0,
            };
            removed.push((s, pair));
            continue;
        }
        let e = client.embed_text(&s.suggestion)?;
        let hit = same_image()
            .map(|(k, ke)| (k, cosine(&e, ke)))
            .find(|&(_, c)| c >= threshold);
        match hit {
            Some((k, c)) => {
                let pair = RemovedPair {
                    image: s.image_ref.clone(),
                    removed: s.suggestion.clone(),
                    kept: k.suggestion.clone(),
                    cosine: c,
                };
                removed.push((s, pair));
            }
            None => kept.push((s, e)),
        }
    }
    Ok(DedupOutcome {
        kept: kept.into_iter().map(|(s, _)| s).collect(),
        removed,
    })
}

/// Key of a sample in the global-score table.
pub fn score_key(s: &EditingSample) -> String {
    format!("{}::{}::{}", s.image_ref, s.hint, s.suggestion)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CurateOutcome {
    pub kept: Vec<EditingSample>,
    pub curated_out: Vec<Reject>,
    pub quarantined: Vec<Reject>,
}

/// Drops global samples whose score is strictly below `threshold`; a
/// missing or out-of-range score quarantines the sample. Locals pass.
pub fn curate_global(samples: Vec<EditingSample>, scores: &BTreeMap<String, f64>, threshold: f64) -> CurateOutcome {
    let mut out = CurateOutcome::default();
    for s in samples {
        if s.scope != Scope::Global {
            out.kept.push(s);
            continue;
        }
        match scores.get(&score_key(&s)) {
            None => out
                .quarantined
                .push(Reject::of_sample(&s, Step::CurateGlobal, "missing similarity score", None)),
            Some(&v) if !(-1.0..=1.0).contains(&v) => out.quarantined.push(Reject::of_sample(
                &s,
                Step::CurateGlobal,
                "similarity score outside [-1, 1]",
                Some(v.to_string()),
            )),
            Some(&v) if v < threshold => out.curated_out.push(Reject::of_sample(
                &s,
                Step::CurateGlobal,
                "similarity below threshold",
                Some(format!("{v} < {threshold}")),
            )),
            Some(_) => out.kept.push(s),
        }
    }
    out
}

/// Violated simplicity rules as `(rule, detail)`.
fn local_violations(s: &EditingSample, max_tokens: usize) -> Vec<(&'static str, String)> {
    let words: Vec<String> = s
        .suggestion
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .collect();
    let mut out = Vec::new();
    if let Some(w) = words.iter().find(|w| LOCAL_STOP_WORDS.contains(&w.as_str())) {
        out.push(("conjunction", format!("contains {w:?}")));
    }
    if words.len() > max_tokens {
        out.push(("too many tokens", format!("{} > {max_tokens}", words.len())));
    }
    out
}

/// Simplicity rule for local suggestions; the error names the violated rules.
pub fn curate_local(s: &EditingSample, max_tokens: usize) -> Result<(), String> {
    let v = local_violations(s, max_tokens);
    if v.is_empty() {
        Ok(())
    } else {
        Err(v.iter().map(|(r, _)| *r).collect::<Vec<_>>().join("; "))
    }
}

/// Applies `curate_local` to local samples; globals pass.
pub fn curate_locals(samples: Vec<EditingSample>, max_tokens: usize) -> CurateOutcome {
    let mut out = CurateOutcome::default();
    for s in samples {
        let v = if s.scope == Scope::Local { local_violations(&s, max_tokens) } else { Vec::new() };
        if v.is_empty() {
            out.kept.push(s);
        } else {
            let reason = v.iter().map(|(r, _)| *r).collect::<Vec<_>>().join("; ");
            let detail = v.iter().map(|(_, d)| d.as_str()).collect::<Vec<_>>().join("; ");
            out.curated_out.push(Reject::of_sample(&s, Step::CurateLocal, reason, Some(detail)));
        }
    }
    out
}
