//! End-to-end dataset build over (image, hint) pairs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::FoundryError;
use crate::foundry::clients::{
    ChatClient, EmbeddingClient, FixtureChat, FixturePerception, HashingEmbedder, PerceptionClient, RetryPolicy,
};
use crate::foundry::http::{HttpChatClient, DEFAULT_API_KEY_ENV};
use crate::foundry::prompts::{Step, PROMPT_VERSION};
use crate::foundry::steps::{
    associate_concepts, curate_global, curate_locals, dedup, draft_instructions, perceive, Manifest, Reject,
};
use crate::rng::rng_for;
use crate::sample::{write_jsonl, EditingSample, Scope};

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase", deny_unknown_fields)]
pub enum ChatBackend {
    /// Fixture replies by prompt hash, falling back to templated replies.
    Mock { fixture: Option<PathBuf> },
    Http {
        endpoint: String,
        model: String,
        #[serde(default = "default_api_key_env")]
        api_key_env: String,
    },
}

impl Default for ChatBackend {
    fn default() -> Self {
        ChatBackend::Mock { fixture: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub hints: Vec<String>,
    pub manifest: PathBuf,
    pub perception_fixture: PathBuf,
    pub chat: ChatBackend,
    /// Precomputed similarity of each global instruction's edit result,
    /// keyed by `image::hint::suggestion`.
    pub scores: Option<PathBuf>,
    pub dedup_threshold: f64,
    pub global_threshold: f64,
    pub local_max_tokens: usize,
    pub n_concepts: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub max_parallel: usize,
    pub retry_attempts: usize,
    pub retry_backoff_ms: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            hints: Vec::new(),
            manifest: PathBuf::from("manifest.csv"),
            perception_fixture: PathBuf::from("perception.json"),
            chat: ChatBackend::default(),
            scores: None,
            dedup_threshold: 0.95,
            global_threshold: 0.4,
            local_max_tokens: 5,
            n_concepts: 5,
            output_dir: PathBuf::from("dataset"),
            seed: 0,
            max_parallel: 4,
            retry_attempts: 3,
            retry_backoff_ms: 1000,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), FoundryError> {
        let fail = |m: String| Err(FoundryError::Config(m));
        for (name, v) in [("dedup_threshold", self.dedup_threshold), ("global_threshold", self.global_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} {v} outside [0, 1]"));
            }
        }
        if self.max_parallel < 1 {
            return fail("max_parallel must be >= 1".into());
        }
        if self.retry_attempts < 1 {
            return fail("retry_attempts must be >= 1".into());
        }
        if self.n_concepts < 1 {
            return fail("n_concepts must be >= 1".into());
        }
        if self.hints.is_empty() || self.hints.iter().any(|h| h.trim().is_empty()) {
            return fail("hints must be a non-empty list of non-empty strings".into());
        }
        Ok(())
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            attempts: self.retry_attempts,
            initial_backoff: Duration::from_millis(self.retry_backoff_ms),
        }
    }
}

pub struct Clients {
    pub perception: Box<dyn PerceptionClient>,
    pub chat: Box<dyn ChatClient>,
    pub embedding: Box<dyn EmbeddingClient>,
}

impl Clients {
    pub fn from_config(config: &PipelineConfig) -> Result<Self, FoundryError> {
        let chat: Box<dyn ChatClient> = match &config.chat {
            ChatBackend::Mock { fixture: Some(p) } => Box::new(FixtureChat::from_file(p)?),
            ChatBackend::Mock { fixture: None } => Box::new(FixtureChat::default()),
            ChatBackend::Http {
                endpoint,
                model,
                api_key_env,
            } => Box::new(HttpChatClient::new(endpoint, model, api_key_env, config.retry_policy())?),
        };
        Ok(Self {
            perception: Box::new(FixturePerception::from_file(&config.perception_fixture)?),
            chat,
            embedding: Box::new(HashingEmbedder::default()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub image: String,
    pub hint: String,
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_reply: Option<String>,
}

/// Samples entering a curation step and where they went.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepCounts {
    pub input: usize,
    pub kept: usize,
    pub quarantined: usize,
    pub removed: usize,
}

impl StepCounts {
    pub fn is_conserved(&self) -> bool {
        self.input == self.kept + self.quarantined + self.removed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub prompt_version: String,
    pub seed: u64,
    pub pairs: usize,
    pub pairs_failed: usize,
    pub failures: Vec<PairFailure>,
    pub associations: usize,
    pub association_lines_dropped: usize,
    pub reasks: usize,
    pub drafted: usize,
    pub kept: usize,
    pub quarantined: usize,
    pub deduped: usize,
    pub curated_out: usize,
    pub steps: BTreeMap<String, StepCounts>,
    pub drop_reasons: BTreeMap<String, usize>,
    pub n_global: usize,
    pub n_local: usize,
}

impl BuildReport {
    /// Every drafted sample is in exactly one terminal bucket, and each
    /// step accounts for all of its input.
    pub fn is_conserved(&self) -> bool {
        self.drafted == self.kept + self.quarantined + self.deduped + self.curated_out
            && self.steps.values().all(StepCounts::is_conserved)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub samples: Vec<EditingSample>,
    pub rejects: Vec<Reject>,
    pub report: BuildReport,
}

pub fn read_scores(path: &Path) -> Result<BTreeMap<String, f64>, FoundryError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn sort_key(s: &EditingSample) -> (&str, &str, &str) {
    (&s.image_ref, &s.hint, &s.suggestion)
}

/// Down-samples the majority scope to at most one more than the minority.
fn balance(samples: Vec<EditingSample>, seed: u64) -> (Vec<EditingSample>, Vec<Reject>) {
    let (globals, locals): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.scope == Scope::Global);
    let (major, minor) = if globals.len() >= locals.len() { (globals, locals) } else { (locals, globals) };
    let cap = minor.len() + 1;
    if major.len() <= cap {
        let mut all = major;
        all.extend(minor);
        return (all, Vec::new());
    }
    let mut keep_idx = sample_indices(&mut rng_for(seed, "balance"), major.len(), cap).into_vec();
    keep_idx.sort_unstable();
    let mut keep = vec![false; major.len()];
    keep_idx.iter().for_each(|&i| keep[i] = true);
    let mut kept = minor;
    let mut dropped = Vec::new();
    for (s, k) in major.into_iter().zip(keep) {
        if k {
            kept.push(s);
        } else {
            dropped.push(Reject::of_sample(&s, Step::Balance, "scope balance", None));
        }
    }
    (kept, dropped)
}

fn count_reasons(rejects: &[Reject]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for r in rejects {
        *m.entry(format!("{}: {}", r.step.as_str(), r.reason)).or_insert(0) += 1;
    }
    m
}

/// Runs steps 1-4 for every (image, hint) pair. Pairs run concurrently up to
/// `max_parallel`; everything downstream is in sorted order.
pub fn build(config: &PipelineConfig, manifest: &Manifest, clients: &Clients) -> Result<BuildOutput, FoundryError> {
    config.validate()?;
    let scores = match &config.scores {
        Some(p) => read_scores(p)?,
        None => BTreeMap::new(),
    };
    let retry = config.retry_policy();
    let pairs: Vec<(String, String)> = manifest
        .entries
        .keys()
        .flat_map(|img| config.hints.iter().map(move |h| (img.clone(), h.clone())))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.max_parallel)
        .build()
        .map_err(|e| FoundryError::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<(usize, usize, crate::foundry::steps::Drafts), FoundryError>> = pool.install(|| {
        pairs
            .par_iter()
            .map(|(img, hint)| {
                let report = perceive(img, manifest, clients.perception.as_ref(), &retry)?;
                let assoc = associate_concepts(&report, hint, clients.chat.as_ref(), config.n_concepts, &retry)?;
                let drafts = draft_instructions(img, &report, &assoc, hint, clients.chat.as_ref(), &retry)?;
                Ok((assoc.associations.len(), assoc.dropped_lines, drafts))
            })
            .collect()
    });

    let mut failures = Vec::new();
    let mut drafted = Vec::new();
    let mut rejects: Vec<Reject> = Vec::new();
    let (mut associations, mut lines_dropped, mut reasks) = (0, 0, 0);
    for ((img, hint), res) in pairs.iter().zip(results) {
        match res {
            Ok((n_assoc, dropped, drafts)) => {
                associations += n_assoc;
                lines_dropped += dropped;
                reasks += drafts.reasked as usize;
                drafted.extend(drafts.samples);
                rejects.extend(drafts.quarantined);
            }
            Err(e) => {
                let raw_reply = match &e {
                    FoundryError::Step { raw_reply, .. } => raw_reply.clone(),
                    _ => None,
                };
                log::warn!("pair ({img}, {hint}) failed: {e}");
                failures.push(PairFailure {
                    image: img.clone(),
                    hint: hint.clone(),
                    error: e.to_string(),
                    raw_reply,
                });
            }
        }
    }
    let n_quarantined_drafts = rejects.len();
    let n_drafted = drafted.len() + n_quarantined_drafts;
    let mut steps = BTreeMap::new();
    steps.insert(
        Step::DraftInstructions.as_str().to_string(),
        StepCounts {
            input: n_drafted,
            kept: drafted.len(),
            quarantined: n_quarantined_drafts,
            removed: 0,
        },
    );

    drafted.sort_by(|a, b| sort_key(a).cmp(&sort_key(b)));
    let n_in = drafted.len();
    let d = dedup(drafted, clients.embedding.as_ref(), config.dedup_threshold)?;
    let n_deduped = d.removed.len();
    for (s, pair) in &d.removed {
        let reason = if pair.cosine >= 1.0 && pair.removed == pair.kept { "exact duplicate" } else { "near duplicate" };
        let detail = format!("cosine {:.6} with {:?}", pair.cosine, pair.kept);
        rejects.push(Reject::of_sample(s, Step::Dedup, reason, Some(detail)));
    }
    steps.insert(
        Step::Dedup.as_str().to_string(),
        StepCounts {
            input: n_in,
            kept: d.kept.len(),
            quarantined: 0,
            removed: n_deduped,
        },
    );

    let n_in = d.kept.len();
    let g = curate_global(d.kept, &scores, config.global_threshold);
    steps.insert(
        Step::CurateGlobal.as_str().to_string(),
        StepCounts {
            input: n_in,
            kept: g.kept.len(),
            quarantined: g.quarantined.len(),
            removed: g.curated_out.len(),
        },
    );
    let n_global_quarantined = g.quarantined.len();
    let mut curated_out = g.curated_out.len();
    rejects.extend(g.quarantined);
    rejects.extend(g.curated_out);

    let n_in = g.kept.len();
    let l = curate_locals(g.kept, config.local_max_tokens);
    steps.insert(
        Step::CurateLocal.as_str().to_string(),
        StepCounts {
            input: n_in,
            kept: l.kept.len(),
            quarantined: 0,
            removed: l.curated_out.len(),
        },
    );
    curated_out += l.curated_out.len();
    rejects.extend(l.curated_out);

    let n_in = l.kept.len();
    let (mut samples, dropped) = balance(l.kept, config.seed);
    steps.insert(
        Step::Balance.as_str().to_string(),
        StepCounts {
            input: n_in,
            kept: samples.len(),
            quarantined: 0,
            removed: dropped.len(),
        },
    );
    curated_out += dropped.len();
    rejects.extend(dropped);
    samples.sort_by(|a, b| sort_key(a).cmp(&sort_key(b)));

    let n_global = samples.iter().filter(|s| s.scope == Scope::Global).count();
    let report = BuildReport {
        prompt_version: PROMPT_VERSION.to_string(),
        seed: config.seed,
        pairs: pairs.len(),
        pairs_failed: failures.len(),
        failures,
        associations,
        association_lines_dropped: lines_dropped,
        reasks,
        drafted: n_drafted,
        kept: samples.len(),
        quarantined: n_quarantined_drafts + n_global_quarantined,
        deduped: n_deduped,
        curated_out,
        drop_reasons: count_reasons(&rejects),
        steps,
        n_global,
        n_local: samples.len() - n_global,
    };
    if samples.is_empty() {
        return Err(FoundryError::EmptyBuild {
            pairs_failed: report.pairs_failed,
            first_failure: report.failures.first().map(|f| format!("({}, {}): {}", f.image, f.hint, f.error)),
        });
    }
    Ok(BuildOutput {
        samples,
        rejects,
        report,
    })
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const REJECTS_FILE: &str = "rejects.jsonl";
pub const REPORT_FILE: &str = "report.json";

pub fn write_outputs(out: &BuildOutput, dir: &Path) -> Result<(), FoundryError> {
    fs::create_dir_all(dir)?;
    write_jsonl(BufWriter::new(File::create(dir.join(DATASET_FILE))?), &out.samples)?;
    write_jsonl(BufWriter::new(File::create(dir.join(REJECTS_FILE))?), &out.rejects)?;
    let mut report = serde_json::to_string_pretty(&out.report)?;
    report.push('\n');
    fs::write(dir.join(REPORT_FILE), report)?;
    Ok(())
}

/// Builds from a config whose paths are already resolved and writes the
/// three output files into `config.output_dir`.
pub fn run_build(config: &PipelineConfig) -> Result<BuildReport, FoundryError> {
    config.validate()?;
    let manifest = Manifest::read(&config.manifest)?;
    let clients = Clients::from_config(config)?;
    let out = build(config, &manifest, &clients)?;
    write_outputs(&out, &config.output_dir)?;
    Ok(out.report)
}
