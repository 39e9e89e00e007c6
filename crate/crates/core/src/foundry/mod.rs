//! Dataset collection pipeline over pluggable perception, chat and
//! embedding clients.

mod build;
mod clients;
mod http;
mod prompts;
mod steps;

pub use build::{
    build, read_scores, run_build, write_outputs, BuildOutput, BuildReport, ChatBackend, Clients, PairFailure,
    PipelineConfig, StepCounts, DATASET_FILE, REJECTS_FILE, REPORT_FILE,
};
pub use clients::{
    cosine, embedding_tokens, hash_embedding, ChatClient, ChatRequest, EmbeddingClient, FixtureChat,
    FixtureEmbedder, FixturePerception, HashingEmbedder, PerceptionClient, RetryPolicy, EMBEDDING_DIM,
};
pub use http::{HttpChatClient, DEFAULT_API_KEY_ENV};
pub use prompts::{
    extract_json_array, fallback_reply, parse_associations, render_associate_prompt, render_draft_prompt,
    ParsedAssociations, Step, PROMPT_VERSION, REASK_SUFFIX,
};
pub use steps::{
    associate_concepts, curate_global, curate_local, curate_locals, dedup, draft_instructions, perceive, score_key,
    Associations, CurateOutcome, DedupOutcome, Drafts, Manifest, Reject, RemovedPair, LOCAL_STOP_WORDS,
};
