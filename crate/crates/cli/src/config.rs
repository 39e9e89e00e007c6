use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ier_core::foundry::{ChatBackend, PipelineConfig};
use ier_core::model::ModelConfig;
use ier_core::objective::TrainConfig;
use serde::Deserialize;

/// Inputs for training on a built dataset.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset JSONL produced by `dataset build`.
    pub dataset: Option<PathBuf>,
    /// `image_ref,path` CSV locating the PNG for each sample.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub results: Option<PathBuf>,
    /// Fixture vectors for texts and images; the hashing embedder otherwise.
    pub embeddings: Option<PathBuf>,
    pub ballots: Option<PathBuf>,
    pub ranks_label: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Overrides the seed of every section when set.
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSection,
    pub pipeline: PipelineConfig,
    pub eval: EvalSection,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output_dir: PathBuf::from("runs"),
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            data: DataSection::default(),
            pipeline: PipelineConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

impl AppConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: AppConfig = toml::from_str(text)?;
        cfg.resolve_paths(base);
        if let Some(seed) = cfg.seed {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }

    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("invalid config {}", path.display()))
    }

    /// The config at `path`, or defaults relative to the working directory.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.model.seed = seed;
        self.train.seed = seed;
        self.pipeline.seed = seed;
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output_dir);
        resolve_opt(base, &mut self.data.dataset);
        resolve_opt(base, &mut self.data.manifest);
        let p = &mut self.pipeline;
        resolve(base, &mut p.manifest);
        resolve(base, &mut p.perception_fixture);
        resolve(base, &mut p.output_dir);
        resolve_opt(base, &mut p.scores);
        if let ChatBackend::Mock { fixture } = &mut p.chat {
            resolve_opt(base, fixture);
        }
        resolve_opt(base, &mut self.eval.results);
        resolve_opt(base, &mut self.eval.embeddings);
        resolve_opt(base, &mut self.eval.ballots);
    }
}
