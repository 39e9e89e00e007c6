mod config;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ier_core::codec::vocabulary_for;
use ier_core::eval::{
    aggregate_rankings, alignment_csv, alignment_scores, format_alignment_table, format_rank_table, rankings_csv,
    read_ballots, read_results,
};
use ier_core::foundry::{run_build, EmbeddingClient, FixtureEmbedder, HashingEmbedder, Manifest};
use ier_core::model::{checkpoint, generate, DecodeMode, Image, ModelBundle};
use ier_core::objective::{
    grad_check, prepare, synthesize_dataset, synthetic_vocabulary, train, GradCheckOptions, TrainExample,
};
use ier_core::rng::derive_seed;
use ier_core::sample::{read_jsonl, EditingSample};

use crate::config::AppConfig;

/// Relative error at or above which a gradient check fails.
const GRADCHECK_LIMIT: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "ier", version, about = "Grounded image-editing recommendation toolkit")]
struct Cli {
    /// TOML config; relative paths inside it resolve against its directory.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset collection.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Train the model and write checkpoints plus a loss log.
    Train(TrainArgs),
    /// Print suggestions for an image and hint as JSON lines.
    Generate(GenerateArgs),
    /// Compare analytic and finite-difference gradients of the training loss.
    Gradcheck(GradcheckArgs),
    /// Evaluation tables.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Run the collection pipeline and write dataset, rejects and report.
    Build {
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Train on this many synthetic samples instead of a dataset.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Greedy,
    Sample,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    hint: String,
    #[arg(long, value_enum, default_value = "greedy")]
    mode: Mode,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 48)]
    max_new_tokens: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Train this many steps on synthetic data before checking.
    #[arg(long, default_value_t = 0)]
    after_steps: usize,
    #[arg(long, default_value_t = 240)]
    coords: usize,
    /// Samples in the checked batch.
    #[arg(long, default_value_t = 2)]
    batch: usize,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Embedding-similarity table from a results manifest.
    Clip {
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Also write the scores as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Mean-rank table from a ballots CSV.
    Ranks {
        #[arg(long)]
        ballots: Option<PathBuf>,
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = AppConfig::load_or_default(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    match cli.command {
        Command::Dataset {
            command: DatasetCommand::Build { output_dir },
        } => cmd_dataset_build(cfg, output_dir),
        Command::Train(args) => cmd_train(cfg, args),
        Command::Generate(args) => cmd_generate(&cfg, args),
        Command::Gradcheck(args) => cmd_gradcheck(&cfg, args),
        Command::Eval { command } => match command {
            EvalCommand::Clip {
                results,
                embeddings,
                csv,
            } => cmd_eval_clip(&cfg, results, embeddings, csv),
            EvalCommand::Ranks { ballots, label, csv } => cmd_eval_ranks(&cfg, ballots, label, csv),
        },
    }
}

fn cmd_dataset_build(mut cfg: AppConfig, output_dir: Option<PathBuf>) -> Result<ExitCode> {
    if let Some(dir) = output_dir {
        cfg.pipeline.output_dir = dir;
    }
    let report = run_build(&cfg.pipeline)?;
    for f in &report.failures {
        eprintln!("pair ({}, {}) failed: {}", f.image, f.hint, f.error);
    }
    println!(
        "drafted {} kept {} (global {}, local {}) quarantined {} deduped {} curated-out {}; {} of {} pairs failed",
        report.drafted,
        report.kept,
        report.n_global,
        report.n_local,
        report.quarantined,
        report.deduped,
        report.curated_out,
        report.pairs_failed,
        report.pairs
    );
    println!("wrote {}", cfg.pipeline.output_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn load_dataset(dataset: &Path, manifest: &Path) -> Result<Vec<TrainExample>> {
    let file = File::open(dataset).with_context(|| format!("opening dataset {}", dataset.display()))?;
    let samples: Vec<EditingSample> = read_jsonl(BufReader::new(file)).map_err(anyhow::Error::msg)?;
    let manifest = Manifest::read(manifest)?;
    samples
        .into_iter()
        .map(|sample| {
            let path = manifest
                .entries
                .get(&sample.image_ref)
                .with_context(|| format!("image {:?} is not in the manifest", sample.image_ref))?;
            let image = Image::load_png(path)?;
            Ok(TrainExample { sample, image })
        })
        .collect()
}

fn cmd_train(mut cfg: AppConfig, args: TrainArgs) -> Result<ExitCode> {
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    let out = args.output_dir.unwrap_or_else(|| cfg.output_dir.clone());
    let (data, vocab) = match args.synthetic {
        Some(n) => (synthesize_dataset(cfg.train.seed, n), synthetic_vocabulary()),
        None => {
            let dataset = args.dataset.or(cfg.data.dataset.clone());
            let manifest = args.manifest.or(cfg.data.manifest.clone());
            let (Some(dataset), Some(manifest)) = (dataset, manifest) else {
                bail!("no training data: pass --synthetic N, or a dataset and manifest");
            };
            let data = load_dataset(&dataset, &manifest)?;
            let samples: Vec<EditingSample> = data.iter().map(|e| e.sample.clone()).collect();
            (data, vocabulary_for(&samples))
        }
    };
    std::fs::create_dir_all(&out)?;
    let bundle = ModelBundle::init(cfg.model.clone(), vocab)?;
    let outcome = train(bundle, &data, &cfg.train, Some(&out))?;
    let last = outcome.log.last().context("training ran no steps")?;
    println!(
        "{} steps; final l_total {:.4} (l_txt {:.4}, l_loc {:.4})",
        outcome.log.len(),
        last.l_total,
        last.l_txt,
        last.l_loc
    );
    if let Some(ckpt) = &outcome.final_checkpoint {
        println!("checkpoint {}", ckpt.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_generate(cfg: &AppConfig, args: GenerateArgs) -> Result<ExitCode> {
    let bundle = checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let image = Image::load_png(&args.image)?;
    let seed = cfg.seed.unwrap_or(0);
    for i in 0..args.n {
        let mode = match args.mode {
            Mode::Greedy => DecodeMode::Greedy,
            Mode::Sample => DecodeMode::Sample {
                temperature: args.temperature,
                seed: derive_seed(seed, &format!("generate-{i}")),
            },
        };
        let g = generate(&image, &args.hint, &bundle, mode, args.max_new_tokens)?;
        if g.parse_error.is_some() || g.incomplete || g.box_missing {
            log::warn!("suggestion {i} is malformed: {:?}", g.parse_error);
        }
        println!("{}", serde_json::to_string(&g)?);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(cfg: &AppConfig, args: GradcheckArgs) -> Result<ExitCode> {
    let vocab = synthetic_vocabulary();
    let mut bundle = ModelBundle::init(cfg.model.clone(), vocab.clone())?;
    let data = synthesize_dataset(cfg.train.seed, 64);
    if args.after_steps > 0 {
        let per_epoch = cfg.train.steps_per_epoch(data.len());
        let tc = ier_core::objective::TrainConfig {
            max_steps: Some(args.after_steps),
            epochs: args.after_steps.div_ceil(per_epoch),
            ..cfg.train.clone()
        };
        bundle = train(bundle, &data, &tc, None)?.bundle;
    }
    // one global and one local sample at least
    let prep = prepare(&data[..args.batch.max(2)], &vocab)?;
    let batch: Vec<_> = prep.iter().collect();
    let opts = GradCheckOptions {
        n_coords: args.coords,
        seed: cfg.train.seed,
        ..GradCheckOptions::default()
    };
    let report = grad_check(&bundle, &batch, &cfg.train.weights, &opts)?;
    for g in &report.per_group {
        println!("{:<12} {:>4} coords  max rel error {:.3e}", format!("{:?}", g.group), g.n_coords, g.max_rel_error);
    }
    println!("max relative error {:.3e} over {} coordinates", report.max_rel_error, report.checks.len());
    if report.frozen_nonzero > 0 {
        eprintln!("{} frozen coordinates have nonzero gradient", report.frozen_nonzero);
        return Ok(ExitCode::FAILURE);
    }
    if report.max_rel_error >= GRADCHECK_LIMIT {
        eprintln!("gradient check failed: {:.3e} >= {GRADCHECK_LIMIT:e}", report.max_rel_error);
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval_clip(
    cfg: &AppConfig,
    results: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    csv: Option<PathBuf>,
) -> Result<ExitCode> {
    let results = results.or(cfg.eval.results.clone()).context("no results manifest given")?;
    let records = read_results(&results)?;
    let client: Box<dyn EmbeddingClient> = match embeddings.or(cfg.eval.embeddings.clone()) {
        Some(p) => Box::new(FixtureEmbedder::from_file(&p)?),
        None => Box::new(HashingEmbedder::default()),
    };
    let report = alignment_scores(&records, client.as_ref())?;
    print!("{}", format_alignment_table(&report));
    for m in &report.methods {
        if m.used < m.total {
            eprintln!("{}: {} of {} records used", m.method, m.used, m.total);
        }
    }
    if let Some(p) = csv {
        std::fs::write(p, alignment_csv(&report))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval_ranks(
    cfg: &AppConfig,
    ballots: Option<PathBuf>,
    label: Option<String>,
    csv: Option<PathBuf>,
) -> Result<ExitCode> {
    let ballots = ballots.or(cfg.eval.ballots.clone()).context("no ballots file given")?;
    let set = read_ballots(&ballots)?;
    let means = aggregate_rankings(&set.ballots, set.methods.len())?;
    let label = label.or(cfg.eval.ranks_label.clone()).unwrap_or_else(|| "Mean rank".into());
    print!("{}", format_rank_table(&label, &set.methods, &means));
    if let Some(p) = csv {
        std::fs::write(p, rankings_csv(&set.methods, &means))?;
    }
    Ok(ExitCode::SUCCESS)
}
