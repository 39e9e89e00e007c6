//! Acceptance checks. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line; exits nonzero if any fails.

mod support;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ier_core::codec::render_prompt;
use ier_core::eval::{aggregate_rankings, alignment_scores, read_ballots, Ballot, ResultRecord};
use ier_core::foundry::{
    build, curate_global, run_build, ChatBackend, Clients, HashingEmbedder, Manifest, PipelineConfig, DATASET_FILE,
    REJECTS_FILE, REPORT_FILE,
};
use ier_core::geometry::box_iou;
use ier_core::model::{generate, DecodeMode, Group, ModelBundle, ModelConfig};
use ier_core::objective::{
    evaluate_batch, grad_check, prepare, synthesize_dataset, synthetic_vocabulary, train, GradCheckOptions, LogRow,
    TrainConfig,
};
use ier_core::sample::{EditingSample, LossWeights, Provenance, Scope};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ORACLE_PAIRS: usize = 1000;
const ORACLE_BUDGET: Duration = Duration::from_secs(30);

const GRADCHECK_LIMIT: f64 = 1e-4;
const GRADCHECK_EPS: f64 = 1e-5;
const GRADCHECK_MIN_COORDS: usize = 200;
const GRADCHECK_STEPS: usize = 50;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);

const IDENTITY_TOLERANCE: f64 = 1e-12;
const LAMBDA_TXT: f64 = 1.0;
const LAMBDA_LOC: f64 = 2.0;

const TRAIN_SAMPLES: usize = 256;
const TRAIN_EPOCHS: usize = 3;
const HELD_OUT_LOCAL: usize = 64;
const MIN_EDIT_RATE: f64 = 0.95;
const MIN_IOU_RATE: f64 = 0.80;
const IOU_THRESHOLD: f64 = 0.5;
const MIN_LOSS_REDUCTION: f64 = 0.5;
const MOVING_AVERAGE: usize = 20;
const GROUNDING_BUDGET: Duration = Duration::from_secs(15 * 60);
const MAX_NEW_TOKENS: usize = 32;

const ROUND_TRIPS: usize = 500;
const GLOBAL_THRESHOLD: f64 = 0.4;
const RANDOM_BALLOT_SETS: usize = 100;
const REFERENCE_ROW: [f64; 3] = [2.27, 2.43, 1.31];
const ROW_TOLERANCE: f64 = 0.005;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn oracle() -> Outcome {
    let t = Instant::now();
    let (worst, invariants) = support::oracle_sweep(2024, ORACLE_PAIRS);
    let elapsed = t.elapsed();
    ensure(
        worst <= support::ORACLE_TOLERANCE && invariants && elapsed < ORACLE_BUDGET,
        format!(
            "{ORACLE_PAIRS} pairs, worst deviation {worst:.2e} (tol {:.0e}), invariants {}, {elapsed:.1?}",
            support::ORACLE_TOLERANCE,
            if invariants { "hold" } else { "violated" }
        ),
    )
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let vocab = synthetic_vocabulary();
    let bundle = ModelBundle::init(ModelConfig::toy(), vocab.clone()).map_err(|e| e.to_string())?;
    let data = synthesize_dataset(0, TRAIN_SAMPLES);
    let probe = prepare(&data[..2], &vocab).map_err(|e| e.to_string())?;
    let batch: Vec<_> = probe.iter().collect();
    let opts = GradCheckOptions {
        eps: GRADCHECK_EPS,
        n_coords: 240,
        ..GradCheckOptions::default()
    };
    let weights = LossWeights::default();
    let at_init = grad_check(&bundle, &batch, &weights, &opts).map_err(|e| e.to_string())?;

    let cfg = TrainConfig {
        max_steps: Some(GRADCHECK_STEPS),
        epochs: 1,
        ..TrainConfig::default()
    };
    let trained = train(bundle, &data, &cfg, None).map_err(|e| e.to_string())?;
    let after = grad_check(&trained.bundle, &batch, &weights, &opts).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();

    let groups_ok = |r: &ier_core::objective::GradCheckReport| {
        r.per_group.iter().all(|g| g.n_coords > 0) && r.per_group.len() == 3 && r.frozen_nonzero == 0
    };
    ensure(
        at_init.max_rel_error < GRADCHECK_LIMIT
            && after.max_rel_error < GRADCHECK_LIMIT
            && at_init.checks.len() >= GRADCHECK_MIN_COORDS
            && after.checks.len() >= GRADCHECK_MIN_COORDS
            && trained.log.len() == GRADCHECK_STEPS
            && groups_ok(&at_init)
            && groups_ok(&after)
            && elapsed < GRADCHECK_BUDGET,
        format!(
            "max rel error {:.2e} at init, {:.2e} after {} steps ({} coords, limit {GRADCHECK_LIMIT:.0e}), {elapsed:.1?}",
            at_init.max_rel_error,
            after.max_rel_error,
            trained.log.len(),
            at_init.checks.len()
        ),
    )
}

/// One 3-epoch run shared by the identity, freezing and grounding checks.
struct Run {
    log: Vec<LogRow>,
    bundle: ModelBundle,
    encoder_before: Vec<u8>,
    elapsed: Duration,
}

fn three_epoch_run() -> Result<Run, String> {
    let t = Instant::now();
    let bundle = ModelBundle::init(ModelConfig::toy(), synthetic_vocabulary()).map_err(|e| e.to_string())?;
    let encoder_before = bundle.group_bytes(Group::Encoder);
    let cfg = TrainConfig {
        epochs: TRAIN_EPOCHS,
        ..TrainConfig::default()
    };
    let out = train(bundle, &synthesize_dataset(0, TRAIN_SAMPLES), &cfg, None).map_err(|e| e.to_string())?;
    Ok(Run {
        log: out.log,
        bundle: out.bundle,
        encoder_before,
        elapsed: t.elapsed(),
    })
}

fn composite_identity(run: &Run) -> Outcome {
    let weights = LossWeights::default();
    let constants = weights.lambda_txt == LAMBDA_TXT && weights.lambda_loc == LAMBDA_LOC;
    let worst = run
        .log
        .iter()
        .map(|r| (r.l_total - (LAMBDA_TXT * r.l_txt + LAMBDA_LOC * r.l_loc)).abs())
        .fold(0.0, f64::max);

    let globals: Vec<_> = synthesize_dataset(5, 16)
        .into_iter()
        .filter(|e| e.sample.scope == Scope::Global)
        .collect();
    let prepared = prepare(&globals, run.bundle.vocab()).map_err(|e| e.to_string())?;
    let batch: Vec<_> = prepared.iter().collect();
    let eval = evaluate_batch(&run.bundle, &batch, &weights, true).map_err(|e| e.to_string())?;
    let grads = eval.grads.ok_or("no gradients returned")?;
    let localizer_zero = run
        .bundle
        .params()
        .iter()
        .zip(&grads)
        .filter(|(p, _)| p.group == Group::Localizer)
        .all(|(_, g)| g.data().iter().all(|&v| v == 0.0));
    ensure(
        constants && worst <= IDENTITY_TOLERANCE && eval.breakdown.l_loc == 0.0 && localizer_zero,
        format!(
            "weights ({}, {}), {} steps, worst |total - (txt + 2 loc)| {worst:.1e}; all-global batch of {}: l_loc {}, localizer grads {}",
            weights.lambda_txt,
            weights.lambda_loc,
            run.log.len(),
            batch.len(),
            eval.breakdown.l_loc,
            if localizer_zero { "exactly zero" } else { "nonzero" }
        ),
    )
}

fn freezing(run: &Run) -> Outcome {
    let after = run.bundle.group_bytes(Group::Encoder);
    ensure(
        !after.is_empty() && after == run.encoder_before && run.bundle.freeze.is_frozen(Group::Encoder),
        format!("encoder bytes {} identical after {} steps", after.len(), run.log.len()),
    )
}

fn moving_average(log: &[LogRow], at_start: bool) -> f64 {
    let w = MOVING_AVERAGE.min(log.len());
    let rows = if at_start { &log[..w] } else { &log[log.len() - w..] };
    rows.iter().map(|r| r.l_total).sum::<f64>() / w as f64
}

fn grounding(run: &Run) -> Outcome {
    let held: Vec<_> = synthesize_dataset(1000, 4 * HELD_OUT_LOCAL)
        .into_iter()
        .filter(|e| e.sample.scope == Scope::Local)
        .take(HELD_OUT_LOCAL)
        .collect();
    if held.len() < HELD_OUT_LOCAL {
        return Err(format!("only {} held-out local samples", held.len()));
    }
    let t = Instant::now();
    let (mut edit, mut grounded) = (0usize, 0usize);
    for ex in &held {
        let g = generate(&ex.image, &ex.sample.hint, &run.bundle, DecodeMode::Greedy, MAX_NEW_TOKENS)
            .map_err(|e| e.to_string())?;
        if g.edit_token && g.parse_error.is_none() {
            edit += 1;
        }
        if let (Some(p), Some(gt)) = (g.target_box, ex.sample.target_box) {
            if box_iou(&p, &gt) >= IOU_THRESHOLD {
                grounded += 1;
            }
        }
    }
    let elapsed = run.elapsed + t.elapsed();
    let n = held.len() as f64;
    let (edit_rate, iou_rate) = (edit as f64 / n, grounded as f64 / n);
    let (start, end) = (moving_average(&run.log, true), moving_average(&run.log, false));
    let reduction = 1.0 - end / start;
    ensure(
        edit_rate >= MIN_EDIT_RATE
            && iou_rate >= MIN_IOU_RATE
            && reduction >= MIN_LOSS_REDUCTION
            && elapsed < GROUNDING_BUDGET,
        format!(
            "parseable with EDIT {edit}/{} ({:.1}%), IoU >= {IOU_THRESHOLD} {grounded}/{} ({:.1}%), loss {start:.3} -> {end:.3} ({:.0}% lower), {elapsed:.1?}",
            held.len(),
            100.0 * edit_rate,
            held.len(),
            100.0 * iou_rate,
            100.0 * reduction
        ),
    )
}

fn template() -> Outcome {
    let (ok, n) = support::template_round_trips(99, ROUND_TRIPS);
    let hint = "a rainy day in Paris";
    let expected = format!(
        "HUMAN: ⟨IMAGE⟩ Given the input image and analyzing the image content, please give one image editing suggestion about the editing hint: {hint}. ASSISTANT:"
    );
    let exact = render_prompt(hint).as_bytes() == expected.as_bytes();
    ensure(
        ok == n && n == ROUND_TRIPS && exact,
        format!("{ok}/{n} round trips, prompt byte-exact: {exact}"),
    )
}

fn curation() -> Outcome {
    let sample = |suggestion: &str| EditingSample {
        image_ref: "img".into(),
        hint: "luxury".into(),
        scope: Scope::Global,
        suggestion: suggestion.into(),
        target_box: None,
        edited_object: "scene".into(),
        provenance: Provenance::default(),
    };
    let scored = [("below", 0.3999), ("boundary", 0.40), ("above", 0.41)];
    let scores = scored
        .iter()
        .map(|(s, v)| (format!("img::luxury::{s}"), *v))
        .collect();
    let curated = curate_global(scored.iter().map(|(s, _)| sample(s)).collect(), &scores, GLOBAL_THRESHOLD);
    let kept: Vec<&str> = curated.kept.iter().map(|s| s.suggestion.as_str()).collect();
    let strict = kept == ["boundary", "above"] && curated.curated_out.len() == 1;

    let dir = fixtures().join("foundry");
    let config = |seed: u64, out: &Path| PipelineConfig {
        hints: vec!["luxury".into(), "halloween".into()],
        manifest: dir.join("manifest.csv"),
        perception_fixture: dir.join("perception.json"),
        chat: ChatBackend::Mock {
            fixture: Some(dir.join("chat.json")),
        },
        scores: Some(dir.join("scores.json")),
        seed,
        retry_backoff_ms: 0,
        output_dir: out.to_path_buf(),
        ..PipelineConfig::default()
    };
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = config(7, &a);
    let manifest = Manifest::read(&cfg.manifest).map_err(|e| e.to_string())?;
    let out = build(&cfg, &manifest, &Clients::from_config(&cfg).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let r = &out.report;
    let balanced = r.n_global.abs_diff(r.n_local) <= 1;
    let conserved = r.drafted == r.kept + r.quarantined + r.deduped + r.curated_out;

    run_build(&cfg).map_err(|e| e.to_string())?;
    run_build(&config(7, &b)).map_err(|e| e.to_string())?;
    let identical = [DATASET_FILE, REJECTS_FILE, REPORT_FILE]
        .iter()
        .all(|f| matches!((std::fs::read(a.join(f)), std::fs::read(b.join(f))), (Ok(x), Ok(y)) if x == y));
    ensure(
        strict && balanced && conserved && identical,
        format!(
            "boundary 0.40 kept, 0.3999 dropped: {strict}; global {} / local {}; drafted {} = kept {} + quarantined {} + deduped {} + curated out {}; byte-identical rebuild: {identical}",
            r.n_global, r.n_local, r.drafted, r.kept, r.quarantined, r.deduped, r.curated_out
        ),
    )
}

fn evaluation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for set in 0..RANDOM_BALLOT_SETS {
        let m = 2 + set % 5;
        let ballots: Vec<Ballot> = (0..1 + set)
            .map(|i| {
                let mut ranking: Vec<u32> = (1..=m as u32).collect();
                ranking.shuffle(&mut rng);
                Ballot {
                    participant: format!("p{i}"),
                    item: "x".into(),
                    ranking,
                }
            })
            .collect();
        let means = aggregate_rankings(&ballots, m).map_err(|e| e.to_string())?;
        let mean = means.iter().sum::<f64>() / m as f64;
        worst = worst.max((mean - (m as f64 + 1.0) / 2.0).abs());
    }

    let set = read_ballots(&fixtures().join("eval/preference_ballots.csv")).map_err(|e| e.to_string())?;
    let row = aggregate_rankings(&set.ballots, set.methods.len()).map_err(|e| e.to_string())?;
    let row_ok = row.len() == 3 && row.iter().zip(REFERENCE_ROW).all(|(g, w)| (g - w).abs() < ROW_TOLERANCE);

    let records: Vec<ResultRecord> = ["dog_01", "beach_01"]
        .iter()
        .map(|s| ResultRecord {
            source: s.to_string(),
            hint: "luxury".into(),
            method: "identity".into(),
            edited: Some(s.to_string()),
            embedding: None,
        })
        .collect();
    let report = alignment_scores(&records, &HashingEmbedder::default()).map_err(|e| e.to_string())?;
    let identical = report.methods[0].image_score.unwrap_or(f64::NAN);

    ensure(
        worst < 1e-12 && row_ok && (identical - 1.0).abs() < 1e-12,
        format!(
            "mean-of-means worst deviation {worst:.1e} over {RANDOM_BALLOT_SETS} sets; fixture row ({:.4}, {:.4}, {:.4}); identical embeddings {identical:.6}",
            row[0], row[1], row[2]
        ),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("box geometry oracle", oracle()),
        ("gradient check", gradient_check()),
    ];
    match three_epoch_run() {
        Ok(run) => {
            results.push(("composite loss identity", composite_identity(&run)));
            results.push(("encoder freezing", freezing(&run)));
            results.push(("synthetic grounding", grounding(&run)));
        }
        Err(e) => {
            for name in ["composite loss identity", "encoder freezing", "synthetic grounding"] {
                results.push((name, Err(format!("training failed: {e}"))));
            }
        }
    }
    results.push(("template round trip", template()));
    results.push(("curation semantics", curation()));
    results.push(("evaluation arithmetic", evaluation()));

    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("[{}] PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[{}] FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
