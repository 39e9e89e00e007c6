use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ier_core::model::Image;

fn ier(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ier"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn core_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn write_pipeline_config(dir: &Path, chat: &str) -> PathBuf {
    let f = core_fixtures().join("foundry");
    let text = format!(
        r#"
seed = 3
[pipeline]
hints = ["luxury", "halloween"]
manifest = "{m}"
perception_fixture = "{p}"
scores = "{s}"
output_dir = "dataset"
retry_backoff_ms = 1
{chat}
"#,
        m = f.join("manifest.csv").display(),
        p = f.join("perception.json").display(),
        s = f.join("scores.json").display(),
    );
    let path = dir.join("ier.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn mock_chat() -> String {
    format!(
        "[pipeline.chat]\nbackend = \"mock\"\nfixture = \"{}\"",
        core_fixtures().join("foundry/chat.json").display()
    )
}

#[test]
fn dataset_build_with_mocks_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_pipeline_config(dir.path(), &mock_chat());
    let cfg = cfg.to_str().unwrap();
    let first = ier(&["dataset", "build", "--config", cfg]);
    assert!(first.status.success(), "{}", stderr(&first));
    let out = dir.path().join("dataset");
    for f in ["dataset.jsonl", "rejects.jsonl", "report.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let bytes = std::fs::read(out.join("dataset.jsonl")).unwrap();
    let again = ier(&["dataset", "build", "--config", cfg, "--output-dir", dir.path().join("again").to_str().unwrap()]);
    assert!(again.status.success());
    assert_eq!(bytes, std::fs::read(dir.path().join("again/dataset.jsonl")).unwrap());
    assert!(stderr(&first).contains("beach_01"));
}

#[test]
fn dataset_build_surfaces_transport_errors() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let chat = format!(
        "[pipeline.chat]\nbackend = \"http\"\nendpoint = \"http://127.0.0.1:{port}/v1/chat/completions\"\nmodel = \"m\""
    );
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_pipeline_config(dir.path(), &chat);
    let o = ier(&["dataset", "build", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("transport error"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_fail_fast() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[train]\nepochs = 1\nlearning_rat = 0.1\n").unwrap();
    let o = ier(&["train", "--synthetic", "4", "--config", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
}

#[test]
fn train_then_generate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = ier(&["train", "--synthetic", "8", "--epochs", "2", "--output-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    // header plus 2 epochs x 2 steps
    assert_eq!(log.lines().count(), 1 + 4);
    let ckpt = out.join("final.ckpt");
    assert!(ckpt.is_file());

    let img = dir.path().join("red.png");
    Image::filled(32, [0.9, 0.1, 0.1]).save_png(&img).unwrap();
    let gen = |extra: &[&str]| {
        let mut args = vec!["generate", "--checkpoint", ckpt.to_str().unwrap(), "--image", img.to_str().unwrap(), "--hint", "red", "--max-new-tokens", "12"];
        args.extend_from_slice(extra);
        ier(&args)
    };
    let a = gen(&[]);
    let b = gen(&[]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a).lines().count(), 1);
    assert_eq!(stdout(&a), stdout(&b));
    let line: serde_json::Value = serde_json::from_str(stdout(&a).trim()).unwrap();
    assert!(line.get("text").is_some());

    let s = gen(&["--mode", "sample", "--n", "3"]);
    assert!(s.status.success());
    assert_eq!(stdout(&s).lines().count(), 3);
    assert_eq!(stdout(&s), stdout(&gen(&["--mode", "sample", "--n", "3"])));
}

#[test]
fn generate_rejects_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = ier(&["train", "--synthetic", "4", "--epochs", "1", "--output-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    // rewrite the header so the stored arrays no longer fit the config
    let bytes = std::fs::read(out.join("final.ckpt")).unwrap();
    let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
    header["config"]["d_vision"] = serde_json::json!(16);
    let new_header = serde_json::to_vec(&header).unwrap();
    let mut corrupt = (new_header.len() as u64).to_le_bytes().to_vec();
    corrupt.extend_from_slice(&new_header);
    corrupt.extend_from_slice(&bytes[8 + len..]);
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, corrupt).unwrap();

    let img = dir.path().join("img.png");
    Image::filled(32, [0.5, 0.5, 0.5]).save_png(&img).unwrap();
    let o = ier(&["generate", "--checkpoint", bad.to_str().unwrap(), "--image", img.to_str().unwrap(), "--hint", "red"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("shape mismatch"), "{}", stderr(&o));
}

#[test]
fn train_without_data_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ier(&["train", "--output-dir", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no training data"));
    let o = ier(&["train", "--dataset", "/nonexistent/data.jsonl", "--manifest", "/nonexistent/m.csv"]);
    assert!(!o.status.success());
}

#[test]
fn gradcheck_passes_on_toy_config() {
    let o = ier(&["gradcheck", "--coords", "60"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("max relative error"));
}

#[test]
fn eval_commands_print_tables() {
    let e = core_fixtures().join("eval");
    let o = ier(&[
        "eval",
        "ranks",
        "--ballots",
        e.join("preference_ballots.csv").to_str().unwrap(),
        "--label",
        "Hint Alignment",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("MagicBrush") && text.contains("2.27") && text.contains("2.43") && text.contains("1.31"));

    let o = ier(&[
        "eval",
        "clip",
        "--results",
        e.join("alignment_results.jsonl").to_str().unwrap(),
        "--embeddings",
        e.join("alignment_embeddings.json").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("0.172") && stdout(&o).contains("0.842"));

    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = ier(&["eval", "clip", "--results", empty.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no records"));
}
