use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn anchorseg(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_anchorseg")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "anchorseg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const TINY: &str = r#"
total_iters = 6
warmup_iters = 2
batch_size = 2
max_new_tokens = 12

[data]
seen = ["stripes"]
unseen = ["blobs"]
per_seen = 6
per_unseen = 4
seed = 3

[model]
spam_heads = 2
variant = "full"

[model.lm]
dim = 16
layers = 1
heads = 2
context = 200
mlp_hidden = 32
emb_std = 0.02

[model.decoder]
dim = 32
heads = 2
layers = 1
mlp_hidden = 32
pixel_tokens = 256
query_std = 0.02
"#;

fn only_run_dir(root: &Path) -> std::path::PathBuf {
    let dirs: Vec<_> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

#[test]
fn data_and_corpus_generation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();
    anchorseg(&["gen-data", "--out", d, "--per-seen", "4", "--per-unseen", "2"]);
    let manifest = fs::read_to_string(data.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 3 * 4 + 2);

    let corpus = dir.path().join("corpus.jsonl");
    let c = corpus.to_str().unwrap();
    anchorseg(&["gen-instruct", "--data", d, "--out", c, "--n", "50"]);
    let first = fs::read(&corpus).unwrap();
    anchorseg(&["gen-instruct", "--data", d, "--out", c, "--n", "50"]);
    assert_eq!(fs::read(&corpus).unwrap(), first);
    assert_eq!(String::from_utf8(first).unwrap().lines().count(), 50);
}

#[test]
fn train_eval_segment_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let runs = dir.path().join("runs");
    let out = anchorseg(&["train", "--config", cfg.to_str().unwrap(), "--out", runs.to_str().unwrap()]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("blobs"), "{stdout}");
    assert!(stdout.contains("run directory:"));

    let run = only_run_dir(&runs);
    assert!(run.file_name().unwrap().to_str().unwrap().starts_with("run-"));
    for f in ["config.toml", "vocab.txt", "checkpoint.bin", "corpus.jsonl", "train_log.tsv", "eval/report.kv"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 7);

    let r = run.to_str().unwrap();
    anchorseg(&["eval", "--run", r, "--split", "seen"]);
    assert!(run.join("eval-seen/report.txt").is_file());

    let image = run.join("data/images/blobs_0001.pgm");
    let seg_out = dir.path().join("seg");
    let out = anchorseg(&[
        "segment",
        "--run",
        r,
        "--image",
        image.to_str().unwrap(),
        "--out",
        seg_out.to_str().unwrap(),
    ]);
    assert!(!out.stdout.is_empty());
    assert!(seg_out.join("blobs_0001.mask.pgm").is_file());
    let transcript = fs::read_to_string(seg_out.join("blobs_0001.txt")).unwrap();
    assert!(transcript.starts_with("USER: Please segment the anomalies in this image."));
}

#[test]
fn config_dump_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("cfg.toml");
    anchorseg(&["train", "--lr", "0.001", "--variant", "no-spam", "--dump-config", dump.to_str().unwrap()]);
    let text = fs::read_to_string(&dump).unwrap();
    assert!(text.contains("lr = 0.001"));
    assert!(text.contains("variant = \"no-spam\""));

    let bad = Command::new(env!("CARGO_BIN_EXE_anchorseg"))
        .args(["train", "--warmup-iters", "5000"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    let bad = Command::new(env!("CARGO_BIN_EXE_anchorseg"))
        .args(["ablate", "--variants", "no-such-variant"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}
