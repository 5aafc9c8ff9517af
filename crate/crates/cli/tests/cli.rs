use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use winojoint_cli::checkpoint::read_checkpoint;
use winojoint_cli::idx::encode_idx;
use winojoint_cli::{ingest_idx, CliError};

fn write(path: &Path, bytes: &[u8]) {
    std::fs::write(path, bytes).unwrap();
}

/// Random 28×28 images with labels, written as train and test pairs.
fn fixture(dir: &Path, n: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for split in ["train", "test"] {
        let pixels: Vec<u8> = (0..n * 784).map(|_| rng.gen()).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let (im, lb) = encode_idx(28, 28, &pixels, &labels);
        write(&dir.join(format!("{split}-images")), &im);
        write(&dir.join(format!("{split}-labels")), &lb);
    }
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "seed = 3\n\
         train_images = train-images\ntrain_labels = train-labels\n\
         test_images = test-images\ntest_labels = test-labels\n\
         batch = 16\npretrain_epochs = 1\nepochs = 1\nlog_every = 0\n\
         finetune_steps = 5\n{extra}"
    );
    let path = dir.join("run.cfg");
    write(&path, text.as_bytes());
    path
}

fn winojoint(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_winojoint")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn idx_rejects_malformed_files() {
    let dir = tempfile::tempdir().unwrap();
    let (im, lb) = encode_idx(2, 2, &[0, 64, 128, 255, 1, 2, 3, 4], &[3, 7]);
    let (ip, lp) = (dir.path().join("im"), dir.path().join("lb"));

    write(&ip, &im);
    write(&lp, &lb);
    let ds = ingest_idx(&ip, &lp).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.labels(), &[3, 7]);
    assert_eq!(ds.image(0).unwrap().data()[3], 1.0);

    write(&ip, &lb);
    assert!(matches!(ingest_idx(&ip, &lp), Err(CliError::BadMagic { .. })));

    write(&ip, &im[..im.len() - 1]);
    assert!(matches!(ingest_idx(&ip, &lp), Err(CliError::Truncated { .. })));
    write(&ip, &im[..10]);
    assert!(matches!(ingest_idx(&ip, &lp), Err(CliError::Truncated { .. })));

    let (_, lb3) = encode_idx(2, 2, &[], &[1, 2, 3]);
    write(&ip, &im);
    write(&lp, &lb3);
    assert!(matches!(ingest_idx(&ip, &lp), Err(CliError::CountMismatch { images: 2, labels: 3 })));

    let (im0, lb0) = encode_idx(2, 2, &[], &[]);
    write(&ip, &im0);
    write(&lp, &lb0);
    assert!(ingest_idx(&ip, &lp).unwrap().is_empty());
}

#[test]
fn idx_reads_gzip() {
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    let (im, lb) = encode_idx(1, 3, &[0, 255, 51], &[9]);
    let gz = |b: &[u8]| {
        let mut e = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        e.write_all(b).unwrap();
        e.finish().unwrap()
    };
    let (ip, lp) = (dir.path().join("im.gz"), dir.path().join("lb"));
    write(&ip, &gz(&im));
    write(&lp, &lb);
    let ds = ingest_idx(&ip, &lp).unwrap();
    assert_eq!(ds.image(0).unwrap().data(), &[0.0, 1.0, 0.2]);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 96);
    let cfg = config(dir.path(), "");
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));

    let o = winojoint(&["--config", s(&cfg), "--out", s(&full), "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // Stop mid-pretraining, then again right at the phase switch.
    let o = winojoint(&["--config", s(&cfg), "--out", s(&part), "train", "--max-iters", "4"]);
    assert!(o.status.success());
    let ck = part.join("checkpoint.wspc");
    let o = winojoint(&["--config", s(&cfg), "--out", s(&part), "train", "--resume", s(&ck), "--max-iters", "2"]);
    assert!(o.status.success());
    let o = winojoint(&["--config", s(&cfg), "--out", s(&part), "train", "--resume", s(&ck)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let a = read_checkpoint(&std::fs::read(full.join("checkpoint.wspc")).unwrap()).unwrap();
    let b = read_checkpoint(&std::fs::read(&ck).unwrap()).unwrap();
    assert_eq!(a.iteration, 12);
    assert_eq!(a, b);
    let history = std::fs::read_to_string(full.join("history.csv")).unwrap();
    assert!(history.contains("# seed=3\n"));
    assert_eq!(history.lines().filter(|l| !l.starts_with('#')).count(), 13);
}

#[test]
fn pipeline_roundtrips_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 64);
    let cfg = config(dir.path(), "");
    let out = dir.path().join("out");
    assert!(winojoint(&["--config", s(&cfg), "--out", s(&out), "train"]).status.success());
    let o = winojoint(&["--config", s(&cfg), "--out", s(&out), "compress", s(&out.join("checkpoint.wspc"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let model = out.join("model.wspz");
    for f in ["compress.csv", "finetune.csv", "layers.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }

    // Decoding and re-encoding reproduces the container byte for byte.
    let bytes = std::fs::read(&model).unwrap();
    let qm = winojoint::compressor::read_container(&bytes).unwrap();
    assert_eq!(winojoint::compressor::write_container(&qm).unwrap(), bytes);

    for engine in ["spatial", "winograd"] {
        let o = winojoint(&["--config", s(&cfg), "--out", s(&out), "--engine", engine, "deploy", s(&model)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let eval = std::fs::read_to_string(out.join("eval.csv")).unwrap();
        assert!(eval.lines().last().unwrap().starts_with(engine));
    }
    assert!(winojoint(&["--config", s(&cfg), "--out", s(&out), "decompress", s(&model)]).status.success());
    assert!(winojoint(&["--config", s(&cfg), "--out", s(&out), "report", s(&out.join("checkpoint.wspc"))]).status.success());
    let table = std::fs::read_to_string(out.join("report_compression.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("duq,") || l.starts_with("uq,")).count(), 6);
    assert!(out.join("report_accuracy.csv").exists());

    let mut bad = bytes.clone();
    bad[bytes.len() / 2] ^= 0x40;
    let corrupt = dir.path().join("bad.wspz");
    write(&corrupt, &bad);
    let o = winojoint(&["--config", s(&cfg), "--out", s(&out), "decompress", s(&corrupt)]);
    assert_eq!(o.status.code(), Some(CliError::EXIT_FORMAT));
    assert!(String::from_utf8_lossy(&o.stderr).contains("CRC"));
}

#[test]
fn invalid_input_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), 16);
    let bad_key = config(dir.path(), "learning_rate = 0.1\n");
    let o = winojoint(&["--config", s(&bad_key), "train"]);
    assert_eq!(o.status.code(), Some(CliError::EXIT_CONFIG));

    let bad_value = config(dir.path(), "ssd = 140\n");
    assert_eq!(winojoint(&["--config", s(&bad_value), "train"]).status.code(), Some(CliError::EXIT_CONFIG));

    let cfg = config(dir.path(), "");
    assert_eq!(winojoint(&["--config", s(&cfg), "--engine", "fft", "train"]).status.code(), Some(CliError::EXIT_CONFIG));
    let missing = dir.path().join("missing.wspz");
    assert_eq!(winojoint(&["--config", s(&cfg), "deploy", s(&missing)]).status.code(), Some(CliError::EXIT_IO));

    write(&dir.path().join("train-images"), b"\x00\x00\x08\x01junk");
    assert_eq!(winojoint(&["--config", s(&cfg), "train"]).status.code(), Some(CliError::EXIT_FORMAT));
}

#[test]
fn selftest_passes() {
    let o = winojoint(&["selftest"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().count() >= 5 && text.lines().all(|l| l.starts_with("PASS")), "{text}");
}
