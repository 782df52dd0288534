//! End-to-end checks of the command-line binary: subcommand behavior, exit
//! codes, file outputs, and run-to-run determinism.

use std::path::Path;
use std::process::{Command, Output};

use dprcnet::checkpoint::{self, CheckpointMeta};
use dprcnet::dataset::Manifest;
use dprcnet_core::separator::{DpRcNet, ModelConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dprcnet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TOY_CONFIG: &str = "\
model.L = 16\n\
model.N = 64\n\
model.B = 16\n\
model.I = 16\n\
model.D = 4,8,16,32\n\
model.blocks = 1,1,2,1\n\
model.hidden = 16\n\
model.droppath_max = 0.0\n\
train.epochs = 1\n\
train.batch_size = 2\n\
train.seed = 5\n\
data.duration_s = 0.25\n\
";

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        frame_len: 16,
        stride: 8,
        encoder_dim: 64,
        bottleneck_dim: 16,
        chunk_size: 16,
        hop: 8,
        stage_dims: vec![4, 8, 16, 32],
        stage_blocks: vec![1, 1, 2, 1],
        lstm_hidden: 16,
        num_speakers: 2,
        layerscale_init: 1e-6,
        droppath_max: 0.0,
    }
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_flag_exits_2() {
    let out = run(&["analyze", "--bogus-flag", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_error_exits_1() {
    let out = run(&["analyze", "--config", "/definitely/not/here.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn analyze_reports_paper_scale_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("paper.cfg");
    std::fs::write(&cfg, "# paper defaults\n").unwrap();
    let out = run(&["analyze", "--config", cfg.to_str().unwrap(), "--seconds", "4"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let grab = |key: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(key))
            .unwrap_or_else(|| panic!("missing {key} in output:\n{text}"))
            .parse()
            .unwrap()
    };
    let params = grab("params_total=");
    let macs = grab("macs_total=");
    assert!((params - 9.2e6).abs() / 9.2e6 <= 0.10, "params {params}");
    assert!((macs - 76.63e9).abs() / 76.63e9 <= 0.10, "macs {macs}");
}

#[test]
fn gen_data_writes_corpus_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("data");
    let out = run(&[
        "gen-data",
        "--num",
        "3",
        "--seconds",
        "0.25",
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let manifest = Manifest::read(&out_dir.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.entries.len(), 3);
    for e in &manifest.entries {
        assert!(out_dir.join(&e.mixture).exists());
        assert!(out_dir.join(&e.source1).exists());
        assert!(out_dir.join(&e.source2).exists());
    }
}

#[test]
fn separate_writes_one_wav_per_speaker() {
    let dir = tempfile::tempdir().unwrap();
    // A checkpoint for an untrained toy model is enough for the contract.
    let ckpt = dir.path().join("model.ckpt");
    let model = DpRcNet::init(toy_model_config(), 3).unwrap();
    checkpoint::save(&model, CheckpointMeta { epoch: 0, best_score: None }, &ckpt).unwrap();

    let data_dir = dir.path().join("data");
    run(&[
        "gen-data",
        "--num",
        "1",
        "--seconds",
        "1",
        "--out",
        data_dir.to_str().unwrap(),
        "--seed",
        "2",
    ]);
    let out_dir = dir.path().join("sep");
    let out = run(&[
        "separate",
        "--model",
        ckpt.to_str().unwrap(),
        "--input",
        data_dir.join("mix_0000.wav").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for name in ["mix_0000_s1.wav", "mix_0000_s2.wav"] {
        let path = out_dir.join(name);
        assert!(path.exists(), "{name} missing");
        let w = dprcnet::wav::read_wav(&path).unwrap();
        assert_eq!(w.len(), 8000, "{name} should hold 1 s at 8 kHz");
    }
}

#[test]
fn evaluate_prints_hash_stamped_report() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let model = DpRcNet::init(toy_model_config(), 4).unwrap();
    checkpoint::save(&model, CheckpointMeta { epoch: 0, best_score: None }, &ckpt).unwrap();
    let data_dir = dir.path().join("data");
    run(&[
        "gen-data",
        "--num",
        "2",
        "--seconds",
        "0.25",
        "--out",
        data_dir.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    let out = run(&[
        "evaluate",
        "--model",
        ckpt.to_str().unwrap(),
        "--manifest",
        data_dir.join("manifest.tsv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.starts_with("config_hash="));
    assert_eq!(text.lines().filter(|l| l.starts_with("mean\t")).count(), 1);
    // Header, column names, two entries, mean.
    assert_eq!(text.lines().count(), 5);
}

fn run_training(dir: &Path, tag: &str) -> (Vec<u8>, Vec<u8>) {
    let cfg = dir.join(format!("{tag}.cfg"));
    std::fs::write(&cfg, TOY_CONFIG).unwrap();
    let data_dir = dir.join("train_data");
    if !data_dir.exists() {
        run(&[
            "gen-data",
            "--num",
            "4",
            "--seconds",
            "0.25",
            "--out",
            data_dir.to_str().unwrap(),
            "--seed",
            "21",
        ]);
    }
    let out_dir = dir.join(format!("out_{tag}"));
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--train-manifest",
        data_dir.join("manifest.tsv").to_str().unwrap(),
        "--valid-manifest",
        data_dir.join("manifest.tsv").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    (
        std::fs::read(out_dir.join("train_log.tsv")).unwrap(),
        std::fs::read(out_dir.join("best.ckpt")).unwrap(),
    )
}

#[test]
fn train_outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (log_a, ckpt_a) = run_training(dir.path(), "a");
    let (log_b, ckpt_b) = run_training(dir.path(), "b");
    assert_eq!(log_a, log_b, "training logs differ between identical runs");
    assert_eq!(ckpt_a, ckpt_b, "checkpoints differ between identical runs");
    let text = String::from_utf8(log_a).unwrap();
    assert!(text.starts_with("# epoch\ttrain_loss\tvalid_sisdri\tlr\n"));
    assert_eq!(text.lines().count(), 2); // header + 1 epoch
}
