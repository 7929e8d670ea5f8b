use std::path::Path;
use std::process::{Command, Output};

use candle_core::DType;
use genhance::cli::{fmse_checkpoint, Checkpoint, PipelineConfig, Run, RunDir};
use genhance::dsp::MelConfig;
use genhance::fmse::Fmse;
use genhance::{AudioBuffer, Error};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_genhance"));
    c.env("RUST_LOG", "warn");
    c
}

fn run_in(root: &Path, args: &[&str]) -> Output {
    bin().env("GENHANCE_RUN_ROOT", root).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Four short utterances, K = 8 and a handful of optimizer steps.
fn micro_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::toy();
    cfg.run_name = "micro".into();
    cfg.corpus.n_utterances = 4;
    cfg.tokenizer.k = 8;
    cfg.saslm.model.k = 8;
    cfg.fmse.model.k = 8;
    cfg.saslm.lm.steps = 4;
    cfg.saslm.lm.warmup_steps = 1;
    cfg.saslm.encoder.steps = 2;
    cfg.saslm.encoder.warmup_steps = 1;
    cfg.fmse.optim.steps = 4;
    cfg.fmse.optim.warmup_steps = 1;
    cfg.sweep.nfe = vec![1, 2];
    cfg.sweep.cfg_strength = vec![0.0, 0.5];
    cfg.sweep.sway = vec![-1.0];
    cfg
}

fn write_config(dir: &Path, cfg: &PipelineConfig) -> String {
    let p = dir.join("micro.toml");
    std::fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn unknown_command_is_usage_error() {
    let o = bin().arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = bin().arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn printed_config_parses_back() {
    for (profile, expected) in [("toy", PipelineConfig::toy()), ("small", PipelineConfig::small())] {
        let o = bin().args(["print-config", "--profile", profile]).output().unwrap();
        assert!(o.status.success());
        let text = String::from_utf8(o.stdout).unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), expected);
    }
}

#[test]
fn bad_config_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "seed = 1\nlearning_rate = 3\n").unwrap();
    let o = run_in(dir.path(), &["--config", p.to_str().unwrap(), "simulate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn missing_upstream_stage_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["fm-train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`simulate`"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), &micro_config());
    assert!(run_in(dir.path(), &["--config", &cfg, "simulate"]).status.success());
    let o = run_in(dir.path(), &["--config", &cfg, "fm-train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`tokenizer-train`"), "{}", stderr(&o));
}

#[test]
fn simulate_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &micro_config());
    let manifest = dir.path().join("micro/manifests/pairs.jsonl");
    assert!(run_in(dir.path(), &["--config", &cfg, "simulate", "--random-recipes"]).status.success());
    let first = std::fs::read(&manifest).unwrap();
    let wav = std::fs::read(dir.path().join("micro/audio/degraded/utt000.wav")).unwrap();
    assert!(run_in(dir.path(), &["--config", &cfg, "simulate", "--random-recipes"]).status.success());
    assert_eq!(first, std::fs::read(&manifest).unwrap());
    assert_eq!(wav, std::fs::read(dir.path().join("micro/audio/degraded/utt000.wav")).unwrap());
    assert!(dir.path().join("micro/config.snapshot").exists());
}

#[test]
fn micro_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root, &micro_config());
    for args in [
        vec!["simulate"],
        vec!["tokenizer-train"],
        vec!["saslm-train", "--phase", "lm"],
        vec!["saslm-train", "--phase", "encoder"],
        vec!["fm-train"],
        vec!["fm-train", "--no-degrad-mask", "--no-semantic", "--tag", "ablate"],
        vec!["evaluate", "--nfe", "2"],
        vec!["evaluate", "--nfe", "2", "--no-semantic", "--tag", "ablate", "--no-plots"],
        vec!["sweep-infer", "--oracle-tokens"],
    ] {
        let mut full = vec!["--config", cfg.as_str()];
        full.extend(args.iter().copied());
        let o = run_in(root, &full);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let run = root.join("micro");
    for rel in [
        "config.snapshot",
        "manifests/pairs.jsonl",
        "manifests/tokens.jsonl",
        "checkpoints/tokenizer.ckpt",
        "checkpoints/saslm.ckpt",
        "checkpoints/fmse.ckpt",
        "checkpoints/fmse-ablate.ckpt",
        "reports/saslm_lm_curve.csv",
        "reports/saslm_encoder_curve.csv",
        "reports/fmse_curve.csv",
        "reports/metrics.json",
        "reports/metrics.csv",
        "reports/metrics-ablate.csv",
        "reports/sweep.csv",
        "plots/utt000.png",
    ] {
        assert!(run.join(rel).exists(), "{rel}");
    }
    let csv = std::fs::read_to_string(run.join("reports/metrics.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    for col in ["estoi", "lsd", "si_sdr", "ter", "pesq", "dnsmos"] {
        assert!(header.split(',').any(|c| c == col), "{header}");
    }
    assert_eq!(csv.lines().count(), 4 + 2);
    assert_eq!(std::fs::read_to_string(run.join("reports/sweep.csv")).unwrap().lines().count(), 1 + 4 * 4);

    // Enhance with a prompt; the run config comes from the snapshot.
    let input = run.join("audio/degraded/utt001.wav");
    let prompt = run.join("audio/clean/utt002.wav");
    let out = root.join("enhanced.wav");
    let o = run_in(
        root,
        &[
            "--run-dir",
            run.to_str().unwrap(),
            "enhance",
            "--in",
            input.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--prompt",
            prompt.to_str().unwrap(),
            "--nfe",
            "2",
            "--cfg",
            "0.5",
            "--sway",
            "-1",
            "--seed",
            "0",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let enhanced = AudioBuffer::read_wav(&out).unwrap();
    assert_eq!(enhanced.sample_rate, 24000);
    assert_eq!(enhanced.len(), AudioBuffer::read_wav(&input).unwrap().len());

    let png = root.join("cmp.png");
    let o = bin()
        .args(["plot", "--out", png.to_str().unwrap()])
        .arg(format!("input={}", input.display()))
        .arg(format!("enhanced={}", out.display()))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(image::open(&png).is_ok());

    // A language-model checkpoint where the flow model belongs.
    std::fs::copy(run.join("checkpoints/saslm.ckpt"), run.join("checkpoints/fmse.ckpt")).unwrap();
    let o = run_in(root, &["--run-dir", run.to_str().unwrap(), "evaluate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("component mismatch"), "{}", stderr(&o));

    // Flipped byte in the tokenizer checkpoint.
    let tok = run.join("checkpoints/tokenizer.ckpt");
    let mut bytes = std::fs::read(&tok).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&tok, bytes).unwrap();
    let o = run_in(root, &["--run-dir", run.to_str().unwrap(), "evaluate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn mismatched_mel_profile_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config();
    let run = Run::new(RunDir::new(dir.path()), cfg.clone()).unwrap();
    run.dir.create_layout().unwrap();
    let model = Fmse::new(cfg.fmse.model.clone(), 0, DType::F32).unwrap();
    let mut other = MelConfig::acoustic();
    other.name = "acoustic-22k".into();
    other.sample_rate = 22050;
    other.fmax = 11025.0;
    fmse_checkpoint(&model, &other).unwrap().save(run.dir.fmse_ckpt(None)).unwrap();
    assert!(matches!(run.load_fmse(None), Err(Error::Config(m)) if m.contains("acoustic-22k")));
    let ckpt = Checkpoint::load(run.dir.fmse_ckpt(None)).unwrap();
    assert_eq!(ckpt.param_count(), cfg.fmse.model.param_count());
}
