use std::path::Path;
use std::process::{Command, Output};

use sslam::eval::EvalReport;
use sslam::patcher::PatchGrid;
use sslam::trainer::RunConfig;

fn sslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sslam")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn toy(stage: u8) -> RunConfig {
    let mut c = RunConfig::desk(stage);
    c.model.encoder.depth = 2;
    c.model.encoder.width = 8;
    c.model.encoder.heads = 2;
    c.model.encoder.mlp_ratio = 2;
    c.model.decoder_layers = 1;
    c.model.grid = PatchGrid::new(8, 8).unwrap();
    c.data.frames = 128;
    c.train.batch_size = 2;
    c.train.clone_batch = 2;
    c.train.mask_block = 2;
    c.train.epochs = 1;
    c.train.warmup_steps = 1;
    c.train.checkpoint_every = 2;
    c
}

fn write_config(dir: &Path, stage: u8) -> String {
    let p = dir.join(format!("toy{stage}.toml"));
    std::fs::write(&p, toy(stage).to_toml().unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&sslam(&["--help"])), 0);
    assert_eq!(code(&sslam(&["pretrain-stage1", "--no-such-flag"])), 1);
    let o = sslam(&["pretrain-stage2", "--manifest", "m.jsonl", "--run-dir", "r"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--init-checkpoint"));
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 1);
    let o = sslam(&[
        "pretrain-stage1",
        "--config",
        &cfg,
        "--manifest",
        s(&dir.path().join("absent.jsonl")),
        "--run-dir",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str]| {
        let o = sslam(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    let data = d.join("data");
    let eval_data = d.join("eval");
    for (out, seed) in [(&data, "1"), (&eval_data, "2")] {
        run(&["synth-data", "--out-dir", s(out), "--n-clips", "8", "--bins", "2-3", "--clip-seconds", "1.3", "--seed", seed]);
    }
    let train_m = data.join("manifest.jsonl");
    let eval_m = eval_data.join("manifest.jsonl");
    let cfg1 = write_config(d, 1);
    let cfg2 = write_config(d, 2);
    let r1 = d.join("stage1");
    let r2 = d.join("stage2");
    let cache = d.join("cache");
    run(&["pretrain-stage1", "--config", &cfg1, "--manifest", s(&train_m), "--run-dir", s(&r1), "--cache-dir", s(&cache)]);
    let ck1 = r1.join("stage1_final.ckpt");
    assert!(ck1.exists() && r1.join("config_stage1.toml").exists());
    run(&[
        "pretrain-stage2",
        "--config",
        &cfg2,
        "--manifest",
        s(&train_m),
        "--run-dir",
        s(&r2),
        "--init-checkpoint",
        s(&ck1),
        "--srl-aggregation",
        "max",
    ]);
    let log2 = std::fs::read_to_string(r2.join("metrics_stage2.log")).unwrap();
    assert_eq!(log2.lines().count(), 4);
    assert!(!log2.contains("loss_srl=na"));
    let snap = std::fs::read_to_string(r2.join("config_stage2.toml")).unwrap();
    assert!(snap.contains("srl_aggregation = \"max\""), "{snap}");

    // the snapshot alone reproduces the metrics log bitwise
    let replay = d.join("replay");
    run(&[
        "pretrain-stage1",
        "--config",
        s(&r1.join("config_stage1.toml")),
        "--manifest",
        s(&train_m),
        "--run-dir",
        s(&replay),
    ]);
    assert_eq!(
        std::fs::read(r1.join("metrics_stage1.log")).unwrap(),
        std::fs::read(replay.join("metrics_stage1.log")).unwrap()
    );

    let ck2 = r2.join("stage2_final.ckpt");
    let probe = d.join("probe");
    run(&[
        "probe",
        "--checkpoint",
        s(&ck2),
        "--train-manifest",
        s(&train_m),
        "--eval-manifest",
        s(&eval_m),
        "--run-dir",
        s(&probe),
        "--epochs",
        "3",
    ]);
    let rep = EvalReport::read(&probe.join("eval_report.json")).unwrap();
    assert_eq!(rep.metric, "mAP");
    assert_eq!((rep.train_size, rep.eval_size), (8, 8));
    assert!(rep.value > 0.0 && rep.value <= 1.0);
    assert_eq!(rep.per_class_ap.len(), sslam::polytools::NUM_CLASSES);

    let out = d.join("eval_report.json");
    run(&[
        "eval",
        "--checkpoint",
        s(&ck2),
        "--head",
        s(&probe.join("head.json")),
        "--manifest",
        s(&eval_m),
        "--out",
        s(&out),
    ]);
    let again = EvalReport::read(&out).unwrap();
    assert!((again.value - rep.value).abs() < 1e-12);

    let ft = d.join("ft");
    run(&[
        "finetune",
        "--checkpoint",
        s(&ck2),
        "--train-manifest",
        s(&train_m),
        "--eval-manifest",
        s(&eval_m),
        "--run-dir",
        s(&ft),
        "--epochs",
        "1",
    ]);
    assert!(ft.join("finetuned.ckpt").exists() && ft.join("eval_report.json").exists());

    let pgm = d.join("clip.pgm");
    run(&["dump-spectrogram", "--input", s(&data.join("clip_00000.wav")), "--out", s(&pgm), "--frames", "128"]);
    assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5"));
}

#[test]
fn analyze_ontology_reports_levels() {
    let dir = tempfile::tempdir().unwrap();
    let onto = dir.path().join("ontology.json");
    std::fs::write(
        &onto,
        r#"[{"id":"a","name":"A","child_ids":["b"]},{"id":"b","name":"B","child_ids":["c"]},{"id":"c","name":"C","child_ids":[]}]"#,
    )
    .unwrap();
    let clips = dir.path().join("clips.jsonl");
    std::fs::write(&clips, "{\"id\":\"1\",\"labels\":[\"a\",\"c\"]}\n{\"id\":\"2\",\"labels\":[\"b\"]}\n").unwrap();
    let out = dir.path().join("report.json");
    let o = sslam(&["analyze-ontology", "--ontology", s(&onto), "--clips", s(&clips), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("level=1 polyphonic_percent=50.00"), "{text}");
    assert!(text.contains("level=2 polyphonic_percent=0.00"), "{text}");
    assert!(out.exists());
}
