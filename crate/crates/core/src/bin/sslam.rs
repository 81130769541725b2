use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sslam::dsp::{self, MelConfig, NormalizationStats};
use sslam::eval::{self, EvalReport, Labels, LinearHead, ProbeConfig};
use sslam::losses::{LossWeights, SrlAggregation};
use sslam::mixer::MixStrategy;
use sslam::model::{Model, TeacherState};
use sslam::polytools::{self, LabeledClip, Ontology, SynthConfig};
use sslam::trainer::{run_stage, AdamState, Checkpoint, ClipSource, DataConfig, Manifest, ManifestSource, RunConfig, RunOptions};

#[derive(Parser)]
#[command(name = "sslam", version, about = "Self-supervised audio pre-training with partially mixed spectrograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: masked latent bootstrapping on unmixed clips.
    PretrainStage1(PretrainArgs),
    /// Stage 2: continue from a stage-1 checkpoint with mixed inputs and
    /// the source retention objective.
    PretrainStage2(PretrainArgs),
    /// Train a linear probe on frozen embeddings and report on an eval set.
    Probe(ProbeArgs),
    /// Fine-tune the encoder with a classification head.
    Finetune(ProbeArgs),
    /// Score a saved head on a manifest.
    Eval(EvalArgs),
    /// Distinct-event and polyphony analysis over an ontology.
    AnalyzeOntology(OntologyArgs),
    /// Write a synthetic polyphonic dataset (WAV + manifest).
    SynthData(SynthArgs),
    /// Write the log-mel spectrogram of a WAV file as a PGM image.
    DumpSpectrogram(DumpArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// Run config (TOML); desk preset when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON-lines manifest of training clips.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
    /// Stage-1 checkpoint (required for stage 2).
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    /// Checkpoint of this stage to resume from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Directory for cached spectrograms.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    clone_batch: Option<usize>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    mix_strategy: Option<MixStrategy>,
    #[arg(long)]
    srl_aggregation: Option<SrlAggregation>,
    #[arg(long)]
    top_k_global: Option<usize>,
    #[arg(long)]
    top_k_local: Option<usize>,
    /// Five comma-separated weights: global/local unmixed, global/local
    /// mixed, source retention.
    #[arg(long)]
    loss_weights: Option<LossWeights>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args)]
struct FrontEndArgs {
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    dataset_mean: Option<f64>,
    #[arg(long)]
    dataset_std: Option<f64>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    train_manifest: PathBuf,
    #[arg(long)]
    eval_manifest: PathBuf,
    #[arg(long)]
    run_dir: PathBuf,
    /// Probe settings (TOML); linear or fine-tune preset when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[command(flatten)]
    front: FrontEndArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Head written by `probe` or `finetune`.
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Report path (JSON).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    front: FrontEndArgs,
}

#[derive(Args)]
struct OntologyArgs {
    /// AudioSet-style ontology JSON.
    #[arg(long)]
    ontology: PathBuf,
    /// JSON lines of `{"id": .., "labels": [..]}`.
    #[arg(long)]
    clips: PathBuf,
    /// Highest hierarchy level analysed (levels 1..=max).
    #[arg(long, default_value_t = 4)]
    max_level: usize,
    /// Optional JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_clips: usize,
    /// Degree-of-polyphony bins, e.g. "2-3,6-7".
    #[arg(long, default_value = "2-3")]
    bins: String,
    #[arg(long, default_value_t = 10.0)]
    clip_seconds: f64,
    #[arg(long, default_value_t = dsp::PIPELINE_SAMPLE_RATE)]
    sample_rate: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pad or crop to this many frames.
    #[arg(long)]
    frames: Option<usize>,
}

/// Failure classes mapped to exit codes.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<sslam::Error>() {
            return match e {
                sslam::Error::NonFinite(_) => 3,
                sslam::Error::InvalidArgument(_) | sslam::Error::Precondition(_) => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
    }
    2
}

/// Bad flag combinations detected after parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::PretrainStage1(a) => pretrain(1, a),
        Command::PretrainStage2(a) => pretrain(2, a),
        Command::Probe(a) => probe(a, false),
        Command::Finetune(a) => probe(a, true),
        Command::Eval(a) => evaluate(a),
        Command::AnalyzeOntology(a) => analyze_ontology(a),
        Command::SynthData(a) => synth_data(a),
        Command::DumpSpectrogram(a) => dump_spectrogram(a),
    }
}

fn stage_config(stage: u8, a: &PretrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::desk(stage),
    };
    if cfg.train.stage != stage {
        return Err(usage(format!(
            "config describes stage {} but the subcommand runs stage {stage}",
            cfg.train.stage
        )));
    }
    let t = &mut cfg.train;
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.steps {
        t.steps = Some(v);
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
        t.steps = None;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.warmup_steps {
        t.warmup_steps = v;
    }
    if let Some(v) = a.peak_lr {
        t.peak_learning_rate = v;
    }
    if let Some(v) = a.clone_batch {
        t.clone_batch = v;
    }
    if let Some(v) = a.mask_ratio {
        t.mask_ratio = v;
    }
    if let Some(v) = a.mix_strategy {
        t.mix_strategy = v;
    }
    if let Some(v) = a.srl_aggregation {
        t.srl_aggregation = v;
    }
    if let Some(v) = a.top_k_global {
        t.top_k_global = Some(v);
    }
    if let Some(v) = a.top_k_local {
        t.top_k_local = Some(v);
    }
    if let Some(v) = a.loss_weights {
        t.loss_weights = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    cfg.train.resolve(cfg.model.encoder.depth);
    cfg.validate()?;
    Ok(cfg)
}

fn pretrain(stage: u8, a: PretrainArgs) -> Result<()> {
    if stage == 2 && a.init_checkpoint.is_none() && a.resume.is_none() {
        return Err(usage("pretrain-stage2 requires --init-checkpoint (a stage-1 checkpoint)"));
    }
    let cfg = stage_config(stage, &a)?;
    let manifest = Manifest::load(&a.manifest)?;
    let source = ManifestSource {
        manifest,
        frames: cfg.data.frames,
        mel: MelConfig::default(),
        stats: cfg.data.stats(),
        cache_dir: a.cache_dir.clone(),
    };
    let opts = RunOptions {
        init: a.init_checkpoint.as_deref().map(Checkpoint::load).transpose()?,
        resume: a.resume.as_deref().map(Checkpoint::load).transpose()?,
        stop_after: None,
    };
    let summary = run_stage(Arc::new(source), &cfg, &a.run_dir, &opts)?;
    let last = summary.outcomes.last().map(|o| o.bundle.total);
    println!(
        "stage {stage}: {} of {} steps done, final loss {}, checkpoint {}",
        summary.checkpoint.step,
        summary.total_steps,
        last.map_or_else(|| "n/a".into(), |v| format!("{v:.6}")),
        summary.checkpoint_path.display()
    );
    Ok(())
}

fn front_end(f: &FrontEndArgs) -> NormalizationStats {
    let d = DataConfig::default();
    NormalizationStats {
        mean: f.dataset_mean.unwrap_or(d.dataset_mean),
        std: f.dataset_std.unwrap_or(d.dataset_std),
    }
}

struct Loaded {
    model: Model,
    ckpt: Checkpoint,
}

fn load_backbone(path: &Path) -> Result<Loaded> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let (model, _) = Model::init(ckpt.model, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
    Ok(Loaded { model, ckpt })
}

fn clips_and_labels(path: &Path, model: &Model, f: &FrontEndArgs) -> Result<(ManifestSource, Labels)> {
    let manifest = Manifest::load(path)?;
    let rows = manifest.label_rows().with_context(|| format!("labels in {}", path.display()))?;
    let labels = Labels::from_rows(&rows)?;
    let source = ManifestSource {
        manifest,
        frames: model.grid().cols * sslam::patcher::PATCH,
        mel: MelConfig::default(),
        stats: front_end(f),
        cache_dir: f.cache_dir.clone(),
    };
    Ok((source, labels))
}

fn probe(a: ProbeArgs, finetune: bool) -> Result<()> {
    let mut pcfg = match &a.config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .map_err(|e| sslam::Error::Format(format!("probe config: {e}")))?,
        None if finetune => ProbeConfig::finetune(),
        None => ProbeConfig::linear(),
    };
    if let Some(v) = a.seed {
        pcfg.seed = v;
    }
    if let Some(v) = a.epochs {
        pcfg.epochs = v;
    }
    if let Some(v) = a.peak_lr {
        pcfg.peak_learning_rate = v;
    }
    let Loaded { model, ckpt } = load_backbone(&a.checkpoint)?;
    let (train_src, train_y) = clips_and_labels(&a.train_manifest, &model, &a.front)?;
    let (eval_src, eval_y) = clips_and_labels(&a.eval_manifest, &model, &a.front)?;
    if train_y.classes() != eval_y.classes() {
        bail!(sslam::Error::Shape(format!(
            "train has {} classes, eval has {}",
            train_y.classes(),
            eval_y.classes()
        )));
    }
    std::fs::create_dir_all(&a.run_dir).with_context(|| format!("creating {}", a.run_dir.display()))?;
    let snapshot = toml::to_string(&pcfg).map_err(|e| sslam::Error::Format(e.to_string()))?;
    let name = if finetune { "finetune" } else { "probe" };
    std::fs::write(a.run_dir.join(format!("{name}_config.toml")), &snapshot)?;
    let hash = config_hash(&snapshot);

    let (head, params, trace) = if finetune {
        let r = eval::fine_tune(&model, &ckpt.student, &train_src, &train_y, &pcfg)?;
        let head = LinearHead::plain(r.head_weight.mapv(f64::from), r.head_bias.mapv(f64::from));
        (head, r.params, r.loss_trace)
    } else {
        let x = eval::extract_embeddings(&model, &ckpt.student, &train_src)?;
        let r = eval::train_linear_probe(&x, &train_y, &pcfg)?;
        (r.head, ckpt.student.clone(), r.loss_trace)
    };
    head.save(&a.run_dir.join("head.json"))?;
    if finetune {
        let tuned = Checkpoint {
            stage: ckpt.stage,
            step: ckpt.step,
            model: ckpt.model,
            adam: AdamState::new(&params),
            teacher: TeacherState {
                params: params.clone(),
                momentum: ckpt.teacher.momentum,
            },
            student: params.clone(),
        };
        tuned.save(&a.run_dir.join("finetuned.ckpt"))?;
    }
    let log: String = trace.iter().enumerate().map(|(i, l)| format!("step={} loss={l}\n", i + 1)).collect();
    std::fs::write(a.run_dir.join(format!("{name}_loss.log")), log)?;

    let train_n = train_src.len();
    let eval_x = eval::extract_embeddings(&model, &params, &eval_src)?;
    let report = score(&head, &eval_x, &eval_y, train_n, &hash)?;
    report.write(&a.run_dir.join("eval_report.json"))?;
    println!("{}", report.summary());
    Ok(())
}

fn config_hash(text: &str) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn score(head: &LinearHead, x: &ndarray::Array2<f32>, y: &Labels, train_n: usize, hash: &str) -> Result<EvalReport> {
    let (metric, value, per_class_ap) = match y {
        Labels::Multi(m) => {
            let r = eval::mean_average_precision(&head.scores(x), m)?;
            ("mAP", r.map, r.per_class)
        }
        Labels::Single { labels, .. } => ("accuracy", eval::accuracy(&head.predict_class(x), labels)?, vec![]),
    };
    let skipped_classes = per_class_ap
        .iter()
        .enumerate()
        .filter_map(|(c, ap)| ap.is_none().then_some(c))
        .collect();
    Ok(EvalReport {
        metric: metric.into(),
        value,
        per_class_ap,
        skipped_classes,
        train_size: train_n,
        eval_size: x.nrows(),
        config_hash: hash.into(),
    })
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let Loaded { model, ckpt } = load_backbone(&a.checkpoint)?;
    let head = LinearHead::load(&a.head)?;
    let (src, y) = clips_and_labels(&a.manifest, &model, &a.front)?;
    let x = eval::extract_embeddings(&model, &ckpt.student, &src)?;
    if head.weight.nrows() != x.ncols() || head.bias.len() != y.classes() {
        bail!(sslam::Error::Shape(format!(
            "head is {}x{} but embeddings have {} dims and labels {} classes",
            head.weight.nrows(),
            head.bias.len(),
            x.ncols(),
            y.classes()
        )));
    }
    let hash = config_hash(&std::fs::read_to_string(&a.head)?);
    let report = score(&head, &x, &y, 0, &hash)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    report.write(&a.out)?;
    println!("{}", report.summary());
    Ok(())
}

fn analyze_ontology(a: OntologyArgs) -> Result<()> {
    if a.max_level == 0 {
        return Err(usage("--max-level must be at least 1"));
    }
    let o = Ontology::load(&a.ontology)?;
    let text = std::fs::read_to_string(&a.clips).with_context(|| format!("reading {}", a.clips.display()))?;
    let clips: Vec<LabeledClip> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| sslam::Error::Format(format!("{} line {}: {e}", a.clips.display(), n + 1)))
        })
        .collect::<std::result::Result<_, _>>()?;
    let mut levels = Vec::new();
    for level in 1..=a.max_level {
        let pct = polytools::polyphony_percentage(&clips, level, &o)?;
        println!("level={level} polyphonic_percent={pct:.2}");
        levels.push(serde_json::json!({ "level": level, "polyphonic_percent": pct }));
    }
    if let Some(out) = &a.out {
        let rep = serde_json::json!({ "clips": clips.len(), "levels": levels });
        std::fs::write(out, serde_json::to_string_pretty(&rep)? + "\n")?;
    }
    Ok(())
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_clips: a.n_clips,
        degree_bins: polytools::parse_degree_bins(&a.bins)?,
        clip_s: a.clip_seconds,
        sample_rate: a.sample_rate,
        seed: a.seed,
    };
    let clips = polytools::synth_polyphonic_dataset(&cfg)?;
    let m = polytools::write_dataset(&a.out_dir, &clips)?;
    println!("wrote {} clips to {}", m.len(), a.out_dir.display());
    Ok(())
}

fn dump_spectrogram(a: DumpArgs) -> Result<()> {
    let w = dsp::resample(&dsp::read_wav(&a.input)?, dsp::PIPELINE_SAMPLE_RATE)?;
    let mel = MelConfig::default();
    let w = match a.frames {
        Some(f) => w.fit_to(mel.samples_for_frames(f)),
        None => w,
    };
    let s = dsp::log_mel(&w, &mel)?;
    dsp::write_pgm(&a.out, &s)?;
    println!("{} frames x {} bins -> {}", s.frames(), s.bins(), a.out.display());
    Ok(())
}
