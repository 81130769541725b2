//! Stage driver: epochs over a clip source, metrics log, checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::losses::LossBundle;
use crate::model::{Model, TeacherState};
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::config::RunConfig;
use crate::trainer::data::{batch_indices, derive_seed, steps_per_epoch, ClipSource, Prefetcher};
use crate::trainer::optim::AdamState;
use crate::trainer::step::{train_step, StepOutcome, TrainState};

const INIT_TAG: u64 = 0x494e4954;

/// How a stage run starts and where it stops early.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stage-1 checkpoint a stage-2 run starts from.
    pub init: Option<Checkpoint>,
    /// Checkpoint of the same stage to continue from.
    pub resume: Option<Checkpoint>,
    /// Stop (with a checkpoint) once this many updates are done.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub total_steps: u64,
    /// Outcomes of the updates run by this call.
    pub outcomes: Vec<StepOutcome>,
}

pub fn metrics_log_name(stage: u8) -> String {
    format!("metrics_stage{stage}.log")
}

pub fn final_checkpoint_name(stage: u8) -> String {
    format!("stage{stage}_final.ckpt")
}

fn fmt_term(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |v| v.to_string())
}

/// One metrics-log line (fixed key order).
pub fn metrics_line(step: u64, b: &LossBundle, lr: f64, tau: f64) -> String {
    format!(
        "step={step} loss_total={} loss_g_um={} loss_l_um={} loss_g_m={} loss_l_m={} loss_srl={} lr={lr} tau={tau}",
        b.total,
        fmt_term(b.global_unmixed),
        fmt_term(b.local_unmixed),
        fmt_term(b.global_mixed),
        fmt_term(b.local_mixed),
        fmt_term(b.srl),
    )
}

/// Value of `key` in a metrics-log line.
pub fn parse_metric(line: &str, key: &str) -> Option<f64> {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .and_then(|v| v.parse().ok())
}

fn state_from_checkpoint(model: Model, ckpt: &Checkpoint, stage: u8, keep_optimizer: bool) -> Result<TrainState> {
    ensure!(
        ckpt.student.congruent(&model_params_template(&model)?),
        Precondition,
        "checkpoint parameters do not fit the configured model"
    );
    Ok(TrainState {
        model,
        stage,
        student: ckpt.student.clone(),
        teacher: ckpt.teacher.clone(),
        adam: if keep_optimizer {
            ckpt.adam.clone()
        } else {
            AdamState::new(&ckpt.student)
        },
        step: if keep_optimizer { ckpt.step } else { 0 },
    })
}

fn model_params_template(model: &Model) -> Result<crate::autograd::ParamSet<f32>> {
    Ok(Model::init(*model.config(), &mut ChaCha8Rng::seed_from_u64(0))?.1)
}

fn initial_state(cfg: &RunConfig, opts: &RunOptions) -> Result<TrainState> {
    let stage = cfg.train.stage;
    let (model, fresh) = Model::init(
        cfg.model,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, INIT_TAG, 0, 0)),
    )?;
    if let Some(r) = &opts.resume {
        ensure!(r.stage == stage, Precondition, "resume checkpoint is from stage {}, not {stage}", r.stage);
        ensure!(r.model == cfg.model, Precondition, "resume checkpoint was trained with a different model config");
        return state_from_checkpoint(model, r, stage, true);
    }
    if stage == 2 {
        let init = opts.init.as_ref().ok_or_else(|| {
            Error::Precondition("stage 2 starts from a stage-1 checkpoint; pass --init-checkpoint".into())
        })?;
        ensure!(init.stage == 1, Precondition, "init checkpoint is from stage {}, expected 1", init.stage);
        ensure!(init.model == cfg.model, Precondition, "init checkpoint was trained with a different model config");
        return state_from_checkpoint(model, init, stage, false);
    }
    Ok(TrainState {
        model,
        stage,
        teacher: TeacherState {
            params: fresh.clone(),
            momentum: cfg.train.ema_start,
        },
        adam: AdamState::new(&fresh),
        student: fresh,
        step: 0,
    })
}

fn to_checkpoint(s: &TrainState) -> Checkpoint {
    Checkpoint {
        stage: s.stage,
        step: s.step,
        model: *s.model.config(),
        student: s.student.clone(),
        teacher: s.teacher.clone(),
        adam: s.adam.clone(),
    }
}

/// Keeps the first `steps` lines of an existing log (used on resume).
fn truncate_log(path: &Path, steps: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let kept: Vec<String> = BufReader::new(file)
        .lines()
        .take(steps as usize)
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs (or continues) one pre-training stage, writing
/// `config_stage<n>.toml`, `metrics_stage<n>.log`, periodic checkpoints under
/// `checkpoints/` and `stage<n>_final.ckpt` into `run_dir`.
pub fn run_stage(source: Arc<dyn ClipSource>, cfg: &RunConfig, run_dir: &Path, opts: &RunOptions) -> Result<RunSummary> {
    let mut cfg = cfg.clone();
    cfg.train.resolve(cfg.model.encoder.depth);
    cfg.validate()?;
    let tc = &cfg.train;
    let per_epoch = steps_per_epoch(source.len(), tc.batch_size)?;
    let total = tc.total_steps(per_epoch);
    tc.validate_schedule(total)?;
    let mut state = initial_state(&cfg, opts)?;

    std::fs::create_dir_all(run_dir.join("checkpoints")).map_err(|e| Error::io(run_dir, e))?;
    let snapshot = run_dir.join(format!("config_stage{}.toml", tc.stage));
    std::fs::write(&snapshot, cfg.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;

    let log_path = run_dir.join(metrics_log_name(tc.stage));
    if opts.resume.is_some() {
        truncate_log(&log_path, state.step)?;
    } else if log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let end = opts.stop_after.map_or(total, |s| s.min(total));
    let batches = (state.step..end)
        .map(|s| batch_indices(source.len(), tc.batch_size, tc.seed, s))
        .collect::<Result<Vec<_>>>()?;
    let mut loader = Prefetcher::spawn(source, batches, tc.prefetch);
    let mut outcomes = Vec::new();
    while state.step < end {
        let batch = loader.next_batch()?;
        let out = train_step(&mut state, &batch, tc, total)?;
        writeln!(log, "{}", metrics_line(state.step, &out.bundle, out.lr, out.tau)).map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        outcomes.push(out);
        if tc.checkpoint_every > 0 && state.step % tc.checkpoint_every == 0 && state.step < total {
            let p = run_dir.join("checkpoints").join(format!("stage{}_step{:08}.ckpt", tc.stage, state.step));
            to_checkpoint(&state).save(&p)?;
        }
    }
    let checkpoint = to_checkpoint(&state);
    let checkpoint_path = if state.step >= total {
        run_dir.join(final_checkpoint_name(tc.stage))
    } else {
        run_dir.join("checkpoints").join(format!("stage{}_step{:08}.ckpt", tc.stage, state.step))
    };
    checkpoint.save(&checkpoint_path)?;
    Ok(RunSummary {
        checkpoint,
        checkpoint_path,
        total_steps: total,
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::LogMelSpectrogram;
    use crate::patcher::PatchGrid;
    use ndarray::Array2;
    use rand::Rng;

    pub(crate) fn toy_config(stage: u8) -> RunConfig {
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
        c.train.epochs = 2;
        c.train.warmup_steps = 1;
        c.train.checkpoint_every = 2;
        c
    }

    fn toy_source(n: usize) -> Arc<dyn ClipSource> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clips: Vec<LogMelSpectrogram> = (0..n)
            .map(|_| LogMelSpectrogram::new(Array2::from_shape_fn((128, 128), |_| rng.random_range(-1.0..1.0))).unwrap())
            .collect();
        Arc::new(clips)
    }

    fn log(dir: &Path, stage: u8) -> String {
        std::fs::read_to_string(dir.join(metrics_log_name(stage))).unwrap()
    }

    #[test]
    fn stage2_requires_init_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_stage(toy_source(4), &toy_config(2), dir.path(), &RunOptions::default()).unwrap_err();
        assert!(err.to_string().contains("init-checkpoint"), "{err}");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let src = toy_source(6);
        let full = tempfile::tempdir().unwrap();
        let a = run_stage(src.clone(), &toy_config(1), full.path(), &RunOptions::default()).unwrap();
        assert_eq!(a.total_steps, 6);
        assert_eq!(log(full.path(), 1).lines().count(), 6);

        let part = tempfile::tempdir().unwrap();
        let stop = RunOptions {
            stop_after: Some(4),
            ..Default::default()
        };
        let p = run_stage(src.clone(), &toy_config(1), part.path(), &stop).unwrap();
        assert_eq!(p.checkpoint.step, 4);
        let resumed = Checkpoint::load(&p.checkpoint_path).unwrap();
        let b = run_stage(
            src.clone(),
            &toy_config(1),
            part.path(),
            &RunOptions {
                resume: Some(resumed),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(log(full.path(), 1), log(part.path(), 1));
        assert_eq!(a.checkpoint, b.checkpoint);

        // a reloaded mid-run checkpoint reproduces the next step bitwise
        let mid = Checkpoint::load(&full.path().join("checkpoints/stage1_step00000002.ckpt")).unwrap();
        let again = tempfile::tempdir().unwrap();
        let c = run_stage(
            src.clone(),
            &toy_config(1),
            again.path(),
            &RunOptions {
                resume: Some(mid),
                stop_after: Some(3),
                ..Default::default()
            },
        )
        .unwrap();
        let third = log(full.path(), 1).lines().nth(2).unwrap().to_string();
        assert_eq!(log(again.path(), 1).lines().next().unwrap(), third);
        assert_eq!(c.outcomes.len(), 1);

        // stage 2 from the stage-1 result
        let s2 = tempfile::tempdir().unwrap();
        let r = run_stage(
            src,
            &toy_config(2),
            s2.path(),
            &RunOptions {
                init: Some(a.checkpoint),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.outcomes.iter().all(|o| o.bundle.populated() == 5));
        let taus: Vec<f64> = r.outcomes.iter().map(|o| o.tau).collect();
        assert!(taus.windows(2).all(|w| w[0] <= w[1]));
        let line = log(s2.path(), 2).lines().next().unwrap().to_string();
        assert!(line.starts_with("step=1 loss_total="));
        assert!(parse_metric(&line, "loss_srl").is_some());
    }
}
