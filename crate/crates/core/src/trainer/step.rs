//! One pre-training step.
//!
//! A step is split in two: [`prepare_step`] draws everything random (masks,
//! mix plans, decoder fillers) and [`compute_step`] evaluates the losses and
//! student gradients for that fixed draw. The split lets a gradient check
//! re-evaluate exactly the same objective under parameter perturbations.
//!
//! Each (item, clone) pair gets its own tape. The batch loss is a sum of
//! per-clone terms whose normalisers are computed up front from the masks,
//! so gradients are accumulated clone by clone in a fixed order.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{cst, ParamGrads, ParamSet, Real, Tape};
use crate::dsp::LogMelSpectrogram;
use crate::error::{ensure, Result};
use crate::losses::{combine, LossBundle, SrlAggregation};
use crate::mixer::{roll_mix_batch, MixPlan};
use crate::model::{build_targets, ema_update, momentum_schedule, sample_fillers, Model, Targets, TeacherState};
use crate::patcher::{patch_matrix, region_patches, sample_inverse_block_masks, MaskSet};
use crate::trainer::config::StageConfig;
use crate::trainer::data::derive_seed;
use crate::trainer::optim::{adamw_step, clip_grad_norm, cosine_lr, AdamConfig, AdamState};

const STEP_TAG: u64 = 0x53544550;

#[derive(Debug, Clone)]
pub struct MixedInputs<F> {
    pub patches: Vec<Array2<F>>,
    pub plans: Vec<MixPlan>,
    pub overlay_of: Vec<usize>,
    pub masks: Vec<Vec<MaskSet>>,
    pub fillers: Vec<Vec<Array2<F>>>,
}

/// Inputs and random draws of one step.
#[derive(Debug, Clone)]
pub struct PreparedStep<F> {
    pub patches: Vec<Array2<F>>,
    pub masks: Vec<Vec<MaskSet>>,
    pub fillers: Vec<Vec<Array2<F>>>,
    /// Present when the step trains on partially mixed inputs.
    pub mixed: Option<MixedInputs<F>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Exposure {
    /// Student clone passes over unmixed inputs.
    pub unmixed: usize,
    /// Student clone passes over mixed inputs.
    pub mixed: usize,
    /// No masked patch fell inside a mixed region in the whole batch.
    pub srl_degenerate: bool,
}

fn to_patches<F: Real>(s: &LogMelSpectrogram) -> Result<Array2<F>> {
    Ok(patch_matrix(s)?.mapv(|v| cst(v as f64)))
}

fn draw_masks_and_fillers<F: Real, R: Rng + ?Sized>(
    model: &Model,
    cfg: &StageConfig,
    items: usize,
    rng: &mut R,
) -> Result<(Vec<Vec<MaskSet>>, Vec<Vec<Array2<F>>>)> {
    let grid = model.grid();
    let masks = (0..items)
        .map(|_| sample_inverse_block_masks(grid, cfg.keep_ratio(), cfg.mask_block, cfg.clone_batch, rng))
        .collect::<Result<Vec<_>>>()?;
    let fillers = (0..items)
        .map(|_| {
            (0..cfg.clone_batch)
                .map(|_| sample_fillers(grid.num_patches(), model.width(), rng))
                .collect()
        })
        .collect();
    Ok((masks, fillers))
}

/// Draws masks, fillers and (in stage 2) mix plans for `batch`.
pub fn prepare_step<F: Real, R: Rng + ?Sized>(
    model: &Model,
    batch: &[LogMelSpectrogram],
    cfg: &StageConfig,
    rng: &mut R,
) -> Result<PreparedStep<F>> {
    ensure!(!batch.is_empty(), InvalidArgument, "empty batch");
    let patches = batch.iter().map(to_patches).collect::<Result<Vec<_>>>()?;
    let (masks, fillers) = draw_masks_and_fillers(model, cfg, batch.len(), rng)?;
    let mixed = if cfg.mixing_enabled() {
        ensure!(batch.len() >= 2, InvalidArgument, "stage 2 needs a batch of at least 2, got {}", batch.len());
        let rolled = roll_mix_batch(batch, cfg.mix_strategy, rng)?;
        let (masks, fillers) = draw_masks_and_fillers(model, cfg, batch.len(), rng)?;
        Some(MixedInputs {
            patches: rolled.mixed.iter().map(to_patches).collect::<Result<Vec<_>>>()?,
            plans: rolled.plans,
            overlay_of: rolled.overlay_of,
            masks,
            fillers,
        })
    } else {
        None
    };
    Ok(PreparedStep {
        patches,
        masks,
        fillers,
        mixed,
    })
}

struct MixedTargets<F> {
    global: Vec<Targets<F>>,
    local: Vec<Targets<F>>,
    overlay: Vec<Targets<F>>,
}

fn full_targets<F: Real>(
    model: &Model,
    teacher: &ParamSet<F>,
    patches: &[Array2<F>],
    top_ks: &[usize],
    normalize: bool,
) -> Result<Vec<Vec<Targets<F>>>> {
    let all: Vec<usize> = (0..model.grid().num_patches()).collect();
    patches
        .iter()
        .map(|x| {
            let lo = model.teacher_forward(teacher, x, &all)?;
            top_ks.iter().map(|&k| build_targets(&lo, k, normalize)).collect()
        })
        .collect()
}

fn rows_at<F: Real>(t: &Targets<F>, ks: &[usize]) -> Result<Array2<F>> {
    let rows = ks
        .iter()
        .map(|&k| {
            t.row_of(k)
                .ok_or_else(|| crate::Error::Shape(format!("no target for patch {k}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(t.z.select(Axis(0), &rows))
}

/// Sums `weight·term` for one clone's tape and back-propagates it.
fn finish_clone<F: Real>(tape: &mut Tape<F>, terms: &[(crate::autograd::Var, f64)], grads: Option<&mut ParamGrads<F>>) {
    let Some(grads) = grads else { return };
    let weighted: Vec<_> = terms
        .iter()
        .filter(|(_, w)| *w != 0.0)
        .map(|&(v, w)| tape.scale(v, cst(w)))
        .collect();
    if weighted.is_empty() {
        return;
    }
    let total = tape.sum_scalars(&weighted);
    tape.backward(total, F::one(), grads);
}

/// Losses for a prepared step and, when `with_grads`, the gradient of the
/// weighted total with respect to every student parameter. Teacher
/// parameters are only read.
pub fn compute_step<F: Real>(
    model: &Model,
    student: &ParamSet<F>,
    teacher: &ParamSet<F>,
    prep: &PreparedStep<F>,
    cfg: &StageConfig,
    with_grads: bool,
) -> Result<(LossBundle, Option<ParamGrads<F>>, Exposure)> {
    let depth = model.depth();
    let width = model.width() as f64;
    let grid = model.grid();
    let w = cfg.loss_weights;
    let b = prep.patches.len();
    let n_mc = cfg.clone_batch;
    let mut grads = with_grads.then(|| student.zeros_like());
    let make_tape = |p| if with_grads { Tape::new(p) } else { Tape::inference(p) };

    let unmixed_t: Vec<Targets<F>> = full_targets(model, teacher, &prep.patches, &[depth], cfg.normalize_targets)?
        .into_iter()
        .map(|mut v| v.remove(0))
        .collect();

    let mut exposure = Exposure::default();
    let mut bundle = LossBundle {
        weights: w,
        ..Default::default()
    };

    // unmixed objectives
    let masked_um: usize = prep.masks.iter().flatten().map(|m| m.masked.len()).sum();
    let norm_g = 1.0 / (b * n_mc) as f64 / width;
    let norm_l = 1.0 / masked_um as f64 / width;
    let (mut g_sum, mut l_sum) = (0.0, 0.0);
    for i in 0..b {
        let z_cls = unmixed_t[i].z_cls.clone().insert_axis(Axis(0));
        for (mask, fillers) in prep.masks[i].iter().zip(&prep.fillers[i]) {
            let mut tape = make_tape(student);
            let x = model.embed(&mut tape, &prep.patches[i], &mask.visible)?;
            let last = *model.encode(&mut tape, x)?.last().expect("depth >= 1");
            let cls = tape.select_rows(last, &[0]);
            let g = tape.sq_dist(cls, &z_cls, cst(norm_g));
            let pred = model.decode(&mut tape, last, mask, fillers)?;
            let l = tape.sq_dist(pred, &rows_at(&unmixed_t[i], &mask.masked)?, cst(norm_l));
            g_sum += tape.scalar(g).to_f64().unwrap();
            l_sum += tape.scalar(l).to_f64().unwrap();
            finish_clone(&mut tape, &[(g, w.global_unmixed), (l, w.local_unmixed)], grads.as_mut());
            exposure.unmixed += 1;
        }
    }
    bundle.global_unmixed = Some(g_sum);
    bundle.local_unmixed = Some(l_sum);

    if let Some(mx) = &prep.mixed {
        let k_g = cfg.top_k_global.unwrap_or(depth);
        let k_l = cfg.top_k_local.unwrap_or(depth);
        let mut per_item = full_targets(model, teacher, &mx.patches, &[k_g, k_l], cfg.normalize_targets)?;
        let mut targets = MixedTargets {
            global: Vec::with_capacity(b),
            local: Vec::with_capacity(b),
            overlay: Vec::with_capacity(b),
        };
        for (i, mut v) in per_item.drain(..).enumerate() {
            targets.local.push(v.pop().unwrap());
            targets.global.push(v.pop().unwrap());
            // overlay source seen by the teacher only inside the mixed regions
            let keep = region_patches(&mx.plans[i], grid);
            let lo = model.teacher_forward(teacher, &prep.patches[mx.overlay_of[i]], &keep)?;
            targets.overlay.push(build_targets(&lo, depth, cfg.normalize_targets)?);
        }

        let in_region = |i: usize, mask: &MaskSet| -> Vec<usize> {
            (0..mask.masked.len())
                .filter(|&r| mx.plans[i].contains_column(grid.coords(mask.masked[r]).1))
                .collect()
        };
        let masked_m: usize = mx.masks.iter().flatten().map(|m| m.masked.len()).sum();
        let srl_count: usize = (0..b)
            .map(|i| mx.masks[i].iter().map(|m| in_region(i, m).len()).sum::<usize>())
            .sum();
        exposure.srl_degenerate = srl_count == 0;
        let norm_lm = 1.0 / masked_m as f64 / width;
        let norm_srl = if srl_count == 0 { 0.0 } else { 1.0 / srl_count as f64 / width };
        let (mut g_sum, mut l_sum, mut s_sum) = (0.0, 0.0, 0.0);
        for i in 0..b {
            let z_cls = targets.global[i].z_cls.clone().insert_axis(Axis(0));
            for (mask, fillers) in mx.masks[i].iter().zip(&mx.fillers[i]) {
                let mut tape = make_tape(student);
                let x = model.embed(&mut tape, &mx.patches[i], &mask.visible)?;
                let last = *model.encode(&mut tape, x)?.last().expect("depth >= 1");
                let cls = tape.select_rows(last, &[0]);
                let g = tape.sq_dist(cls, &z_cls, cst(norm_g));
                let pred = model.decode(&mut tape, last, mask, fillers)?;
                let l = tape.sq_dist(pred, &rows_at(&targets.local[i], &mask.masked)?, cst(norm_lm));
                g_sum += tape.scalar(g).to_f64().unwrap();
                l_sum += tape.scalar(l).to_f64().unwrap();
                let mut terms = vec![(g, w.global_mixed), (l, w.local_mixed)];
                let rows = in_region(i, mask);
                if !rows.is_empty() {
                    let ks: Vec<usize> = rows.iter().map(|&r| mask.masked[r]).collect();
                    let base = rows_at(&unmixed_t[i], &ks)?;
                    let overlay = rows_at(&targets.overlay[i], &ks)?;
                    let target = srl_target(&base, &overlay, cfg.srl_aggregation);
                    let sel = tape.select_rows(pred, &rows);
                    let s = tape.sq_dist(sel, &target, cst(norm_srl));
                    s_sum += tape.scalar(s).to_f64().unwrap();
                    terms.push((s, w.srl));
                }
                finish_clone(&mut tape, &terms, grads.as_mut());
                exposure.mixed += 1;
            }
        }
        bundle.global_mixed = Some(g_sum);
        bundle.local_mixed = Some(l_sum);
        bundle.srl = Some(s_sum);
    }

    for (name, v) in ["global_unmixed", "local_unmixed", "global_mixed", "local_mixed", "srl"]
        .iter()
        .zip(bundle.terms())
    {
        if let Some(v) = v {
            ensure!(v.is_finite(), NonFinite, "loss {name} is {v}");
        }
    }
    bundle.total = combine(&bundle)?;
    Ok((bundle, grads, exposure))
}

fn srl_target<F: Real>(base: &Array2<F>, overlay: &Array2<F>, agg: SrlAggregation) -> Array2<F> {
    let mut out = base.clone();
    ndarray::Zip::from(&mut out).and(overlay).for_each(|a, &b| *a = agg.combine(*a, b));
    out
}

/// Student, teacher and optimizer state of a running stage.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub stage: u8,
    pub student: ParamSet<f32>,
    pub teacher: TeacherState<f32>,
    pub adam: AdamState<f32>,
    /// Updates completed in this stage.
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub bundle: LossBundle,
    pub lr: f64,
    pub tau: f64,
    pub grad_norm: f64,
    pub exposure: Exposure,
}

/// RNG for update `step` of `stage`; independent of everything before it,
/// so a resumed run draws the same masks as an uninterrupted one.
pub fn step_rng(seed: u64, stage: u8, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, STEP_TAG, stage as u64, step))
}

/// One optimizer + EMA update on `batch`.
pub fn train_step(state: &mut TrainState, batch: &[LogMelSpectrogram], cfg: &StageConfig, total_steps: u64) -> Result<StepOutcome> {
    ensure!(
        state.stage == cfg.stage,
        Precondition,
        "state is in stage {} but the config is for stage {}",
        state.stage,
        cfg.stage
    );
    ensure!(
        cfg.stage == 1 || batch.len() >= 2,
        InvalidArgument,
        "stage 2 needs a batch of at least 2, got {}",
        batch.len()
    );
    let mut rng = step_rng(cfg.seed, cfg.stage, state.step);
    let prep = prepare_step::<f32, _>(&state.model, batch, cfg, &mut rng)?;
    let (bundle, grads, exposure) = compute_step(&state.model, &state.student, &state.teacher.params, &prep, cfg, true)?;
    let mut grads = grads.expect("gradients requested");
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    let lr = cosine_lr(
        state.step + 1,
        cfg.warmup_steps,
        total_steps,
        cfg.peak_learning_rate,
        cfg.minimum_learning_rate,
    );
    let adam = AdamConfig {
        lr,
        weight_decay: cfg.weight_decay,
        betas: cfg.optimizer_momentum,
        eps: cfg.adam_eps,
    };
    adamw_step(&mut state.student, &grads, &mut state.adam, &adam)?;
    let tau = momentum_schedule(state.step, total_steps, cfg.ema_start, cfg.ema_end)?;
    ema_update(&mut state.teacher, &state.student, tau)?;
    state.step += 1;
    Ok(StepOutcome {
        bundle,
        lr,
        tau,
        grad_norm,
        exposure,
    })
}

pub fn train_step_stage1(state: &mut TrainState, batch: &[LogMelSpectrogram], cfg: &StageConfig, total_steps: u64) -> Result<StepOutcome> {
    ensure!(cfg.stage == 1, InvalidArgument, "stage-1 step called with a stage-{} config", cfg.stage);
    train_step(state, batch, cfg, total_steps)
}

pub fn train_step_stage2(state: &mut TrainState, batch: &[LogMelSpectrogram], cfg: &StageConfig, total_steps: u64) -> Result<StepOutcome> {
    ensure!(cfg.stage == 2, InvalidArgument, "stage-2 step called with a stage-{} config", cfg.stage);
    train_step(state, batch, cfg, total_steps)
}
