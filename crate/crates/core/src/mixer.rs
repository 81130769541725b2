//! Full and partial mixing of spectrograms, and the rolled mixed batch used
//! in stage-2 training.

use ndarray::{s, Array2, Zip};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{LogMelSpectrogram, Waveform};
use crate::error::{ensure, Error, Result};

/// Frames per patch column.
pub const PATCH_FRAMES: usize = 16;
pub const N_REGIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixStrategy {
    /// Element-wise maximum of log-mel values.
    #[default]
    SpecMax,
    /// Element-wise mean of log-mel values.
    SpecAvg,
    /// Equal-gain waveform average before the front end.
    WaveAvg,
}

impl std::str::FromStr for MixStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spec_max" => Ok(Self::SpecMax),
            "spec_avg" => Ok(Self::SpecAvg),
            "wave_avg" => Ok(Self::WaveAvg),
            other => Err(Error::InvalidArgument(format!("unknown mix strategy {other:?}"))),
        }
    }
}

/// Three disjoint, patch-aligned frame intervals `[start, end)` where an
/// overlay is mixed into a base clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixPlan {
    pub regions: Vec<(usize, usize)>,
    pub total_frames: usize,
}

/// Number of mixed frames for a clip of `frames` frames: the multiple of
/// [`PATCH_FRAMES`] nearest half the clip, ties rounding down.
pub fn target_mixed_frames(frames: usize) -> usize {
    PATCH_FRAMES * ((frames + PATCH_FRAMES - 1) / (2 * PATCH_FRAMES))
}

impl MixPlan {
    pub fn new(regions: Vec<(usize, usize)>, total_frames: usize) -> Result<Self> {
        let plan = Self {
            regions,
            total_frames,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.regions.len() == N_REGIONS,
            InvalidArgument,
            "mix plan needs {N_REGIONS} regions, got {}",
            self.regions.len()
        );
        let mut prev_end = 0;
        for (i, &(start, end)) in self.regions.iter().enumerate() {
            ensure!(start < end, InvalidArgument, "region {i} [{start}, {end}) is empty");
            ensure!(
                start % PATCH_FRAMES == 0 && end % PATCH_FRAMES == 0,
                InvalidArgument,
                "region {i} [{start}, {end}) is not aligned to {PATCH_FRAMES}-frame columns"
            );
            ensure!(
                i == 0 || start >= prev_end,
                InvalidArgument,
                "regions must be ordered and disjoint"
            );
            prev_end = end;
        }
        ensure!(
            prev_end <= self.total_frames,
            InvalidArgument,
            "region end {prev_end} exceeds {} frames",
            self.total_frames
        );
        let covered = self.covered_frames();
        let target = target_mixed_frames(self.total_frames);
        ensure!(
            covered == target,
            InvalidArgument,
            "plan covers {covered} frames, expected {target}"
        );
        Ok(())
    }

    pub fn covered_frames(&self) -> usize {
        self.regions.iter().map(|(s, e)| e - s).sum()
    }

    pub fn contains_frame(&self, t: usize) -> bool {
        self.regions.iter().any(|&(s, e)| (s..e).contains(&t))
    }

    /// Patch-column indices covered by the regions, ascending.
    pub fn columns(&self) -> Vec<usize> {
        self.regions
            .iter()
            .flat_map(|&(s, e)| s / PATCH_FRAMES..e / PATCH_FRAMES)
            .collect()
    }

    pub fn contains_column(&self, col: usize) -> bool {
        self.contains_frame(col * PATCH_FRAMES)
    }
}

/// Draws a plan: a random composition of the target column count into three
/// positive region widths, placed left to right with random gaps (interior
/// gaps at least one column so the regions stay distinct).
pub fn sample_mix_plan<R: Rng + ?Sized>(frames: usize, rng: &mut R) -> Result<MixPlan> {
    let cols = frames / PATCH_FRAMES;
    let target = target_mixed_frames(frames) / PATCH_FRAMES;
    ensure!(
        cols >= 2 * N_REGIONS && target >= N_REGIONS && cols >= target + N_REGIONS - 1,
        InvalidArgument,
        "{frames} frames is too short for {N_REGIONS} mixed regions"
    );
    let widths = random_composition(target, N_REGIONS, 1, rng);
    let slack = cols - target - (N_REGIONS - 1);
    let mut gaps = random_composition(slack + N_REGIONS + 1, N_REGIONS + 1, 1, rng);
    for g in &mut gaps {
        *g -= 1;
    }
    let mut regions = Vec::with_capacity(N_REGIONS);
    let mut cursor = 0;
    for (i, w) in widths.into_iter().enumerate() {
        cursor += gaps[i] + usize::from(i > 0);
        regions.push((cursor * PATCH_FRAMES, (cursor + w) * PATCH_FRAMES));
        cursor += w;
    }
    MixPlan::new(regions, frames)
}

/// Uniform composition of `total` into `parts` parts each ≥ `min` (here
/// always 1): choose `parts − 1` distinct cut points.
fn random_composition<R: Rng + ?Sized>(total: usize, parts: usize, min: usize, rng: &mut R) -> Vec<usize> {
    debug_assert!(min == 1 && total >= parts);
    let mut cuts: Vec<usize> = sample(rng, total - 1, parts - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(total)) {
        out.push(c - prev);
        prev = c;
    }
    out
}

fn check_same_shape(a: &LogMelSpectrogram, b: &LogMelSpectrogram) -> Result<()> {
    ensure!(
        a.data().dim() == b.data().dim(),
        Shape,
        "cannot mix {:?} with {:?}",
        a.data().dim(),
        b.data().dim()
    );
    Ok(())
}

fn combine(strategy: MixStrategy) -> Result<fn(f32, f32) -> f32> {
    match strategy {
        MixStrategy::SpecMax => Ok(f32::max),
        MixStrategy::SpecAvg => Ok(|a, b| 0.5 * (a + b)),
        MixStrategy::WaveAvg => Err(Error::InvalidArgument(
            "wave_avg mixes waveforms; use mix_waveform_partial before the front end".into(),
        )),
    }
}

pub fn mix_full(
    a: &LogMelSpectrogram,
    b: &LogMelSpectrogram,
    strategy: MixStrategy,
) -> Result<LogMelSpectrogram> {
    check_same_shape(a, b)?;
    let f = combine(strategy)?;
    let mut out = a.data().clone();
    Zip::from(&mut out).and(b.data()).for_each(|x, &y| *x = f(*x, y));
    LogMelSpectrogram::new(out)
}

/// Mixes `overlay` into `base` inside the plan's regions; all other frames
/// are copied from `base` unchanged.
pub fn mix_partial(
    base: &LogMelSpectrogram,
    overlay: &LogMelSpectrogram,
    plan: &MixPlan,
    strategy: MixStrategy,
) -> Result<LogMelSpectrogram> {
    check_same_shape(base, overlay)?;
    plan.validate()?;
    ensure!(
        plan.total_frames == base.frames(),
        InvalidArgument,
        "plan is for {} frames, spectrogram has {}",
        plan.total_frames,
        base.frames()
    );
    let f = combine(strategy)?;
    let mut out: Array2<f32> = base.data().clone();
    for &(start, end) in &plan.regions {
        Zip::from(out.slice_mut(s![start..end, ..]))
            .and(overlay.data().slice(s![start..end, ..]))
            .for_each(|x, &y| *x = f(*x, y));
    }
    LogMelSpectrogram::new(out)
}

/// Equal-gain waveform mix inside the plan's regions, mapping frame `t` to
/// samples `[t·hop, (t+1)·hop)`.
pub fn mix_waveform_partial(base: &Waveform, overlay: &Waveform, plan: &MixPlan, hop: usize) -> Result<Waveform> {
    ensure!(
        base.sample_rate == overlay.sample_rate && base.samples.len() == overlay.samples.len(),
        Shape,
        "waveforms differ in rate or length"
    );
    plan.validate()?;
    let mut samples = base.samples.clone();
    for &(start, end) in &plan.regions {
        let hi = (end * hop).min(samples.len());
        for i in (start * hop).min(hi)..hi {
            samples[i] = 0.5 * (base.samples[i] + overlay.samples[i]);
        }
    }
    Ok(Waveform {
        samples,
        sample_rate: base.sample_rate,
    })
}

/// Result of rolling a batch by one and partially mixing each item with its
/// neighbour.
#[derive(Debug, Clone)]
pub struct RolledMix {
    pub mixed: Vec<LogMelSpectrogram>,
    pub plans: Vec<MixPlan>,
    /// `overlay_of[i]` is the batch index mixed into item `i`; item `i` itself
    /// is the base.
    pub overlay_of: Vec<usize>,
}

pub fn roll_pairing(batch: usize) -> Vec<usize> {
    (0..batch).map(|i| (i + 1) % batch).collect()
}

pub fn sample_plans<R: Rng + ?Sized>(batch: usize, frames: usize, rng: &mut R) -> Result<Vec<MixPlan>> {
    (0..batch).map(|_| sample_mix_plan(frames, rng)).collect()
}

pub fn roll_mix_batch<R: Rng + ?Sized>(
    batch: &[LogMelSpectrogram],
    strategy: MixStrategy,
    rng: &mut R,
) -> Result<RolledMix> {
    ensure!(batch.len() >= 2, InvalidArgument, "rolled mixing needs a batch of at least 2");
    let plans = sample_plans(batch.len(), batch[0].frames(), rng)?;
    roll_mix_with_plans(batch, plans, strategy)
}

pub fn roll_mix_with_plans(
    batch: &[LogMelSpectrogram],
    plans: Vec<MixPlan>,
    strategy: MixStrategy,
) -> Result<RolledMix> {
    ensure!(batch.len() >= 2, InvalidArgument, "rolled mixing needs a batch of at least 2");
    ensure!(plans.len() == batch.len(), InvalidArgument, "one plan per batch item required");
    let overlay_of = roll_pairing(batch.len());
    let mixed = batch
        .iter()
        .zip(&plans)
        .zip(&overlay_of)
        .map(|((base, plan), &j)| mix_partial(base, &batch[j], plan, strategy))
        .collect::<Result<Vec<_>>>()?;
    Ok(RolledMix {
        mixed,
        plans,
        overlay_of,
    })
}
