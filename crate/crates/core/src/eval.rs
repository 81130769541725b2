//! Downstream evaluation: frozen-embedding linear probes, full fine-tuning,
//! average precision and accuracy.

use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{cst, sigmoid, ParamSet, Real, Tape};
use crate::dsp::LogMelSpectrogram;
use crate::error::{ensure, Error, Result};
use crate::model::Model;
use crate::patcher::patch_matrix;
use crate::trainer::data::ClipSource;
use crate::trainer::optim::{adamw_step, cosine_lr, AdamConfig, AdamState};

/// Mean of the final-layer patch tokens (row 0, the CLS token, excluded).
pub fn pool_patch_tokens<F: Real>(final_layer: &Array2<F>) -> Result<Array1<F>> {
    ensure!(final_layer.nrows() >= 2, Shape, "need CLS plus at least one patch token");
    Ok(final_layer.slice(s![1.., ..]).mean_axis(Axis(0)).expect("non-empty"))
}

/// Embedding of an unmasked clip under `params`.
pub fn extract_embedding(model: &Model, params: &ParamSet<f32>, spec: &LogMelSpectrogram) -> Result<Array1<f32>> {
    let patches = patch_matrix(spec)?;
    let grid = model.grid();
    ensure!(
        patches.nrows() == grid.num_patches(),
        Shape,
        "spectrogram has {} patches, model expects {}",
        patches.nrows(),
        grid.num_patches()
    );
    let all: Vec<usize> = (0..grid.num_patches()).collect();
    let lo = model.teacher_forward(params, &patches, &all)?;
    let e = pool_patch_tokens(lo.layers.last().expect("depth >= 1"))?;
    ensure!(e.iter().all(|v| v.is_finite()), NonFinite, "embedding");
    Ok(e)
}

/// Embeddings of every clip of `source`, one row per clip.
pub fn extract_embeddings(model: &Model, params: &ParamSet<f32>, source: &dyn ClipSource) -> Result<Array2<f32>> {
    let mut out = Array2::zeros((source.len(), model.width()));
    for i in 0..source.len() {
        out.row_mut(i).assign(&extract_embedding(model, params, &source.load(i)?)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// `n × C` 0/1 matrix.
    Multi(Array2<f32>),
    /// Class index per example.
    Single { classes: usize, labels: Vec<usize> },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Self::Multi(m) => m.nrows(),
            Self::Single { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        match self {
            Self::Multi(m) => m.ncols(),
            Self::Single { classes, .. } => *classes,
        }
    }

    fn select(&self, idx: &[usize]) -> Self {
        match self {
            Self::Multi(m) => Self::Multi(m.select(Axis(0), idx)),
            Self::Single { classes, labels } => Self::Single {
                classes: *classes,
                labels: idx.iter().map(|&i| labels[i]).collect(),
            },
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        ensure!(c > 0 && rows.iter().all(|r| r.len() == c), Shape, "label rows must share a positive width");
        Ok(Self::Multi(Array2::from_shape_fn((rows.len(), c), |(i, j)| rows[i][j])))
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.classes() > 0, InvalidArgument, "no classes");
        if let Self::Single { classes, labels } = self {
            ensure!(labels.iter().all(|&l| l < *classes), InvalidArgument, "label out of range");
        }
        Ok(())
    }
}

/// Optimisation settings shared by probing and fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub peak_learning_rate: f64,
    pub minimum_learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer_momentum: [f64; 2],
    /// Standardise embedding features with training-set statistics.
    pub standardize: bool,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn linear() -> Self {
        Self {
            epochs: 50,
            warmup_epochs: 5,
            batch_size: 48,
            peak_learning_rate: 1e-3,
            minimum_learning_rate: 1e-6,
            weight_decay: 0.05,
            optimizer_momentum: [0.9, 0.95],
            standardize: true,
            seed: 0,
        }
    }

    pub fn finetune() -> Self {
        Self {
            peak_learning_rate: 5e-5,
            ..Self::linear()
        }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay: self.weight_decay,
            betas: self.optimizer_momentum,
            eps: 1e-8,
        }
    }

    fn lr_at(&self, step: u64, steps_per_epoch: u64) -> f64 {
        let total = self.epochs as u64 * steps_per_epoch;
        let warmup = (self.warmup_epochs as u64 * steps_per_epoch).min(total.saturating_sub(1));
        cosine_lr(step + 1, warmup, total, self.peak_learning_rate, self.minimum_learning_rate)
    }
}

/// Affine classifier over (optionally standardised) embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl LinearHead {
    fn standardize(&self, x: &Array2<f32>) -> Array2<f64> {
        let mut z = x.mapv(|v| v as f64);
        z -= &self.mean;
        z /= &self.std;
        z
    }

    /// Logits, `n × C`.
    pub fn logits(&self, x: &Array2<f32>) -> Array2<f64> {
        self.standardize(x).dot(&self.weight) + &self.bias
    }

    /// Per-class probabilities (sigmoid) for multi-label scoring.
    pub fn scores(&self, x: &Array2<f32>) -> Array2<f64> {
        self.logits(x).mapv(sigmoid)
    }

    pub fn predict_class(&self, x: &Array2<f32>) -> Vec<usize> {
        self.logits(x).rows().into_iter().map(argmax).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl LinearHead {
    /// Identity standardisation around the given affine map.
    pub fn plain(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        let d = weight.nrows();
        Self {
            weight,
            bias,
            mean: Array1::zeros(d),
            std: Array1::ones(d),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = HeadFile {
            weight: self.weight.rows().into_iter().map(|r| r.to_vec()).collect(),
            bias: self.bias.to_vec(),
            mean: self.mean.to_vec(),
            std: self.std.to_vec(),
        };
        let text = serde_json::to_string(&f).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: HeadFile = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let d = f.weight.len();
        let c = f.bias.len();
        ensure!(
            d > 0 && f.weight.iter().all(|r| r.len() == c) && f.mean.len() == d && f.std.len() == d,
            Format,
            "{}: inconsistent head shapes",
            path.display()
        );
        Ok(Self {
            weight: Array2::from_shape_vec((d, c), f.weight.concat()).expect("checked shape"),
            bias: Array1::from(f.bias),
            mean: Array1::from(f.mean),
            std: Array1::from(f.std),
        })
    }
}

fn argmax<'a>(row: impl IntoIterator<Item = &'a f64>) -> usize {
    row.into_iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub head: LinearHead,
    /// Full training-set loss before training and after every epoch.
    pub loss_trace: Vec<f64>,
}

fn head_loss<F: Real>(tape: &mut Tape<F>, logits: crate::autograd::Var, labels: &Labels) -> crate::autograd::Var {
    match labels {
        Labels::Multi(m) => {
            let scale = cst(1.0 / (m.len() as f64));
            tape.bce_with_logits(logits, &m.mapv(|v| cst(v as f64)), scale)
        }
        Labels::Single { labels, .. } => tape.softmax_ce(logits, labels, cst(1.0 / labels.len() as f64)),
    }
}

/// Trains an affine head on frozen embeddings with AdamW and a warmup +
/// cosine schedule. The head starts at zero.
pub fn train_linear_probe(embeddings: &Array2<f32>, labels: &Labels, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let n = embeddings.nrows();
    ensure!(n == labels.len(), Shape, "{n} embeddings but {} labels", labels.len());
    ensure!(n > 0, InvalidArgument, "empty training set");
    ensure!(cfg.batch_size > 0, InvalidArgument, "batch size must be positive");
    ensure!(embeddings.iter().all(|v| v.is_finite()), NonFinite, "embeddings");
    labels.validate()?;
    let d = embeddings.ncols();
    let c = labels.classes();
    let (mean, std) = if cfg.standardize {
        let x = embeddings.mapv(|v| v as f64);
        let mean = x.mean_axis(Axis(0)).unwrap();
        let std = x.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-6));
        (mean, std)
    } else {
        (Array1::zeros(d), Array1::ones(d))
    };
    let mut head = LinearHead {
        weight: Array2::zeros((d, c)),
        bias: Array1::zeros(c),
        mean,
        std,
    };
    let x = head.standardize(embeddings);
    let mut params = ParamSet::<f64>::new();
    let w_id = params.add("head.weight", head.weight.clone());
    let b_id = params.add("head.bias", head.bias.clone().insert_axis(Axis(0)));
    let mut adam = AdamState::new(&params);

    let full_loss = |p: &ParamSet<f64>| {
        let mut tape = Tape::inference(p);
        let xv = tape.constant(x.clone());
        let logits = tape.linear(xv, w_id, b_id);
        let l = head_loss(&mut tape, logits, labels);
        tape.scalar(l)
    };
    let mut trace = vec![full_loss(&params)];
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = params.zeros_like();
            {
                let mut tape = Tape::new(&params);
                let xv = tape.constant(x.select(Axis(0), chunk));
                let logits = tape.linear(xv, w_id, b_id);
                let l = head_loss(&mut tape, logits, &labels.select(chunk));
                ensure!(tape.scalar(l).is_finite(), NonFinite, "probe loss");
                tape.backward(l, 1.0, &mut grads);
            }
            adamw_step(&mut params, &grads, &mut adam, &cfg.adam(cfg.lr_at(step, per_epoch)))?;
            step += 1;
        }
        trace.push(full_loss(&params));
    }
    head.weight = params.get(w_id).clone();
    head.bias = params.get(b_id).row(0).to_owned();
    Ok(ProbeResult { head, loss_trace: trace })
}

#[derive(Debug, Clone)]
pub struct FineTuneResult {
    /// Backbone parameters (same layout as the input) after training.
    pub params: ParamSet<f32>,
    pub head_weight: Array2<f32>,
    pub head_bias: Array1<f32>,
    /// Mean mini-batch loss per optimizer step.
    pub loss_trace: Vec<f64>,
}

/// Trains the whole encoder plus an affine head on pooled patch tokens.
pub fn fine_tune(
    model: &Model,
    params: &ParamSet<f32>,
    clips: &dyn ClipSource,
    labels: &Labels,
    cfg: &ProbeConfig,
) -> Result<FineTuneResult> {
    let n = clips.len();
    ensure!(n == labels.len(), Shape, "{n} clips but {} labels", labels.len());
    ensure!(n > 0 && cfg.batch_size > 0, InvalidArgument, "empty training set or batch");
    labels.validate()?;
    let grid = model.grid();
    let all: Vec<usize> = (0..grid.num_patches()).collect();
    let patch_rows: Vec<usize> = (1..=grid.num_patches()).collect();
    let mut set = params.clone();
    let backbone = set.len();
    let w_id = set.add("head.weight", Array2::zeros((model.width(), labels.classes())));
    let b_id = set.add("head.bias", Array2::zeros((1, labels.classes())));
    let mut adam = AdamState::new(&set);
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::new();
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = set.zeros_like();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let patches = patch_matrix(&clips.load(i)?)?;
                let mut tape = Tape::new(&set);
                let x = model.embed(&mut tape, &patches, &all)?;
                let last = *model.encode(&mut tape, x)?.last().expect("depth >= 1");
                let tokens = tape.select_rows(last, &patch_rows);
                let pooled = tape.mean_rows(tokens);
                let logits = tape.linear(pooled, w_id, b_id);
                let l = head_loss(&mut tape, logits, &labels.select(&[i]));
                let l = tape.scale(l, cst(1.0 / chunk.len() as f64));
                batch_loss += tape.scalar(l) as f64;
                tape.backward(l, 1.0, &mut grads);
            }
            ensure!(batch_loss.is_finite(), NonFinite, "fine-tune loss");
            adamw_step(&mut set, &grads, &mut adam, &cfg.adam(cfg.lr_at(step, per_epoch)))?;
            trace.push(batch_loss);
            step += 1;
        }
    }
    let head_weight = set.get(w_id).clone();
    let head_bias = set.get(b_id).row(0).to_owned();
    let mut backbone_set = ParamSet::new();
    for (name, t) in set.iter().take(backbone) {
        backbone_set.add(name, t.clone());
    }
    Ok(FineTuneResult {
        params: backbone_set,
        head_weight,
        head_bias,
        loss_trace: trace,
    })
}

/// Non-interpolated average precision: ranks by descending score (ties keep
/// the original order) and averages precision at every positive. `None`
/// when there are no positives.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Result<Option<f64>> {
    ensure!(scores.len() == relevant.len(), Shape, "scores and relevance differ in length");
    ensure!(scores.iter().all(|s| !s.is_nan()), InvalidArgument, "NaN score");
    let positives = relevant.iter().filter(|&&r| r).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let (mut hits, mut acc) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if relevant[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(acc / positives as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub map: f64,
    /// `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
}

impl MapResult {
    pub fn skipped(&self) -> Vec<usize> {
        self.per_class
            .iter()
            .enumerate()
            .filter_map(|(c, ap)| ap.is_none().then_some(c))
            .collect()
    }
}

/// Unweighted mean of per-class AP over classes with at least one positive.
pub fn mean_average_precision(scores: &Array2<f64>, labels: &Array2<f32>) -> Result<MapResult> {
    ensure!(scores.dim() == labels.dim(), Shape, "scores {:?} vs labels {:?}", scores.dim(), labels.dim());
    let per_class = (0..scores.ncols())
        .map(|c| {
            let s: Vec<f64> = scores.column(c).to_vec();
            let r: Vec<bool> = labels.column(c).iter().map(|&v| v > 0.5).collect();
            average_precision(&s, &r)
        })
        .collect::<Result<Vec<_>>>()?;
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    ensure!(!valid.is_empty(), InvalidArgument, "no class has a positive example");
    Ok(MapResult {
        map: valid.iter().sum::<f64>() / valid.len() as f64,
        per_class,
    })
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    ensure!(predictions.len() == labels.len(), Shape, "predictions and labels differ in length");
    ensure!(!labels.is_empty(), InvalidArgument, "no examples");
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Evaluation summary written as JSON (field order fixed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub skipped_classes: Vec<usize>,
    pub train_size: usize,
    pub eval_size: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn summary(&self) -> String {
        format!(
            "{}={:.4} train={} eval={} skipped_classes={}",
            self.metric,
            self.value,
            self.train_size,
            self.eval_size,
            self.skipped_classes.len()
        )
    }
}

/// Probe on `train` embeddings and score `eval` embeddings: mAP for
/// multi-label data, accuracy for single-label data.
pub fn probe_report(
    train_x: &Array2<f32>,
    train_y: &Labels,
    eval_x: &Array2<f32>,
    eval_y: &Labels,
    cfg: &ProbeConfig,
    config_hash: &str,
) -> Result<EvalReport> {
    ensure!(eval_x.nrows() == eval_y.len(), Shape, "eval embeddings and labels differ in count");
    let probe = train_linear_probe(train_x, train_y, cfg)?;
    let (metric, value, per_class) = match eval_y {
        Labels::Multi(m) => {
            let r = mean_average_precision(&probe.head.scores(eval_x), m)?;
            ("mAP", r.map, r.per_class)
        }
        Labels::Single { labels, .. } => ("accuracy", accuracy(&probe.head.predict_class(eval_x), labels)?, vec![]),
    };
    let skipped_classes = per_class
        .iter()
        .enumerate()
        .filter_map(|(c, ap)| ap.is_none().then_some(c))
        .collect();
    Ok(EvalReport {
        metric: metric.into(),
        value,
        per_class_ap: per_class,
        skipped_classes,
        train_size: train_x.nrows(),
        eval_size: eval_x.nrows(),
        config_hash: config_hash.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::patcher::PatchGrid;
    use rand::Rng;

    /// Mean precision over positives, found by walking the ranking with an
    /// explicit count of items ranked at or above each positive.
    pub(crate) fn ap_oracle(scores: &[f64], rel: &[bool]) -> Option<f64> {
        let n = scores.len();
        // rank of i: items with strictly larger score, plus earlier ties
        let rank = |i: usize| (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
        let pos: Vec<usize> = (0..n).filter(|&i| rel[i]).collect();
        if pos.is_empty() {
            return None;
        }
        let total: f64 = pos
            .iter()
            .map(|&i| {
                let r = rank(i);
                let above = pos.iter().filter(|&&j| rank(j) <= r).count();
                above as f64 / (r + 1) as f64
            })
            .sum();
        Some(total / pos.len() as f64)
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), Some(1.0));
        assert_eq!(average_precision(&[0.9, 0.1], &[false, true]).unwrap(), Some(0.5));
        assert_eq!(average_precision(&[0.9, 0.1], &[false, false]).unwrap(), None);
        // ties keep input order
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), Some(0.5));
        let scores = Array2::from_shape_vec((2, 2), vec![0.9, 0.1, 0.8, 0.9]).unwrap();
        let labels = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = mean_average_precision(&scores, &labels).unwrap();
        assert_eq!(r.map, 1.0);
        let labels = Array2::from_shape_vec((2, 2), vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let r = mean_average_precision(&scores, &labels).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(0.5)]);
        assert_eq!(r.map, 0.75);
    }

    #[test]
    fn ap_matches_oracle_and_is_monotone_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..300 {
            let n = rng.random_range(1..25);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
            let rel: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            let got = average_precision(&scores, &rel).unwrap();
            let want = ap_oracle(&scores, &rel);
            match (got, want) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (a, b) => assert_eq!(a, b),
            }
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            assert_eq!(average_precision(&warped, &rel).unwrap(), got);
        }
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 2, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.75);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn probe_separable_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 60;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, 4), |(i, j)| {
            let sign = if labels[i] == 1 { 1.0 } else { -1.0 };
            (if j == 0 { sign * 2.0 } else { 0.0 }) + rng.random_range(-0.5..0.5f32)
        });
        let mut cfg = ProbeConfig::linear();
        cfg.epochs = 50;
        cfg.batch_size = 16;
        cfg.peak_learning_rate = 1e-2;
        let y = Labels::Single { classes: 2, labels: labels.clone() };
        let r = train_linear_probe(&x, &y, &cfg).unwrap();
        assert_eq!(accuracy(&r.head.predict_class(&x), &labels).unwrap(), 1.0);

        let multi = Labels::Multi(Array2::from_shape_fn((n, 2), |(i, c)| (labels[i] == c) as u8 as f32));
        let r = train_linear_probe(&x, &multi, &cfg).unwrap();
        assert!(r.loss_trace.last().unwrap() <= &r.loss_trace[0]);

        cfg.epochs = 0;
        let r = train_linear_probe(&x, &multi, &cfg).unwrap();
        assert!(r.head.weight.iter().all(|&v| v == 0.0) && r.head.bias.iter().all(|&v| v == 0.0));
        assert!(train_linear_probe(&x.slice(s![..10, ..]).to_owned(), &multi, &cfg).is_err());
    }

    fn toy() -> (Model, ParamSet<f32>, Vec<LogMelSpectrogram>, Labels) {
        let mut cfg = ModelConfig::desk();
        cfg.encoder.depth = 1;
        cfg.encoder.width = 8;
        cfg.encoder.heads = 2;
        cfg.encoder.mlp_ratio = 2;
        cfg.decoder_layers = 1;
        cfg.grid = PatchGrid::new(1, 2).unwrap();
        let (m, p) = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let clips = labels
            .iter()
            .map(|&l| {
                LogMelSpectrogram::new(Array2::from_shape_fn((32, 16), |(t, _)| {
                    let base = if l == 1 && t < 16 { 1.5 } else { -0.5 };
                    base + rng.random_range(-0.2..0.2f32)
                }))
                .unwrap()
            })
            .collect();
        (m, p, clips, Labels::Single { classes: 2, labels })
    }

    #[test]
    fn embedding_is_mean_of_patch_tokens() {
        let (m, p, clips, _) = toy();
        let e = extract_embedding(&m, &p, &clips[0]).unwrap();
        assert_eq!(e.len(), m.width());
        let all = vec![0, 1];
        let lo = m.teacher_forward(&p, &patch_matrix(&clips[0]).unwrap(), &all).unwrap();
        let last = lo.layers.last().unwrap();
        for f in 0..8 {
            let mean = (last[[1, f]] + last[[2, f]]) / 2.0;
            assert!((e[f] - mean).abs() < 1e-6);
        }
        let constant = Array2::from_shape_fn((4, 3), |(r, c)| if r == 0 { 9.0 } else { c as f64 });
        assert_eq!(pool_patch_tokens(&constant).unwrap(), ndarray::arr1(&[0.0, 1.0, 2.0]));
    }

    #[test]
    fn probe_leaves_backbone_alone_and_fine_tune_moves_it() {
        let (m, p, clips, y) = toy();
        let snapshot = p.clone();
        let x = extract_embeddings(&m, &p, &clips).unwrap();
        train_linear_probe(&x, &y, &ProbeConfig::linear()).unwrap();
        assert_eq!(p, snapshot);

        let mut cfg = ProbeConfig::finetune();
        cfg.epochs = 1;
        cfg.batch_size = 8;
        cfg.warmup_epochs = 0;
        cfg.peak_learning_rate = 0.0;
        cfg.minimum_learning_rate = 0.0;
        let r = fine_tune(&m, &p, &clips, &y, &cfg).unwrap();
        assert_eq!(r.params, p, "lr = 0 leaves parameters unchanged");

        // a single update runs at the end of the schedule, i.e. the minimum rate
        cfg.minimum_learning_rate = 1e-3;
        cfg.peak_learning_rate = 1e-3;
        let r = fine_tune(&m, &p, &clips, &y, &cfg).unwrap();
        assert_ne!(r.params.get(crate::autograd::ParamId(0)), p.get(crate::autograd::ParamId(0)));

        cfg.epochs = 50;
        cfg.batch_size = 4;
        cfg.warmup_epochs = 2;
        cfg.peak_learning_rate = 3e-3;
        cfg.minimum_learning_rate = 1e-6;
        let r = fine_tune(&m, &p, &clips, &y, &cfg).unwrap();
        let head: f64 = r.loss_trace[..4].iter().sum::<f64>() / 4.0;
        let tail: f64 = r.loss_trace[r.loss_trace.len() - 4..].iter().sum::<f64>() / 4.0;
        assert!(tail < head, "fine-tune loss {head} -> {tail}");
    }
}
