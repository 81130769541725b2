//! Student/teacher transformer encoder, convolutional decoder, EMA teacher
//! and multi-layer target construction.
//!
//! One [`Model`] describes the architecture and owns the parameter handles;
//! weights live in a separate [`ParamSet`] so the student, the EMA teacher and
//! f64 copies used for gradient checks all share the same layout.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{cst, standardize_rows, ParamId, ParamSet, Real, Tape, Var};
use crate::error::{ensure, Result};
use crate::patcher::{sincos_2d, MaskSet, PatchGrid, PATCH_DIM};

/// Standard deviation of the random tokens placed at masked grid cells.
pub const FILLER_STD: f64 = 0.02;
const TARGET_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosMode {
    #[default]
    Sincos,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Flattened patch size fed to the embedding (16 × 16).
    pub patch_embed_dim: usize,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            depth: 4,
            width: 64,
            heads: 4,
            mlp_ratio: 4,
            patch_embed_dim: PATCH_DIM,
        }
    }

    /// ViT-Base sized encoder.
    pub fn vit_base() -> Self {
        Self {
            depth: 12,
            width: 768,
            heads: 12,
            mlp_ratio: 4,
            patch_embed_dim: PATCH_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.depth >= 1, InvalidArgument, "encoder depth must be at least 1");
        ensure!(
            self.heads >= 1 && self.width.is_multiple_of(self.heads),
            InvalidArgument,
            "width {} is not divisible by {} heads",
            self.width,
            self.heads
        );
        ensure!(self.width.is_multiple_of(4), InvalidArgument, "width must be a multiple of 4");
        ensure!(
            self.patch_embed_dim == PATCH_DIM,
            InvalidArgument,
            "patch embedding input must be {PATCH_DIM}"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder_layers: usize,
    pub grid: PatchGrid,
    #[serde(default)]
    pub pos_mode: PosMode,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            decoder_layers: 6,
            grid: PatchGrid { rows: 8, cols: 62 },
            pos_mode: PosMode::Sincos,
        }
    }
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Debug, Clone)]
struct DecoderBlockIds {
    conv_w: ParamId,
    conv_b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    pos: Option<ParamId>,
    blocks: Vec<BlockIds>,
    decoder: Vec<DecoderBlockIds>,
    head_w: ParamId,
    head_b: ParamId,
    sincos: Array2<f64>,
}

/// Per-layer encoder outputs for one sequence (CLS row first).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutputs<F> {
    pub layers: Vec<Array2<F>>,
    /// Grid index of each non-CLS row.
    pub patches: Vec<usize>,
}

/// Teacher targets: `z` has one row per patch in `LayerOutputs::patches`.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets<F> {
    pub z: Array2<F>,
    pub z_cls: Array1<F>,
    pub patches: Vec<usize>,
}

impl<F: Real> Targets<F> {
    /// Target row for grid patch `k`.
    pub fn row_of(&self, k: usize) -> Option<usize> {
        self.patches.iter().position(|&p| p == k)
    }
}

/// Encoder output for one masked clone.
#[derive(Debug, Clone)]
pub struct StudentOutputs<F> {
    /// `(1 + visible) × width`, CLS first.
    pub tokens: Array2<F>,
    pub cls: Array1<F>,
}

impl Model {
    /// Allocates and initialises parameters.
    pub fn init<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<(Self, ParamSet<f32>)> {
        cfg.encoder.validate()?;
        ensure!(cfg.decoder_layers >= 1, InvalidArgument, "decoder needs at least one layer");
        let w = cfg.encoder.width;
        let hidden = w * cfg.encoder.mlp_ratio;
        let sincos = sincos_2d(cfg.grid, w)?;
        let mut p = ParamSet::new();

        let patch_w = p.add("patch_embed.weight", xavier(rng, PATCH_DIM, w));
        let patch_b = p.add("patch_embed.bias", Array2::zeros((1, w)));
        let cls = p.add("cls_token", normal(rng, 1, w, 0.02));
        let pos = match cfg.pos_mode {
            PosMode::Sincos => None,
            PosMode::Learned => Some(p.add("pos_embed", sincos.mapv(|v| v as f32))),
        };
        let mut blocks = Vec::with_capacity(cfg.encoder.depth);
        for l in 0..cfg.encoder.depth {
            let n = |s: &str| format!("blocks.{l}.{s}");
            blocks.push(BlockIds {
                ln1_g: p.add(n("norm1.weight"), Array2::ones((1, w))),
                ln1_b: p.add(n("norm1.bias"), Array2::zeros((1, w))),
                qkv_w: p.add(n("attn.qkv.weight"), xavier(rng, w, 3 * w)),
                qkv_b: p.add(n("attn.qkv.bias"), Array2::zeros((1, 3 * w))),
                proj_w: p.add(n("attn.proj.weight"), xavier(rng, w, w)),
                proj_b: p.add(n("attn.proj.bias"), Array2::zeros((1, w))),
                ln2_g: p.add(n("norm2.weight"), Array2::ones((1, w))),
                ln2_b: p.add(n("norm2.bias"), Array2::zeros((1, w))),
                fc1_w: p.add(n("mlp.fc1.weight"), xavier(rng, w, hidden)),
                fc1_b: p.add(n("mlp.fc1.bias"), Array2::zeros((1, hidden))),
                fc2_w: p.add(n("mlp.fc2.weight"), xavier(rng, hidden, w)),
                fc2_b: p.add(n("mlp.fc2.bias"), Array2::zeros((1, w))),
            });
        }
        let mut decoder = Vec::with_capacity(cfg.decoder_layers);
        for l in 0..cfg.decoder_layers {
            let n = |s: &str| format!("decoder.{l}.{s}");
            decoder.push(DecoderBlockIds {
                conv_w: p.add(n("conv.weight"), xavier(rng, 9 * w, w)),
                conv_b: p.add(n("conv.bias"), Array2::zeros((1, w))),
                ln_g: p.add(n("norm.weight"), Array2::ones((1, w))),
                ln_b: p.add(n("norm.bias"), Array2::zeros((1, w))),
            });
        }
        let head_w = p.add("decoder.head.weight", xavier(rng, w, w));
        let head_b = p.add("decoder.head.bias", Array2::zeros((1, w)));
        Ok((
            Self {
                cfg,
                patch_w,
                patch_b,
                cls,
                pos,
                blocks,
                decoder,
                head_w,
                head_b,
                sincos,
            },
            p,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn width(&self) -> usize {
        self.cfg.encoder.width
    }

    pub fn depth(&self) -> usize {
        self.cfg.encoder.depth
    }

    pub fn grid(&self) -> PatchGrid {
        self.cfg.grid
    }

    /// Names of parameters that belong to the encoder (patch embedding,
    /// CLS, positions and transformer blocks).
    pub fn is_encoder_param(name: &str) -> bool {
        !name.starts_with("decoder.")
    }

    /// Sets decoder convolutions to zero and the head to the identity, so the
    /// decoder passes its input grid through unchanged.
    pub fn make_decoder_identity<F: Real>(&self, params: &mut ParamSet<F>) {
        for d in &self.decoder {
            params.get_mut(d.conv_w).fill(F::zero());
            params.get_mut(d.conv_b).fill(F::zero());
        }
        *params.get_mut(self.head_w) = Array2::eye(self.width());
        params.get_mut(self.head_b).fill(F::zero());
    }

    /// Zeroes the output projections of every attention and MLP branch so
    /// each block is the identity.
    pub fn zero_residual_branches<F: Real>(&self, params: &mut ParamSet<F>) {
        for b in &self.blocks {
            for id in [b.proj_w, b.proj_b, b.fc2_w, b.fc2_b] {
                params.get_mut(id).fill(F::zero());
            }
        }
    }

    pub fn patch_embedding<'a, F: Real>(&self, params: &'a ParamSet<F>) -> (&'a Array2<F>, &'a Array2<F>) {
        (params.get(self.patch_w), params.get(self.patch_b))
    }

    /// Positional table (`P × width`) in effect for `params`.
    pub fn positional_table<F: Real>(&self, params: &ParamSet<F>) -> Array2<F> {
        match self.pos {
            Some(id) => params.get(id).clone(),
            None => self.sincos.mapv(|v| cst(v)),
        }
    }

    pub fn cls_token<F: Real>(&self, params: &ParamSet<F>) -> Array1<F> {
        params.get(self.cls).row(0).to_owned()
    }

    /// Embeds the patches listed in `keep` (rows of `patches`, a `P × 256`
    /// matrix), adds positions and prepends the CLS token.
    pub fn embed<F: Real>(&self, tape: &mut Tape<F>, patches: &Array2<F>, keep: &[usize]) -> Result<Var> {
        ensure!(
            patches.nrows() == self.cfg.grid.num_patches() && patches.ncols() == PATCH_DIM,
            Shape,
            "expected {}x{PATCH_DIM} patches, got {:?}",
            self.cfg.grid.num_patches(),
            patches.dim()
        );
        let x = tape.constant(patches.select(Axis(0), keep));
        let tokens = tape.linear(x, self.patch_w, self.patch_b);
        let tokens = match self.pos {
            None => {
                let pos = tape.constant(self.sincos.select(Axis(0), keep).mapv(|v| cst(v)));
                tape.add(tokens, pos)
            }
            Some(id) => {
                let table = tape.param(id);
                let pos = tape.select_rows(table, keep);
                tape.add(tokens, pos)
            }
        };
        let cls = tape.param(self.cls);
        Ok(tape.concat_rows(&[cls, tokens]))
    }

    /// Runs the transformer blocks on `x` (`n × width`). Returns every
    /// block's output; the last entry is the encoder output.
    pub fn encode<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Vec<Var>> {
        let w = self.width();
        ensure!(
            tape.value(x).ncols() == w,
            Shape,
            "token width {} != model width {w}",
            tape.value(x).ncols()
        );
        let heads = self.cfg.encoder.heads;
        let dh = w / heads;
        let scale = cst::<F>(1.0 / (dh as f64).sqrt());
        let mut h = x;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let n1 = tape.layer_norm(h, b.ln1_g, b.ln1_b);
            let qkv = tape.linear(n1, b.qkv_w, b.qkv_b);
            let mut head_outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let q = tape.slice_cols(qkv, hd * dh, (hd + 1) * dh);
                let k = tape.slice_cols(qkv, w + hd * dh, w + (hd + 1) * dh);
                let v = tape.slice_cols(qkv, 2 * w + hd * dh, 2 * w + (hd + 1) * dh);
                let scores = tape.matmul_nt(q, k);
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores);
                head_outs.push(tape.matmul(attn, v));
            }
            let merged = if heads == 1 {
                head_outs[0]
            } else {
                tape.concat_cols(&head_outs)
            };
            let proj = tape.linear(merged, b.proj_w, b.proj_b);
            h = tape.add(h, proj);
            let n2 = tape.layer_norm(h, b.ln2_g, b.ln2_b);
            let f1 = tape.linear(n2, b.fc1_w, b.fc1_b);
            let f1 = tape.gelu(f1);
            let f2 = tape.linear(f1, b.fc2_w, b.fc2_b);
            h = tape.add(h, f2);
            outs.push(h);
        }
        Ok(outs)
    }

    /// Decoder over the full patch grid. Encoder rows `1..` (visible patches
    /// in `mask.visible` order) are scattered to their cells, masked cells
    /// take the rows of `fillers` (`P × width`). Returns predictions for
    /// `mask.masked`, in that order.
    pub fn decode<F: Real>(&self, tape: &mut Tape<F>, encoded: Var, mask: &MaskSet, fillers: &Array2<F>) -> Result<Var> {
        let grid = self.cfg.grid;
        let p = grid.num_patches();
        mask.validate(grid)?;
        ensure!(
            tape.value(encoded).nrows() == mask.visible.len() + 1,
            Shape,
            "decoder got {} encoder rows for {} visible patches",
            tape.value(encoded).nrows(),
            mask.visible.len()
        );
        ensure!(
            fillers.dim() == (p, self.width()),
            Shape,
            "filler matrix must be {p}x{}",
            self.width()
        );
        let mut idx = vec![None; p];
        for (j, &k) in mask.visible.iter().enumerate() {
            idx[k] = Some(j + 1);
        }
        let mut h = tape.gather_rows(encoded, &idx, Some(fillers));
        for d in &self.decoder {
            let c = tape.conv3x3(h, d.conv_w, grid.rows, grid.cols)?;
            let cb = tape.param(d.conv_b);
            let c = tape.add_row(c, cb);
            let c = tape.layer_norm(c, d.ln_g, d.ln_b);
            let c = tape.gelu(c);
            h = tape.add(h, c);
        }
        let out = tape.linear(h, self.head_w, self.head_b);
        Ok(tape.select_rows(out, &mask.masked))
    }

    /// Student pass over the visible patches of one masked clone.
    pub fn student_forward<F: Real>(&self, params: &ParamSet<F>, patches: &Array2<F>, mask: &MaskSet) -> Result<StudentOutputs<F>> {
        let mut tape = Tape::inference(params);
        let x = self.embed(&mut tape, patches, &mask.visible)?;
        let out = *self.encode(&mut tape, x)?.last().unwrap();
        let tokens = tape.value(out).clone();
        let cls = tokens.row(0).to_owned();
        Ok(StudentOutputs { tokens, cls })
    }

    /// Decoder predictions at masked cells with fresh Gaussian fillers.
    pub fn decode_outputs<F: Real, R: Rng + ?Sized>(
        &self,
        params: &ParamSet<F>,
        encoded: &Array2<F>,
        mask: &MaskSet,
        rng: &mut R,
    ) -> Result<Array2<F>> {
        let fillers = sample_fillers(self.cfg.grid.num_patches(), self.width(), rng);
        let mut tape = Tape::inference(params);
        let e = tape.constant(encoded.clone());
        let out = self.decode(&mut tape, e, mask, &fillers)?;
        Ok(tape.value(out).clone())
    }

    /// Teacher pass (no gradient) over the patches listed in `keep`.
    pub fn teacher_forward<F: Real>(&self, params: &ParamSet<F>, patches: &Array2<F>, keep: &[usize]) -> Result<LayerOutputs<F>> {
        let mut tape = Tape::inference(params);
        let x = self.embed(&mut tape, patches, keep)?;
        let layers = self
            .encode(&mut tape, x)?
            .into_iter()
            .map(|v| tape.value(v).clone())
            .collect();
        Ok(LayerOutputs {
            layers,
            patches: keep.to_vec(),
        })
    }

    /// Encoder output rows for a pre-built token matrix (CLS first).
    pub fn encode_tokens<F: Real>(&self, params: &ParamSet<F>, tokens: &Array2<F>) -> Result<Vec<Array2<F>>> {
        let mut tape = Tape::inference(params);
        let x = tape.constant(tokens.clone());
        Ok(self
            .encode(&mut tape, x)?
            .into_iter()
            .map(|v| tape.value(v).clone())
            .collect())
    }
}

pub fn sample_fillers<F: Real, R: Rng + ?Sized>(rows: usize, width: usize, rng: &mut R) -> Array2<F> {
    let normal = Normal::new(0.0, FILLER_STD).expect("valid std");
    Array2::from_shape_fn((rows, width), |_| cst(normal.sample(rng)))
}

fn xavier<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new(-limit, limit).expect("valid range");
    Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng) as f32)
}

fn normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f32> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng) as f32)
}

/// Averages the last `top_k` layers (optionally standardising every token of
/// each layer over its features first) into patch targets `Z`; `Z_CLS` is
/// the mean of `Z` over patches.
pub fn build_targets<F: Real>(lo: &LayerOutputs<F>, top_k: usize, normalize_layers: bool) -> Result<Targets<F>> {
    let depth = lo.layers.len();
    ensure!(
        top_k >= 1 && top_k <= depth,
        InvalidArgument,
        "top_k {top_k} outside 1..={depth}"
    );
    ensure!(!lo.patches.is_empty(), InvalidArgument, "no patch tokens to build targets from");
    let n = lo.patches.len();
    let (rows, width) = lo.layers[0].dim();
    ensure!(
        rows == n + 1 && lo.layers.iter().all(|l| l.dim() == (rows, width)),
        Shape,
        "layer outputs must all be {}x{width}",
        n + 1
    );
    let mut z = Array2::<F>::zeros((n, width));
    for layer in &lo.layers[depth - top_k..] {
        let patch_rows = layer.slice(ndarray::s![1.., ..]).to_owned();
        if normalize_layers {
            z += &standardize_rows(&patch_rows, cst(TARGET_NORM_EPS)).0;
        } else {
            z += &patch_rows;
        }
    }
    z.mapv_inplace(|v| v / cst(top_k as f64));
    let z_cls = z.mean_axis(Axis(0)).expect("non-empty");
    Ok(Targets {
        z,
        z_cls,
        patches: lo.patches.clone(),
    })
}

/// Teacher parameters and the momentum last used to update them.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState<F> {
    pub params: ParamSet<F>,
    pub momentum: f64,
}

/// `θ_t ← τ θ_t + (1 − τ) θ_s`, parameter by parameter.
pub fn ema_update<F: Real>(teacher: &mut TeacherState<F>, student: &ParamSet<F>, tau: f64) -> Result<()> {
    ensure!(
        (0.0..=1.0).contains(&tau),
        InvalidArgument,
        "EMA momentum {tau} outside [0, 1]"
    );
    ensure!(
        teacher.params.congruent(student),
        Shape,
        "teacher and student parameters differ in layout"
    );
    teacher.momentum = tau;
    if tau == 1.0 {
        return Ok(());
    }
    let (t, s) = (cst::<F>(tau), cst::<F>(1.0 - tau));
    for (tp, sp) in teacher.params.tensors_mut().iter_mut().zip(student.tensors()) {
        ndarray::Zip::from(tp).and(sp).for_each(|a, &b| *a = t * *a + s * b);
    }
    Ok(())
}

/// Cosine ramp of the EMA momentum from `start` (step 0) to `end`
/// (`total_steps` and beyond).
pub fn momentum_schedule(step: u64, total_steps: u64, start: f64, end: f64) -> Result<f64> {
    ensure!(
        0.0 < start && start <= end && end < 1.0,
        InvalidArgument,
        "momentum endpoints must satisfy 0 < start <= end < 1, got {start}, {end}"
    );
    if total_steps == 0 || step >= total_steps {
        return Ok(end);
    }
    let progress = step as f64 / total_steps as f64;
    Ok(end - (end - start) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0)
}
