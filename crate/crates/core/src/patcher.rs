//! Patch grids, token sequences, positional encodings and inverse block
//! multi-masking.
//!
//! Patches are 16 frames × 16 mel bins. A grid has `rows = F/16` frequency
//! rows and `cols = T/16` time columns, and patch indices are time-major:
//! `index = col * rows + row`, so every column's patches are contiguous.

use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::LogMelSpectrogram;
use crate::error::{ensure, Result};
use crate::mixer::MixPlan;

pub const PATCH: usize = 16;
pub const PATCH_DIM: usize = PATCH * PATCH;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        ensure!(rows > 0 && cols > 0, InvalidArgument, "empty patch grid {rows}x{cols}");
        Ok(Self { rows, cols })
    }

    /// Grid for a `frames × bins` spectrogram.
    pub fn for_shape(frames: usize, bins: usize) -> Result<Self> {
        ensure!(
            frames.is_multiple_of(PATCH) && bins.is_multiple_of(PATCH) && frames > 0 && bins > 0,
            Shape,
            "spectrogram {frames}x{bins} is not divisible into {PATCH}x{PATCH} patches"
        );
        Self::new(bins / PATCH, frames / PATCH)
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        col * self.rows + row
    }

    /// `(row, col)` of a patch index.
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.rows, index / self.rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Position {
    Cls,
    Patch(usize),
}

/// Token embeddings (one per row) with their grid positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f32>,
    pub positions: Vec<Position>,
}

impl TokenSequence {
    pub fn cls_present(&self) -> bool {
        self.positions.contains(&Position::Cls)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn patch_positions(&self) -> Vec<usize> {
        self.positions
            .iter()
            .filter_map(|p| match p {
                Position::Patch(k) => Some(*k),
                Position::Cls => None,
            })
            .collect()
    }

    /// Prepends a CLS token.
    pub fn with_cls(&self, cls: &Array1<f32>) -> Result<Self> {
        ensure!(!self.cls_present(), InvalidArgument, "sequence already has a CLS token");
        ensure!(
            cls.len() == self.tokens.ncols(),
            Shape,
            "CLS width {} != token width {}",
            cls.len(),
            self.tokens.ncols()
        );
        let mut tokens = Array2::zeros((self.len() + 1, self.tokens.ncols()));
        tokens.row_mut(0).assign(cls);
        tokens.slice_mut(s![1.., ..]).assign(&self.tokens);
        let mut positions = vec![Position::Cls];
        positions.extend_from_slice(&self.positions);
        Ok(Self { tokens, positions })
    }

    fn keep(&self, keep: impl Fn(Position) -> bool) -> Self {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(self.positions[i])).collect();
        let tokens = self.tokens.select(ndarray::Axis(0), &rows);
        let positions = rows.iter().map(|&i| self.positions[i]).collect();
        Self { tokens, positions }
    }
}

/// Flattened patches, `P × 256`, time-major patch order, each patch
/// flattened frame-major (`dt * 16 + df`).
pub fn patch_matrix(s: &LogMelSpectrogram) -> Result<Array2<f32>> {
    let grid = PatchGrid::for_shape(s.frames(), s.bins())?;
    let data = s.data();
    let mut out = Array2::zeros((grid.num_patches(), PATCH_DIM));
    for k in 0..grid.num_patches() {
        let (r, c) = grid.coords(k);
        let block = data.slice(s![c * PATCH..(c + 1) * PATCH, r * PATCH..(r + 1) * PATCH]);
        for (dst, src) in out.row_mut(k).iter_mut().zip(block.iter()) {
            *dst = *src;
        }
    }
    Ok(out)
}

/// Linear patch embedding: token `k` = `flatten(patch k) · weight + bias`.
pub fn patchify(s: &LogMelSpectrogram, weight: &Array2<f32>, bias: &Array1<f32>) -> Result<TokenSequence> {
    ensure!(
        weight.nrows() == PATCH_DIM && bias.len() == weight.ncols(),
        Shape,
        "patch embedding must be {PATCH_DIM}xD with a D bias, got {:?} and {}",
        weight.dim(),
        bias.len()
    );
    let patches = patch_matrix(s)?;
    let tokens = patches.dot(weight) + bias;
    let positions = (0..patches.nrows()).map(Position::Patch).collect();
    Ok(TokenSequence { tokens, positions })
}

/// Fixed 2-D sinusoidal encodings, `P × dim`. The first half of the
/// features encodes the time column, the second half the frequency row;
/// each half is `[sin(p·ω_i)…, cos(p·ω_i)…]` with `ω_i = 10000^(−i/(dim/4))`.
pub fn sincos_2d(grid: PatchGrid, dim: usize) -> Result<Array2<f64>> {
    ensure!(dim.is_multiple_of(4) && dim > 0, InvalidArgument, "positional width {dim} must be a multiple of 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut out = Array2::zeros((grid.num_patches(), dim));
    for k in 0..grid.num_patches() {
        let (r, c) = grid.coords(k);
        for (half, pos) in [(0, c as f64), (1, r as f64)] {
            for (i, w) in omega.iter().enumerate() {
                out[[k, half * 2 * quarter + i]] = (pos * w).sin();
                out[[k, half * 2 * quarter + quarter + i]] = (pos * w).cos();
            }
        }
    }
    Ok(out)
}

/// Adds positional encodings (`P × D`, indexed by patch) to patch tokens and
/// `cls_pos` to the CLS token if present.
pub fn add_positional(seq: &TokenSequence, table: &Array2<f32>, cls_pos: Option<&Array1<f32>>) -> Result<TokenSequence> {
    ensure!(
        table.ncols() == seq.tokens.ncols(),
        Shape,
        "positional width {} != token width {}",
        table.ncols(),
        seq.tokens.ncols()
    );
    let mut out = seq.clone();
    for (i, p) in seq.positions.iter().enumerate() {
        match p {
            Position::Patch(k) => {
                ensure!(*k < table.nrows(), Shape, "patch {k} outside positional table");
                let mut row = out.tokens.row_mut(i);
                row += &table.row(*k);
            }
            Position::Cls => {
                if let Some(v) = cls_pos {
                    let mut row = out.tokens.row_mut(i);
                    row += v;
                }
            }
        }
    }
    Ok(out)
}

/// One masked clone: the visible (kept) patches and their complement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    pub clone_id: usize,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    /// Top-left `(row, col)` of each placed keep-block, in placement order.
    pub blocks: Vec<(usize, usize)>,
    /// Cells of the final block removed to hit the exact visible count.
    pub trimmed: Vec<usize>,
}

impl MaskSet {
    pub fn num_patches(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    pub fn validate(&self, grid: PatchGrid) -> Result<()> {
        ensure!(!self.visible.is_empty(), InvalidArgument, "mask keeps no patches");
        ensure!(
            self.num_patches() == grid.num_patches(),
            Shape,
            "mask covers {} patches, grid has {}",
            self.num_patches(),
            grid.num_patches()
        );
        let all: BTreeSet<usize> = self.visible.iter().chain(&self.masked).copied().collect();
        ensure!(
            all.len() == grid.num_patches() && all.iter().next_back() == Some(&(grid.num_patches() - 1)),
            InvalidArgument,
            "visible and masked sets must partition the grid"
        );
        Ok(())
    }

    /// Mask keeping every patch.
    pub fn full(grid: PatchGrid) -> Self {
        Self {
            clone_id: 0,
            visible: (0..grid.num_patches()).collect(),
            masked: Vec::new(),
            blocks: Vec::new(),
            trimmed: Vec::new(),
        }
    }
}

pub fn visible_count(num_patches: usize, keep_ratio: f64) -> usize {
    (keep_ratio * num_patches as f64).round() as usize
}

/// Inverse block multi-masking: each clone keeps a union of `block × block`
/// patch blocks (clipped at the grid edges) with top-left corners drawn
/// uniformly without replacement, and the last block is trimmed at random so
/// exactly `round(keep_ratio · P)` patches stay visible.
pub fn sample_inverse_block_masks<R: Rng + ?Sized>(
    grid: PatchGrid,
    keep_ratio: f64,
    block: usize,
    n_clones: usize,
    rng: &mut R,
) -> Result<Vec<MaskSet>> {
    ensure!(
        keep_ratio > 0.0 && keep_ratio < 1.0,
        InvalidArgument,
        "keep ratio must lie in (0, 1), got {keep_ratio}"
    );
    ensure!(block > 0, InvalidArgument, "block size must be positive");
    let p = grid.num_patches();
    let target = visible_count(p, keep_ratio);
    ensure!(target > 0, InvalidArgument, "keep ratio {keep_ratio} keeps no patches of {p}");
    (0..n_clones)
        .map(|clone_id| {
            let mut visible = vec![false; p];
            let mut count = 0;
            let mut blocks = Vec::new();
            let mut trimmed = Vec::new();
            for corner in sample(rng, p, p).into_iter() {
                let (r0, c0) = grid.coords(corner);
                blocks.push((r0, c0));
                let mut added = Vec::new();
                for c in c0..(c0 + block).min(grid.cols) {
                    for r in r0..(r0 + block).min(grid.rows) {
                        let k = grid.index(r, c);
                        if !visible[k] {
                            visible[k] = true;
                            added.push(k);
                        }
                    }
                }
                count += added.len();
                if count >= target {
                    let excess = count - target;
                    for i in sample(rng, added.len(), excess).into_iter() {
                        visible[added[i]] = false;
                        trimmed.push(added[i]);
                    }
                    trimmed.sort_unstable();
                    break;
                }
            }
            let (vis, masked): (Vec<usize>, Vec<usize>) = (0..p).partition(|&k| visible[k]);
            Ok(MaskSet {
                clone_id,
                visible: vis,
                masked,
                blocks,
                trimmed,
            })
        })
        .collect()
}

/// Keeps the CLS token and the mask's visible patches, preserving order.
pub fn drop_masked(seq: &TokenSequence, mask: &MaskSet) -> Result<TokenSequence> {
    ensure!(!mask.visible.is_empty(), InvalidArgument, "mask keeps no patches");
    let present: BTreeSet<usize> = seq.patch_positions().into_iter().collect();
    ensure!(
        mask.visible.iter().all(|k| present.contains(k)),
        Shape,
        "mask refers to patches absent from the sequence"
    );
    let keep: BTreeSet<usize> = mask.visible.iter().copied().collect();
    Ok(seq.keep(|p| match p {
        Position::Cls => true,
        Position::Patch(k) => keep.contains(&k),
    }))
}

/// Keeps the CLS token and every patch whose time column lies in one of the
/// plan's mixed regions.
pub fn drop_region_tokens(seq: &TokenSequence, plan: &MixPlan, grid: PatchGrid) -> Result<TokenSequence> {
    ensure!(
        plan.total_frames / PATCH == grid.cols,
        Shape,
        "plan spans {} columns, grid has {}",
        plan.total_frames / PATCH,
        grid.cols
    );
    ensure!(
        seq.patch_positions().iter().all(|&k| k < grid.num_patches()),
        Shape,
        "sequence has positions outside the grid"
    );
    Ok(seq.keep(|p| match p {
        Position::Cls => true,
        Position::Patch(k) => plan.contains_column(grid.coords(k).1),
    }))
}

/// Patch indices kept by [`drop_region_tokens`] for a full sequence.
pub fn region_patches(plan: &MixPlan, grid: PatchGrid) -> Vec<usize> {
    (0..grid.num_patches())
        .filter(|&k| plan.contains_column(grid.coords(k).1))
        .collect()
}
