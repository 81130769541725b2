//! Minimal reverse-mode differentiation over row-major matrices.
//!
//! Every value on a [`Tape`] is a 2-D matrix; scalars are `1 × 1`. The tape
//! borrows a [`ParamSet`] so parameter leaves are never copied, and
//! [`Tape::backward`] accumulates gradients into a [`ParamGrads`] buffer of
//! the same layout. Generic over `f32` (training) and `f64` (gradient checks).

use ndarray::{s, Array2, ArrayView2, Axis, NdFloat, Zip};
use num_traits::FromPrimitive;

use crate::error::{ensure, Result};

/// Floating point scalar usable by the model.
pub trait Real: NdFloat + FromPrimitive + Default {}
impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub fn cst<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

const LN_EPS: f64 = 1e-6;

/// Named collection of 2-D parameter tensors. Biases are stored as `1 × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Array2<F>>,
}

/// Handle to a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<F>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Array2<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<F>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// True when `other` has the same names and shapes in the same order.
    pub fn congruent<G>(&self, other: &ParamSet<G>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.dim() == b.dim())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Array2::zeros(t.dim()))
                .collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| cst::<G>(v.to_f64().unwrap_or(f64::NAN))))
                .collect(),
        }
    }
}

/// Gradient buffer shaped like a [`ParamSet`].
pub type ParamGrads<F> = ParamSet<F>;

impl<F: Real> ParamSet<F> {
    pub fn global_norm(&self) -> F {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .fold(F::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn scale(&mut self, factor: F) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(F::zero());
        }
    }
}

/// Node handle on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        rstd: Vec<F>,
    },
    Gather {
        src: Var,
        idx: Vec<Option<usize>>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Conv3x3 {
        x: Var,
        w: Var,
        cols: Array2<F>,
        neighbours: Vec<[Option<usize>; 9]>,
    },
    SqDist {
        a: Var,
        target: Array2<F>,
        scale: F,
    },
    BceLogits {
        logits: Var,
        targets: Array2<F>,
        scale: F,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        scale: F,
    },
}

struct Node<F> {
    value: Option<Array2<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<'p, F: Real> {
    params: &'p ParamSet<F>,
    nodes: Vec<Node<F>>,
    track: bool,
}

impl<'p, F: Real> Tape<'p, F> {
    /// Tape that records gradients for parameter leaves.
    pub fn new(params: &'p ParamSet<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            track: true,
        }
    }

    /// Tape used for inference only; [`Tape::backward`] becomes a no-op.
    pub fn inference(params: &'p ParamSet<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            track: false,
        }
    }

    pub fn params(&self) -> &'p ParamSet<F> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(val), _) => val,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = self.track && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        // Inference tapes keep values only; ops carry no backward caches.
        let op = if self.track { op } else { Op::Constant };
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: self.track,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let out = self.value(a).mapv(|v| v * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    /// Affine map `x · w + b`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row layer normalisation with affine `gamma`, `beta` (`1 × n`).
    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Var {
        let g = self.param(gamma);
        let b = self.param(beta);
        let (xhat, rstd) = standardize_rows(self.value(x), cst(LN_EPS));
        let out = &(&xhat * self.value(g)) + self.value(b);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma: g,
                beta: b,
                xhat,
                rstd,
            },
            &[x, g, b],
        )
    }

    /// Row gather. `None` entries take the corresponding row of `fill`
    /// (zeros when `fill` is absent) and receive no gradient.
    pub fn gather_rows(&mut self, src: Var, idx: &[Option<usize>], fill: Option<&Array2<F>>) -> Var {
        let value = self.value(src);
        let width = value.ncols();
        let mut out = match fill {
            Some(f) => {
                assert_eq!(f.dim(), (idx.len(), width), "gather fill shape");
                f.clone()
            }
            None => Array2::zeros((idx.len(), width)),
        };
        for (i, j) in idx.iter().enumerate() {
            if let Some(j) = j {
                out.row_mut(i).assign(&value.row(*j));
            }
        }
        self.push(
            out,
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
            &[src],
        )
    }

    pub fn select_rows(&mut self, src: Var, idx: &[usize]) -> Var {
        let idx: Vec<Option<usize>> = idx.iter().copied().map(Some).collect();
        self.gather_rows(src, &idx, None)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<F>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols shapes");
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<F>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows shapes");
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Mean over rows, giving `1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = v
            .mean_axis(Axis(0))
            .expect("mean of empty matrix")
            .insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a), &[a])
    }

    /// 3×3 same-padded convolution over a `grid_rows × grid_cols` grid whose
    /// cells are stored time-major (`cell = col * grid_rows + row`) as the rows
    /// of `x`. `w` has shape `9·C_in × C_out`, tap-major.
    pub fn conv3x3(&mut self, x: Var, w: ParamId, grid_rows: usize, grid_cols: usize) -> Result<Var> {
        let w = self.param(w);
        let xv = self.value(x);
        let cin = xv.ncols();
        ensure!(
            xv.nrows() == grid_rows * grid_cols,
            Shape,
            "conv input has {} cells, grid is {grid_rows}x{grid_cols}",
            xv.nrows()
        );
        ensure!(
            self.value(w).nrows() == 9 * cin,
            Shape,
            "conv kernel rows {} != 9*{cin}",
            self.value(w).nrows()
        );
        let neighbours = conv_neighbours(grid_rows, grid_cols);
        let mut cols = Array2::zeros((xv.nrows(), 9 * cin));
        for (cell, taps) in neighbours.iter().enumerate() {
            for (t, src) in taps.iter().enumerate() {
                if let Some(src) = src {
                    cols.slice_mut(s![cell, t * cin..(t + 1) * cin])
                        .assign(&xv.row(*src));
                }
            }
        }
        let out = cols.dot(self.value(w));
        Ok(self.push(out, Op::Conv3x3 { x, w, cols, neighbours }, &[x, w]))
    }

    /// `scale · Σ (a − target)²` as a `1 × 1` value.
    pub fn sq_dist(&mut self, a: Var, target: &Array2<F>, scale: F) -> Var {
        let av = self.value(a);
        assert_eq!(av.dim(), target.dim(), "sq_dist shapes");
        let total = Zip::from(av)
            .and(target)
            .fold(F::zero(), |acc, &x, &t| acc + (x - t) * (x - t));
        let out = Array2::from_elem((1, 1), total * scale);
        self.push(
            out,
            Op::SqDist {
                a,
                target: target.clone(),
                scale,
            },
            &[a],
        )
    }

    /// `scale · Σ BCE(sigmoid(logits), targets)` as a `1 × 1` value.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Array2<F>, scale: F) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), targets.dim(), "bce shapes");
        let total = Zip::from(lv).and(targets).fold(F::zero(), |acc, &x, &y| {
            // max(x,0) - x*y + log(1 + exp(-|x|))
            acc + x.max(F::zero()) - x * y + (-x.abs()).exp().ln_1p()
        });
        let out = Array2::from_elem((1, 1), total * scale);
        self.push(
            out,
            Op::BceLogits {
                logits,
                targets: targets.clone(),
                scale,
            },
            &[logits],
        )
    }

    /// `scale · Σ −log softmax(logits)[label]` as a `1 × 1` value.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize], scale: F) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), labels.len(), "ce rows");
        let mut total = F::zero();
        for (row, &y) in lv.rows().into_iter().zip(labels) {
            let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
            let lse = row.fold(F::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
            total += lse - row[y];
        }
        let out = Array2::from_elem((1, 1), total * scale);
        self.push(
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                scale,
            },
            &[logits],
        )
    }

    /// Sum of `1 × 1` values.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Back-propagates from the scalar `root`, adding `seed · ∂root/∂θ` into
    /// `grads` for every parameter leaf.
    pub fn backward(&self, root: Var, seed: F, grads: &mut ParamGrads<F>) {
        if !self.track || !self.nodes[root.0].needs_grad {
            return;
        }
        let mut g: Vec<Option<Array2<F>>> = (0..=root.0).map(|_| None).collect();
        g[root.0] = Some(Array2::from_elem(self.value(root).dim(), seed));
        for i in (0..=root.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.tensors[id.0] += &dy,
                Op::MatMul(a, b) => {
                    if self.wants(*a) {
                        let da = dy.dot(&self.value(*b).t());
                        accumulate(&mut g, *a, da);
                    }
                    if self.wants(*b) {
                        let db = self.value(*a).t().dot(&dy);
                        accumulate(&mut g, *b, db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.wants(*a) {
                        let da = dy.dot(self.value(*b));
                        accumulate(&mut g, *a, da);
                    }
                    if self.wants(*b) {
                        let db = dy.t().dot(self.value(*a));
                        accumulate(&mut g, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.wants(*b) {
                        accumulate(&mut g, *b, dy.clone());
                    }
                    if self.wants(*a) {
                        accumulate(&mut g, *a, dy);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.wants(*row) {
                        let dr = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut g, *row, dr);
                    }
                    if self.wants(*a) {
                        accumulate(&mut g, *a, dy);
                    }
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    accumulate(&mut g, *a, dy.mapv(|v| v * f));
                }
                Op::Gelu(a) => {
                    let mut dx = dy;
                    Zip::from(&mut dx)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= gelu_grad(x));
                    accumulate(&mut g, *a, dx);
                }
                Op::SoftmaxRows(a) => {
                    let p = node.value.as_ref().unwrap();
                    let mut dx = dy;
                    for (mut drow, prow) in dx.rows_mut().into_iter().zip(p.rows()) {
                        let dot = Zip::from(&drow)
                            .and(&prow)
                            .fold(F::zero(), |acc, &d, &p| acc + d * p);
                        Zip::from(&mut drow)
                            .and(&prow)
                            .for_each(|d, &p| *d = p * (*d - dot));
                    }
                    accumulate(&mut g, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    if self.wants(*beta) {
                        accumulate(&mut g, *beta, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.wants(*gamma) {
                        let dg = (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut g, *gamma, dg);
                    }
                    if self.wants(*x) {
                        let gv = self.value(*gamma);
                        let n = cst::<F>(xhat.ncols() as f64);
                        let mut dx = &dy * gv;
                        for ((mut drow, xrow), &r) in
                            dx.rows_mut().into_iter().zip(xhat.rows()).zip(rstd)
                        {
                            let sum = drow.sum();
                            let dot = Zip::from(&drow)
                                .and(&xrow)
                                .fold(F::zero(), |acc, &d, &h| acc + d * h);
                            Zip::from(&mut drow)
                                .and(&xrow)
                                .for_each(|d, &h| *d = r / n * (n * *d - sum - h * dot));
                        }
                        accumulate(&mut g, *x, dx);
                    }
                }
                Op::Gather { src, idx } => {
                    let (rows, cols) = self.value(*src).dim();
                    let mut dx = Array2::zeros((rows, cols));
                    for (i, j) in idx.iter().enumerate() {
                        if let Some(j) = j {
                            let mut r = dx.row_mut(*j);
                            r += &dy.row(i);
                        }
                    }
                    accumulate(&mut g, *src, dx);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.value(*a).dim();
                    let mut dx = Array2::zeros((rows, cols));
                    dx.slice_mut(s![.., *start..*start + dy.ncols()]).assign(&dy);
                    accumulate(&mut g, *a, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.wants(*p) {
                            accumulate(&mut g, *p, dy.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        if self.wants(*p) {
                            accumulate(&mut g, *p, dy.slice(s![off..off + h, ..]).to_owned());
                        }
                        off += h;
                    }
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.value(*a).dim();
                    let inv = cst::<F>(1.0 / rows as f64);
                    let row = dy.row(0).mapv(|v| v * inv);
                    let dx = row.broadcast((rows, cols)).unwrap().to_owned();
                    accumulate(&mut g, *a, dx);
                }
                Op::Conv3x3 {
                    x,
                    w,
                    cols,
                    neighbours,
                } => {
                    if self.wants(*w) {
                        accumulate(&mut g, *w, cols.t().dot(&dy));
                    }
                    if self.wants(*x) {
                        let dcols = dy.dot(&self.value(*w).t());
                        let (cells, cin) = self.value(*x).dim();
                        let mut dx = Array2::zeros((cells, cin));
                        for (cell, taps) in neighbours.iter().enumerate() {
                            for (t, src) in taps.iter().enumerate() {
                                if let Some(src) = src {
                                    let mut r = dx.row_mut(*src);
                                    r += &dcols.slice(s![cell, t * cin..(t + 1) * cin]);
                                }
                            }
                        }
                        accumulate(&mut g, *x, dx);
                    }
                }
                Op::SqDist { a, target, scale } => {
                    let k = dy[[0, 0]] * *scale * cst(2.0);
                    let dx = (self.value(*a) - target).mapv(|v| v * k);
                    accumulate(&mut g, *a, dx);
                }
                Op::BceLogits {
                    logits,
                    targets,
                    scale,
                } => {
                    let k = dy[[0, 0]] * *scale;
                    let mut dx = self.value(*logits).mapv(sigmoid);
                    Zip::from(&mut dx).and(targets).for_each(|d, &y| *d = (*d - y) * k);
                    accumulate(&mut g, *logits, dx);
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    scale,
                } => {
                    let k = dy[[0, 0]] * *scale;
                    let mut dx = self.value(*logits).clone();
                    for (mut row, &y) in dx.rows_mut().into_iter().zip(labels) {
                        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
                        row.mapv_inplace(|v| (v - max).exp());
                        let sum = row.sum();
                        row.mapv_inplace(|v| v / sum * k);
                        row[y] -= k;
                    }
                    accumulate(&mut g, *logits, dx);
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

fn accumulate<F: Real>(g: &mut [Option<Array2<F>>], v: Var, d: Array2<F>) {
    match &mut g[v.0] {
        Some(existing) => *existing += &d,
        slot @ None => *slot = Some(d),
    }
}

/// Zero-mean, unit-variance rows. Returns the standardised matrix and each
/// row's reciprocal standard deviation.
pub fn standardize_rows<F: Real>(x: &Array2<F>, eps: F) -> (Array2<F>, Vec<F>) {
    let n = cst::<F>(x.ncols() as f64);
    let mut out = x.clone();
    let mut rstd = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let mean = row.sum() / n;
        let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
        let r = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * r);
        rstd.push(r);
    }
    (out, rstd)
}

/// For every cell of a time-major grid, the source cell of each 3×3 tap
/// (`None` outside the grid). Tap order is `(dr, dc)` row-major over
/// `{-1, 0, 1}²`.
pub fn conv_neighbours(grid_rows: usize, grid_cols: usize) -> Vec<[Option<usize>; 9]> {
    let mut out = Vec::with_capacity(grid_rows * grid_cols);
    for c in 0..grid_cols {
        for r in 0..grid_rows {
            let mut taps = [None; 9];
            for (t, tap) in taps.iter_mut().enumerate() {
                let rr = r as isize + (t / 3) as isize - 1;
                let cc = c as isize + (t % 3) as isize - 1;
                if rr >= 0 && cc >= 0 && (rr as usize) < grid_rows && (cc as usize) < grid_cols {
                    *tap = Some(cc as usize * grid_rows + rr as usize);
                }
            }
            out.push(taps);
        }
    }
    out
}

/// Tanh approximation of GELU.
pub fn gelu<F: Real>(x: F) -> F {
    let c = cst::<F>((2.0 / std::f64::consts::PI).sqrt());
    let k = cst::<F>(0.044715);
    let half = cst::<F>(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = cst::<F>((2.0 / std::f64::consts::PI).sqrt());
    let k = cst::<F>(0.044715);
    let half = cst::<F>(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (F::one() + cst::<F>(3.0) * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}
