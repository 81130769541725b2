//! Training objectives evaluated on plain arrays.
//!
//! All squared errors are averaged over every index, feature dimension
//! included. The trainer evaluates the same sums on the autograd tape; these
//! functions are the reference the tape path is tested against.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::autograd::{cst, Real};
use crate::error::{ensure, Error, Result};
use crate::mixer::MixPlan;
use crate::model::Targets;
use crate::patcher::{MaskSet, PatchGrid};

pub const MIXIT_MAX_K: usize = 12;

/// How the two teacher representations of a mixture's sources are combined
/// into the source-retention target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrlAggregation {
    #[default]
    Average,
    Max,
}

impl std::str::FromStr for SrlAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" | "avg" => Ok(Self::Average),
            "max" => Ok(Self::Max),
            other => Err(Error::InvalidArgument(format!("unknown SRL aggregation {other:?}"))),
        }
    }
}

impl SrlAggregation {
    pub fn combine<F: Real>(self, a: F, b: F) -> F {
        match self {
            Self::Average => (a + b) / cst(2.0),
            Self::Max => a.max(b),
        }
    }
}

/// Squared error of each clone's CLS output against its item's pooled
/// target. `cls_hats` is `B × n_MC × width`, `z_cls` is `B × width`.
pub fn global_loss<F: Real>(cls_hats: &Array3<F>, z_cls: &Array2<F>) -> Result<F> {
    let (b, n_mc, w) = cls_hats.dim();
    ensure!(n_mc > 0, InvalidArgument, "global loss needs at least one clone");
    ensure!(
        z_cls.dim() == (b, w),
        Shape,
        "CLS targets {:?} do not match predictions {:?}",
        z_cls.dim(),
        cls_hats.dim()
    );
    let mut acc = F::zero();
    for i in 0..b {
        for j in 0..n_mc {
            for f in 0..w {
                let d = cls_hats[[i, j, f]] - z_cls[[i, f]];
                acc += d * d;
            }
        }
    }
    Ok(acc / cst((b * n_mc * w) as f64))
}

fn check_clone_layout<F: Real>(y_hats: &[Vec<Array2<F>>], masks: &[Vec<MaskSet>], width: usize) -> Result<()> {
    ensure!(
        y_hats.len() == masks.len(),
        Shape,
        "{} prediction items for {} mask items",
        y_hats.len(),
        masks.len()
    );
    for (i, (ys, ms)) in y_hats.iter().zip(masks).enumerate() {
        ensure!(
            ys.len() == ms.len() && !ys.is_empty(),
            Shape,
            "item {i}: {} prediction clones for {} masks",
            ys.len(),
            ms.len()
        );
        for (j, (y, m)) in ys.iter().zip(ms).enumerate() {
            ensure!(
                y.dim() == (m.masked.len(), width),
                Shape,
                "item {i} clone {j}: predictions {:?} do not align with {} masked patches",
                y.dim(),
                m.masked.len()
            );
        }
    }
    Ok(())
}

/// Squared error of decoder predictions at each clone's masked patches
/// against the item's patch targets at the same grid positions.
pub fn local_loss<F: Real>(y_hats: &[Vec<Array2<F>>], z: &[Targets<F>], masks: &[Vec<MaskSet>]) -> Result<F> {
    ensure!(z.len() == y_hats.len(), Shape, "one target set per item required");
    let width = z.first().map(|t| t.z.ncols()).unwrap_or(0);
    check_clone_layout(y_hats, masks, width)?;
    let mut acc = F::zero();
    let mut count = 0usize;
    for ((ys, ms), t) in y_hats.iter().zip(masks).zip(z) {
        let lookup = position_lookup(t);
        for (y, m) in ys.iter().zip(ms) {
            for (row, &k) in m.masked.iter().enumerate() {
                let tr = lookup(k).ok_or_else(|| Error::Shape(format!("no target for patch {k}")))?;
                for f in 0..width {
                    let d = y[[row, f]] - t.z[[tr, f]];
                    acc += d * d;
                }
                count += 1;
            }
        }
    }
    ensure!(count > 0, InvalidArgument, "local loss over zero masked patches");
    Ok(acc / cst((count * width) as f64))
}

fn position_lookup<F: Real>(t: &Targets<F>) -> impl Fn(usize) -> Option<usize> + '_ {
    let max = t.patches.iter().copied().max().unwrap_or(0);
    let mut index = vec![None; max + 1];
    for (row, &k) in t.patches.iter().enumerate() {
        index[k] = Some(row);
    }
    move |k| index.get(k).copied().flatten()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SrlValue<F> {
    pub loss: F,
    /// Number of masked patches inside mixed regions that contributed.
    pub count: usize,
    /// No masked patch fell inside any mixed region; `loss` is zero.
    pub degenerate: bool,
}

/// Source-retention loss: decoder predictions on the mixture at masked
/// patches inside mixed-region columns, against the aggregate of the
/// teacher's representation of the base (`z_s2`, full clip) and of the
/// overlay (`z_s1`, region tokens only).
pub fn srl_loss<F: Real>(
    y_hat_mixed: &[Vec<Array2<F>>],
    z_s1: &[Targets<F>],
    z_s2: &[Targets<F>],
    masks: &[Vec<MaskSet>],
    plans: &[MixPlan],
    grid: PatchGrid,
    aggregation: SrlAggregation,
) -> Result<SrlValue<F>> {
    let b = y_hat_mixed.len();
    ensure!(
        z_s1.len() == b && z_s2.len() == b && plans.len() == b,
        Shape,
        "SRL inputs disagree on batch size"
    );
    let width = z_s2.first().map(|t| t.z.ncols()).unwrap_or(0);
    check_clone_layout(y_hat_mixed, masks, width)?;
    let mut acc = F::zero();
    let mut count = 0usize;
    for i in 0..b {
        let (s1, s2) = (position_lookup(&z_s1[i]), position_lookup(&z_s2[i]));
        for (y, m) in y_hat_mixed[i].iter().zip(&masks[i]) {
            for (row, &k) in m.masked.iter().enumerate() {
                if !plans[i].contains_column(grid.coords(k).1) {
                    continue;
                }
                let r1 = s1(k).ok_or_else(|| Error::Shape(format!("overlay targets miss region patch {k}")))?;
                let r2 = s2(k).ok_or_else(|| Error::Shape(format!("base targets miss patch {k}")))?;
                for f in 0..width {
                    let target = aggregation.combine(z_s2[i].z[[r2, f]], z_s1[i].z[[r1, f]]);
                    let d = y[[row, f]] - target;
                    acc += d * d;
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(SrlValue {
            loss: F::zero(),
            count,
            degenerate: true,
        });
    }
    Ok(SrlValue {
        loss: acc / cst((count * width) as f64),
        count,
        degenerate: false,
    })
}

fn mse<F: Real>(a: &Array1<F>, b: &Array1<F>) -> F {
    let s = a
        .iter()
        .zip(b.iter())
        .fold(F::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
    s / cst(a.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixitValue<F> {
    pub loss: F,
    /// `assignment[k]` is 0 when component `k` is assigned to the first
    /// source and 1 for the second.
    pub assignment: Vec<u8>,
}

/// Mixture-invariant loss: minimum over all 2^K ways of assigning the K
/// predicted vectors to the two sources of `Σ_i MSE(z_i, mean of assigned)`.
/// A source with no assigned vector is predicted by the zero vector.
pub fn mixit_loss<F: Real>(z_s1: &Array1<F>, z_s2: &Array1<F>, y_hats: &[Array1<F>]) -> Result<MixitValue<F>> {
    let k = y_hats.len();
    ensure!(
        (2..=MIXIT_MAX_K).contains(&k),
        InvalidArgument,
        "MixIT needs 2..={MIXIT_MAX_K} components, got {k}"
    );
    let w = z_s1.len();
    ensure!(
        z_s2.len() == w && y_hats.iter().all(|y| y.len() == w),
        Shape,
        "MixIT vectors must share width {w}"
    );
    let mut best: Option<MixitValue<F>> = None;
    for bits in 0u32..(1 << k) {
        let mut sums = [Array1::<F>::zeros(w), Array1::<F>::zeros(w)];
        let mut counts = [0usize; 2];
        let assignment: Vec<u8> = (0..k).map(|c| ((bits >> c) & 1) as u8).collect();
        for (y, &a) in y_hats.iter().zip(&assignment) {
            sums[a as usize] += y;
            counts[a as usize] += 1;
        }
        let mut loss = F::zero();
        for (i, z) in [z_s1, z_s2].into_iter().enumerate() {
            let pred = if counts[i] == 0 {
                Array1::zeros(w)
            } else {
                sums[i].mapv(|v| v / cst(counts[i] as f64))
            };
            loss += mse(z, &pred);
        }
        if best.as_ref().is_none_or(|b| loss < b.loss) {
            best = Some(MixitValue { loss, assignment });
        }
    }
    Ok(best.expect("at least one assignment"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub global_unmixed: f64,
    pub local_unmixed: f64,
    pub global_mixed: f64,
    pub local_mixed: f64,
    pub srl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::all(1.0)
    }
}

impl LossWeights {
    pub fn all(w: f64) -> Self {
        Self {
            global_unmixed: w,
            local_unmixed: w,
            global_mixed: w,
            local_mixed: w,
            srl: w,
        }
    }

    /// Unmixed objectives only.
    pub fn unmixed_only() -> Self {
        Self {
            global_mixed: 0.0,
            local_mixed: 0.0,
            srl: 0.0,
            ..Self::all(1.0)
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.global_unmixed,
            self.local_unmixed,
            self.global_mixed,
            self.local_mixed,
            self.srl,
        ]
    }

    pub fn from_array(w: [f64; 5]) -> Self {
        Self {
            global_unmixed: w[0],
            local_unmixed: w[1],
            global_mixed: w[2],
            local_mixed: w[3],
            srl: w[4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.as_array().iter().all(|w| w.is_finite() && *w >= 0.0),
            InvalidArgument,
            "loss weights must be finite and non-negative: {:?}",
            self.as_array()
        );
        Ok(())
    }

    pub fn uses_mixing(&self) -> bool {
        self.global_mixed > 0.0 || self.local_mixed > 0.0 || self.srl > 0.0
    }

    pub fn uses_unmixed(&self) -> bool {
        self.global_unmixed > 0.0 || self.local_unmixed > 0.0
    }
}

impl std::str::FromStr for LossWeights {
    type Err = Error;

    /// Five comma-separated weights in the order global-unmixed,
    /// local-unmixed, global-mixed, local-mixed, SRL.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("loss weights {s:?}: {e}")))?;
        ensure!(parts.len() == 5, InvalidArgument, "expected 5 loss weights, got {}", parts.len());
        let w = Self::from_array(parts.try_into().unwrap());
        w.validate()?;
        Ok(w)
    }
}

/// The five objective values of one step, their weights and weighted sum.
/// Terms that were not computed are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub global_unmixed: Option<f64>,
    pub local_unmixed: Option<f64>,
    pub global_mixed: Option<f64>,
    pub local_mixed: Option<f64>,
    pub srl: Option<f64>,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBundle {
    pub fn terms(&self) -> [Option<f64>; 5] {
        [
            self.global_unmixed,
            self.local_unmixed,
            self.global_mixed,
            self.local_mixed,
            self.srl,
        ]
    }

    pub fn populated(&self) -> usize {
        self.terms().iter().filter(|t| t.is_some()).count()
    }
}

/// `Σ wᵢ·lossᵢ` over enabled (non-zero weight) terms. Enabled terms must be
/// present, finite and non-negative.
pub fn combine(bundle: &LossBundle) -> Result<f64> {
    bundle.weights.validate()?;
    let names = ["global_unmixed", "local_unmixed", "global_mixed", "local_mixed", "srl"];
    let mut total = 0.0;
    for ((w, term), name) in bundle.weights.as_array().into_iter().zip(bundle.terms()).zip(names) {
        if w == 0.0 {
            continue;
        }
        let v = term.ok_or_else(|| Error::InvalidArgument(format!("{name} is weighted but was not computed")))?;
        ensure!(v.is_finite(), NonFinite, "loss {name}");
        ensure!(v >= 0.0, InvalidArgument, "loss {name} is negative ({v})");
        total += w * v;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixer::sample_mix_plan;
    use crate::patcher::{region_patches, sample_inverse_block_masks};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn targets(z: Array2<f64>, patches: Vec<usize>) -> Targets<f64> {
        let z_cls = z.mean_axis(ndarray::Axis(0)).unwrap();
        Targets { z, z_cls, patches }
    }

    #[test]
    fn global_cases() {
        let z = array![[1.0]];
        let c = Array3::from_elem((1, 1, 1), 2.0);
        assert_eq!(global_loss(&c, &z).unwrap(), 1.0);
        let c = Array3::from_elem((1, 1, 1), 1.0);
        assert_eq!(global_loss(&c, &z).unwrap(), 0.0);
        assert!(global_loss(&Array3::<f64>::zeros((1, 0, 1)), &z).is_err());
        assert!(global_loss(&Array3::<f64>::zeros((2, 1, 1)), &z).is_err());
    }

    #[test]
    fn local_cases() {
        let grid = PatchGrid::new(1, 2).unwrap();
        let mask = MaskSet {
            clone_id: 0,
            visible: vec![0],
            masked: vec![1],
            blocks: vec![],
            trimmed: vec![],
        };
        let t = targets(array![[0.0], [1.0]], vec![0, 1]);
        let y = vec![vec![array![[3.0]]]];
        assert_eq!(local_loss(&y, std::slice::from_ref(&t), &[vec![mask.clone()]]).unwrap(), 4.0);
        let y = vec![vec![array![[1.0]]]];
        assert_eq!(local_loss(&y, std::slice::from_ref(&t), &[vec![mask.clone()]]).unwrap(), 0.0);
        let bad = vec![vec![array![[1.0], [2.0]]]];
        assert!(local_loss(&bad, &[t], &[vec![mask]]).is_err());
        let _ = grid;
    }

    #[test]
    fn srl_cases() {
        let grid = PatchGrid::new(1, 6).unwrap();
        let plan = MixPlan::new(vec![(0, 16), (32, 48), (64, 80)], 96).unwrap();
        let mask = MaskSet {
            clone_id: 0,
            visible: vec![1, 3, 5],
            masked: vec![0, 2, 4],
            blocks: vec![],
            trimmed: vec![],
        };
        let s2 = targets(array![[0.0], [9.0], [0.0], [9.0], [0.0], [9.0]], (0..6).collect());
        let s1 = targets(array![[2.0], [2.0], [2.0]], vec![0, 2, 4]);
        let y = vec![vec![array![[0.0], [0.0], [0.0]]]];
        let v = srl_loss(&y, std::slice::from_ref(&s1), std::slice::from_ref(&s2), &[vec![mask.clone()]], std::slice::from_ref(&plan), grid, SrlAggregation::Average)
            .unwrap();
        assert_eq!(v.loss, 1.0);
        assert_eq!(v.count, 3);
        let v = srl_loss(&y, std::slice::from_ref(&s1), std::slice::from_ref(&s2), &[vec![mask.clone()]], std::slice::from_ref(&plan), grid, SrlAggregation::Max)
            .unwrap();
        assert_eq!(v.loss, 4.0);

        let all = targets(array![[0.5], [0.5], [0.5], [0.5], [0.5], [0.5]], (0..6).collect());
        let y = vec![vec![array![[0.5], [0.5], [0.5]]]];
        let v = srl_loss(&y, std::slice::from_ref(&all), std::slice::from_ref(&all), &[vec![mask.clone()]], std::slice::from_ref(&plan), grid, SrlAggregation::Average)
            .unwrap();
        assert_eq!(v.loss, 0.0);

        // masked patches only outside the regions
        let outside = MaskSet {
            clone_id: 0,
            visible: vec![0, 2, 4],
            masked: vec![1, 3, 5],
            blocks: vec![],
            trimmed: vec![],
        };
        let v = srl_loss(&y, &[s1], &[s2], &[vec![outside]], &[plan], grid, SrlAggregation::Average).unwrap();
        assert!(v.degenerate);
        assert_eq!(v.loss, 0.0);
    }

    /// Random batches for the loop oracles.
    fn random_case(
        rng: &mut ChaCha8Rng,
        b: usize,
        n_mc: usize,
        w: usize,
    ) -> (PatchGrid, Vec<Vec<MaskSet>>, Vec<MixPlan>, Vec<Targets<f64>>, Vec<Targets<f64>>, Vec<Vec<Array2<f64>>>) {
        let grid = PatchGrid::new(2, 6).unwrap();
        let p = grid.num_patches();
        let mut masks = Vec::new();
        let mut plans = Vec::new();
        let mut full = Vec::new();
        let mut region = Vec::new();
        let mut preds = Vec::new();
        for _ in 0..b {
            let ms = sample_inverse_block_masks(grid, 0.4, 2, n_mc, rng).unwrap();
            let plan = sample_mix_plan(96, rng).unwrap();
            full.push(targets(Array2::from_shape_fn((p, w), |_| rng.random_range(-2.0..2.0)), (0..p).collect()));
            let rp = region_patches(&plan, grid);
            region.push(targets(Array2::from_shape_fn((rp.len(), w), |_| rng.random_range(-2.0..2.0)), rp));
            preds.push(
                ms.iter()
                    .map(|m| Array2::from_shape_fn((m.masked.len(), w), |_| rng.random_range(-2.0..2.0)))
                    .collect(),
            );
            masks.push(ms);
            plans.push(plan);
        }
        (grid, masks, plans, full, region, preds)
    }

    #[test]
    fn losses_match_loop_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (b, n_mc, w) = (3, 2, 4);
            let (grid, masks, plans, full, region, preds) = random_case(&mut rng, b, n_mc, w);

            // global
            let cls: Array3<f64> = Array3::from_shape_fn((b, n_mc, w), |_| rng.random_range(-1.0..1.0));
            let zc: Array2<f64> = Array2::from_shape_fn((b, w), |_| rng.random_range(-1.0..1.0));
            let mut acc = 0.0;
            for i in 0..b {
                for j in 0..n_mc {
                    for f in 0..w {
                        acc += (cls[[i, j, f]] - zc[[i, f]]).powi(2);
                    }
                }
            }
            let expect = acc / (b * n_mc * w) as f64;
            assert!((global_loss(&cls, &zc).unwrap() - expect).abs() <= 1e-12 * expect);

            // local
            let (mut acc, mut n) = (0.0, 0);
            for i in 0..b {
                for j in 0..n_mc {
                    for (row, &k) in masks[i][j].masked.iter().enumerate() {
                        for f in 0..w {
                            acc += (preds[i][j][[row, f]] - full[i].z[[k, f]]).powi(2);
                        }
                        n += 1;
                    }
                }
            }
            let expect = acc / (n * w) as f64;
            let got = local_loss(&preds, &full, &masks).unwrap();
            assert!((got - expect).abs() <= 1e-12 * expect);

            // srl
            let (mut acc, mut n) = (0.0, 0);
            for i in 0..b {
                let cols = plans[i].columns();
                for j in 0..n_mc {
                    for (row, &k) in masks[i][j].masked.iter().enumerate() {
                        if !cols.contains(&(k / 2)) {
                            continue;
                        }
                        let r1 = region[i].patches.iter().position(|&p| p == k).unwrap();
                        for f in 0..w {
                            let t = (full[i].z[[k, f]] + region[i].z[[r1, f]]) / 2.0;
                            acc += (preds[i][j][[row, f]] - t).powi(2);
                        }
                        n += 1;
                    }
                }
            }
            let got = srl_loss(&preds, &region, &full, &masks, &plans, grid, SrlAggregation::Average).unwrap();
            if n == 0 {
                assert!(got.degenerate);
            } else {
                let expect = acc / (n * w) as f64;
                assert!((got.loss - expect).abs() <= 1e-12 * expect);
            }
        }
    }

    #[test]
    fn srl_is_symmetric_in_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (grid, masks, plans, full, _, preds) = random_case(&mut rng, 2, 2, 3);
        // Both sources supplied as full-grid targets so they can be swapped.
        let other: Vec<Targets<f64>> = full
            .iter()
            .map(|t| targets(t.z.mapv(|v| v * 0.5 - 1.0), t.patches.clone()))
            .collect();
        for agg in [SrlAggregation::Average, SrlAggregation::Max] {
            let a = srl_loss(&preds, &other, &full, &masks, &plans, grid, agg).unwrap();
            let b = srl_loss(&preds, &full, &other, &masks, &plans, grid, agg).unwrap();
            assert_eq!(a.loss, b.loss);
        }
    }

    #[test]
    fn batch_permutation_invariance_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (grid, masks, plans, full, region, preds) = random_case(&mut rng, 3, 2, 3);
        let perm = [2usize, 0, 1];
        fn pick<T: Clone>(perm: &[usize], v: &[T]) -> Vec<T> {
            perm.iter().map(|&i| v[i].clone()).collect()
        }
        let (pm, pp, pf, pr, py): (Vec<Vec<MaskSet>>, Vec<MixPlan>, Vec<Targets<f64>>, Vec<Targets<f64>>, Vec<Vec<Array2<f64>>>) =
            (pick(&perm, &masks), pick(&perm, &plans), pick(&perm, &full), pick(&perm, &region), pick(&perm, &preds));
        let l0 = local_loss(&preds, &full, &masks).unwrap();
        let l1 = local_loss(&py, &pf, &pm).unwrap();
        assert!((l0 - l1).abs() < 1e-12);
        let s0 = srl_loss(&preds, &region, &full, &masks, &plans, grid, SrlAggregation::Average).unwrap();
        let s1 = srl_loss(&py, &pr, &pf, &pm, &pp, grid, SrlAggregation::Average).unwrap();
        assert!((s0.loss - s1.loss).abs() < 1e-12);

        // scaling by c scales by c² (c a power of two keeps it exact)
        let c = 4.0;
        let scale_t = |ts: &[Targets<f64>]| -> Vec<Targets<f64>> {
            ts.iter().map(|t| targets(t.z.mapv(|v| v * c), t.patches.clone())).collect()
        };
        let sy: Vec<Vec<Array2<f64>>> = preds.iter().map(|ys| ys.iter().map(|y| y.mapv(|v| v * c)).collect()).collect();
        assert_eq!(local_loss(&sy, &scale_t(&full), &masks).unwrap(), c * c * l0);
        let ss = srl_loss(&sy, &scale_t(&region), &scale_t(&full), &masks, &plans, grid, SrlAggregation::Average).unwrap();
        assert_eq!(ss.loss, c * c * s0.loss);
    }

    /// Enumerates assignments by explicit matrices A ∈ {0,1}^{2×K}.
    fn mixit_oracle(z1: &Array1<f64>, z2: &Array1<f64>, ys: &[Array1<f64>]) -> f64 {
        let k = ys.len();
        let mut best = f64::INFINITY;
        for code in 0..(1usize << k) {
            let mut a = Array2::<f64>::zeros((2, k));
            for c in 0..k {
                a[[(code >> c) & 1, c]] = 1.0;
            }
            let mut total = 0.0;
            for (i, z) in [z1, z2].into_iter().enumerate() {
                let n: f64 = a.row(i).sum();
                let mut pred = Array1::<f64>::zeros(z.len());
                for c in 0..k {
                    pred = pred + &ys[c] * a[[i, c]];
                }
                if n > 0.0 {
                    pred /= n;
                }
                total += (z - &pred).mapv(|v| v * v).mean().unwrap();
            }
            best = best.min(total);
        }
        best
    }

    #[test]
    fn mixit_cases() {
        let z1: Array1<f64> = array![1.0, 2.0];
        let z2 = array![-1.0, 0.5];
        let v = mixit_loss(&z1, &z2, &[z1.clone(), z2.clone()]).unwrap();
        assert_eq!(v.loss, 0.0);
        assert_eq!(v.assignment, vec![0, 1]);

        let same = vec![array![0.3, 0.3]; 3];
        let v = mixit_loss(&z1, &z2, &same).unwrap();
        // identical components: either both sources get the vector or one
        // source is left with the zero prediction
        let zero = Array1::zeros(2);
        let split = mse(&z1, &same[0]) + mse(&z2, &same[0]);
        let one_empty = (mse(&z1, &same[0]) + mse(&z2, &zero)).min(mse(&z1, &zero) + mse(&z2, &same[0]));
        assert!((v.loss - split.min(one_empty)).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 2..=4 {
            for _ in 0..50 {
                let r = |rng: &mut ChaCha8Rng| Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
                let (a, b) = (r(&mut rng), r(&mut rng));
                let ys: Vec<_> = (0..k).map(|_| r(&mut rng)).collect();
                let got = mixit_loss(&a, &b, &ys).unwrap().loss;
                assert!((got - mixit_oracle(&a, &b, &ys)).abs() < 1e-12);
            }
        }
        assert!(mixit_loss(&z1, &z2, std::slice::from_ref(&z1)).is_err());
        assert!(mixit_loss(&z1, &z2, &vec![z1.clone(); 13]).is_err());
    }

    #[test]
    fn mixit_not_worse_than_identity_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let r = |rng: &mut ChaCha8Rng| Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
            let (z1, z2, y0, y1) = (r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng));
            let fixed = mse(&z1, &y0) + mse(&z2, &y1);
            assert!(mixit_loss(&z1, &z2, &[y0, y1]).unwrap().loss <= fixed + 1e-12);
        }
    }

    #[test]
    fn combine_cases() {
        let mut b = LossBundle {
            srl: Some(0.7),
            weights: LossWeights::from_array([0.0, 0.0, 0.0, 0.0, 1.0]),
            ..Default::default()
        };
        assert_eq!(combine(&b).unwrap(), 0.7);
        b.srl = Some(0.0);
        assert_eq!(combine(&b).unwrap(), 0.0);
        b.weights.srl = -1.0;
        assert!(combine(&b).is_err());
        b.weights = LossWeights::all(1.0);
        assert!(combine(&b).is_err(), "weighted term missing");

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let w: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.0..2.0));
            let v: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.0..3.0));
            let b = LossBundle {
                global_unmixed: Some(v[0]),
                local_unmixed: Some(v[1]),
                global_mixed: Some(v[2]),
                local_mixed: Some(v[3]),
                srl: Some(v[4]),
                weights: LossWeights::from_array(w),
                total: 0.0,
            };
            let dot: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
            assert!((combine(&b).unwrap() - dot).abs() < 1e-12);
        }
        assert_eq!("1,1,0,0,0.5".parse::<LossWeights>().unwrap().srl, 0.5);
        assert!("1,1".parse::<LossWeights>().is_err());
    }
}
