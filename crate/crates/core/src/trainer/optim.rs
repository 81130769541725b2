//! AdamW with decoupled weight decay, gradient clipping and the cosine
//! learning-rate schedule.

use crate::autograd::{cst, ParamGrads, ParamSet, Real};
use crate::error::{ensure, Result};

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to
/// `min` at `total`; `min` beyond.
pub fn cosine_lr(step: u64, warmup: u64, total: u64, peak: f64, min: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total {
        return min;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    min + (peak - min) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: ParamSet<F>,
    pub v: ParamSet<F>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
}

/// Fails on the first non-finite gradient, naming its parameter.
pub fn check_finite<F: Real>(grads: &ParamGrads<F>) -> Result<()> {
    for (name, g) in grads.iter() {
        ensure!(g.iter().all(|v| v.is_finite()), NonFinite, "gradient of {name}");
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut ParamGrads<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().to_f64().unwrap_or(f64::NAN);
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(cst(max_norm / norm));
    }
    norm
}

/// One AdamW update: `p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)` with bias-corrected
/// moments.
pub fn adamw_step<F: Real>(
    params: &mut ParamSet<F>,
    grads: &ParamGrads<F>,
    state: &mut AdamState<F>,
    cfg: &AdamConfig,
) -> Result<()> {
    ensure!(
        params.congruent(grads) && params.congruent(&state.m) && params.congruent(&state.v),
        Shape,
        "optimizer state does not match the parameters"
    );
    check_finite(grads)?;
    state.step += 1;
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let (b1f, b2f) = (cst::<F>(b1), cst::<F>(b2));
    let (one_b1, one_b2) = (cst::<F>(1.0 - b1), cst::<F>(1.0 - b2));
    let (c1f, c2f) = (cst::<F>(c1), cst::<F>(c2));
    let lr = cst::<F>(cfg.lr);
    let decay = cst::<F>(1.0 - cfg.lr * cfg.weight_decay);
    let eps = cst::<F>(cfg.eps);
    let tensors = params.tensors_mut().iter_mut().zip(grads.tensors());
    for ((p, g), (m, v)) in tensors.zip(state.m.tensors_mut().iter_mut().zip(state.v.tensors_mut().iter_mut())) {
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1f * *m + one_b1 * g;
            *v = b2f * *v + one_b2 * g * g;
            let m_hat = *m / c1f;
            let v_hat = *v / c2f;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn single(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add("w", Array2::from_elem((1, 1), v));
        p
    }

    fn cfg(lr: f64, wd: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay: wd,
            betas: [0.9, 0.95],
            eps: 1e-8,
        }
    }

    #[test]
    fn schedule_points() {
        let (w, t, peak, min) = (10, 110, 1e-3, 1e-6);
        assert_eq!(cosine_lr(0, w, t, peak, min), 0.0);
        assert_eq!(cosine_lr(w, w, t, peak, min), peak);
        assert_eq!(cosine_lr(t, w, t, peak, min), min);
        assert_eq!(cosine_lr(t + 50, w, t, peak, min), min);
        let mid = cosine_lr(60, w, t, peak, min);
        assert!((mid - (min + (peak - min) / 2.0)).abs() < 1e-15);
        assert!((cosine_lr(5, w, t, peak, min) - peak / 2.0).abs() < 1e-18);
    }

    #[test]
    fn adamw_single_steps() {
        let mut p = single(0.7);
        let g = single(0.0);
        let mut s = AdamState::new(&p);
        adamw_step(&mut p, &g, &mut s, &cfg(0.1, 0.0)).unwrap();
        assert_eq!(p.tensors()[0][[0, 0]], 0.7);

        let mut p = single(0.7);
        let mut s = AdamState::new(&p);
        adamw_step(&mut p, &g, &mut s, &cfg(0.1, 0.05)).unwrap();
        assert!((p.tensors()[0][[0, 0]] - 0.7 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);

        // g = 1: m̂ = 1, v̂ = 1, so the step is lr / (1 + ε)
        let mut p = single(0.7);
        let mut s = AdamState::new(&p);
        adamw_step(&mut p, &single(1.0), &mut s, &cfg(0.1, 0.0)).unwrap();
        let expect = 0.7 - 0.1 / (1.0 + 1e-8);
        assert!((p.tensors()[0][[0, 0]] - expect).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(1.0);
        let mut s = AdamState::new(&p);
        let err = adamw_step(&mut p, &single(f64::NAN), &mut s, &cfg(0.1, 0.0)).unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
        assert_eq!(p.tensors()[0][[0, 0]], 1.0, "no partial update");
    }

    #[test]
    fn clipping() {
        let mut g = ParamSet::<f64>::new();
        g.add("a", Array2::from_elem((1, 2), 3.0));
        g.add("b", Array2::from_elem((1, 1), 4.0 * 2f64.sqrt()));
        // norm = sqrt(9 + 9 + 32) = sqrt(50)
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 50f64.sqrt()).abs() < 1e-12);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        let n2 = clip_grad_norm(&mut g, 5.0);
        assert!((n2 - 1.0).abs() < 1e-12);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
