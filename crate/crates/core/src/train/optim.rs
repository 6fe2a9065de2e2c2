//! AdamW, the learning-rate schedule and the label-smoothed loss.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First and second moments per parameter and the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T: Element> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        AdamState { v: m.clone(), m, step: 0 }
    }
}

/// One decoupled-weight-decay Adam update with bias correction:
/// `w ← w − lr·(m̂/(√v̂ + eps) + wd·w)`. Parameters whose gradient is `None`
/// are left untouched; `decay[i] == false` disables weight decay.
pub fn adamw_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[Option<&Tensor<T>>],
    decay: &[bool],
    state: &mut AdamState<T>,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::usage(format!(
            "adamw_step got {n} params, {} grads, {} decay flags, {} moments",
            grads.len(),
            decay.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.shape() != p.shape() || state.m[i].shape() != p.shape() {
                return Err(Error::usage(format!(
                    "gradient {i} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2, eps) = (T::from_f64(hyper.beta1), T::from_f64(hyper.beta2), hyper.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let wd = if decay[i] { hyper.weight_decay } else { 0.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = p.data_mut();
        for (((w, &g), m), v) in w.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = m.as_f64() / bc1;
            let v_hat = v.as_f64() / bc2;
            let wf = w.as_f64();
            *w = T::from_f64(wf - lr * (m_hat / (v_hat.sqrt() + eps) + wd * wf));
        }
    }
    Ok(())
}

/// Learning-rate schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    /// Peak rate reached at the end of warmup.
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    /// Linear ramp `peak·step/warmup` up to `warmup_steps`, then cosine decay
    /// reaching `min_lr` at `total_steps − 1`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps;
        if step < w {
            return self.peak_lr * step as f64 / w as f64;
        }
        let last = self.total_steps.saturating_sub(1);
        if last <= w {
            return self.peak_lr;
        }
        let progress = (step.min(last) - w) as f64 / (last - w) as f64;
        self.min_lr + (self.peak_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Mean over the batch of the label-smoothed negative log-likelihood. The
/// target puts `1 − s + s/K` on the label and `s/K` elsewhere.
pub fn cross_entropy_ls<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::usage(format!("label smoothing {smoothing} must lie in [0, 1)")));
    }
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::dim(format!("logits {shape:?} do not match {} labels", labels.len())));
    }
    let (b, k) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::usage(format!("label {bad} out of range for {k} classes")));
    }
    let off = smoothing / k as f64;
    let mut target = vec![T::from_f64(off); b * k];
    for (i, &l) in labels.iter().enumerate() {
        target[i * k + l] = T::from_f64(1.0 - smoothing + off);
    }
    let t = tape.constant(Tensor::from_vec(&[b, k], target)?)?;
    let logp = tape.log_softmax(logits)?;
    let prod = tape.mul(logp, t)?;
    let total = tape.sum(prod)?;
    tape.scale(total, -1.0 / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(w: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let mut p = Tensor::scalar(w);
        let grad = Tensor::scalar(g);
        let mut state = AdamState::<f64>::new([p.shape()]);
        let hyper = AdamHyper { weight_decay: wd, ..Default::default() };
        adamw_step(&mut [&mut p], &[Some(&grad)], &[true], &mut state, lr, &hyper).unwrap();
        p[0]
    }

    #[test]
    fn first_step_hand_value() {
        assert!((step(1.0, 1.0, 0.1, 0.01) - 0.8990000001).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_no_decay_is_fixed_point() {
        assert_eq!(step(0.7, 0.0, 0.1, 0.0), 0.7);
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        assert!((step(2.0, 0.0, 0.1, 0.5) - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut state = AdamState::<f64>::new([p.shape()]);
        let r = adamw_step(&mut [&mut p], &[Some(&g)], &[true], &mut state, 0.1, &AdamHyper::default());
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn schedule_endpoints_and_junction() {
        let s = Schedule { peak_lr: 1e-3, min_lr: 1e-5, warmup_steps: 10, total_steps: 100 };
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(10), 1e-3);
        assert!((s.lr_at(9) - 0.9e-3).abs() < 1e-15);
        assert!((s.lr_at(99) - 1e-5).abs() < 1e-12);
        assert!((s.lr_at(11) - s.lr_at(10)).abs() < 1e-3 * 1e-3);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[2, 5])).unwrap();
        let l = cross_entropy_ls(&mut tape, z, &[1, 4], 0.0).unwrap();
        assert!((tape.value(l)[0] - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_correct_logit_is_near_zero() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_vec(&[1, 3], vec![0.0, 100.0, 0.0]).unwrap()).unwrap();
        let l = cross_entropy_ls(&mut tape, z, &[1], 0.0).unwrap();
        assert!(tape.value(l)[0] < 1e-40);
    }

    #[test]
    fn label_out_of_range_is_usage_error() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(matches!(cross_entropy_ls(&mut tape, z, &[3], 0.1), Err(Error::Usage(_))));
    }
}
