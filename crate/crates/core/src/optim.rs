//! Parameter updates: plain SGD and Adam with bias correction.

use crate::autograd::Gradients;
use crate::tensor::{Real, Result, Tensor, TensorError};
use crate::weights::ModelWeights;

fn grad_for<'a, T: Real>(
    grads: &'a Gradients<T>,
    name: &str,
    like: &Tensor<T>,
) -> Result<&'a Tensor<T>> {
    let g = grads
        .get(name)
        .ok_or_else(|| TensorError::Contract(format!("missing gradient for {name:?}")))?;
    if g.shape() != like.shape() {
        return Err(TensorError::Shape {
            op: "optimizer",
            left: like.shape().to_vec(),
            right: g.shape().to_vec(),
        });
    }
    Ok(g)
}

/// `w ← w − lr·g` for every tensor, preserving order.
pub fn sgd_step<T: Real>(
    weights: &ModelWeights<T>,
    grads: &Gradients<T>,
    lr: T,
) -> Result<ModelWeights<T>> {
    let mut out = ModelWeights::new();
    for (name, w) in weights.iter() {
        let g = grad_for(grads, name, w)?;
        let next = if lr == T::zero() {
            w.clone()
        } else {
            w.zip_map(g, |wi, gi| wi - lr * gi)?
        };
        out.insert(name, next)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T: Real = f32> {
    pub step: u64,
    m: ModelWeights<T>,
    v: ModelWeights<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            m: ModelWeights::new(),
            v: ModelWeights::new(),
        }
    }
}

pub fn adam_step<T: Real>(
    mut state: AdamState<T>,
    weights: &ModelWeights<T>,
    grads: &Gradients<T>,
    lr: T,
    params: AdamParams,
) -> Result<(AdamState<T>, ModelWeights<T>)> {
    if state.step == 0 {
        state.m = weights
            .iter()
            .map(|(n, w)| (n.to_string(), Tensor::zeros(w.shape())))
            .collect();
        state.v = state.m.clone();
    } else if !state.m.same_layout(weights) {
        return Err(TensorError::Contract(
            "adam state does not match weights".into(),
        ));
    }
    state.step += 1;
    let (b1, b2, eps) = (T::of(params.beta1), T::of(params.beta2), T::of(params.eps));
    let bc1 = T::one() - b1.powi(state.step as i32);
    let bc2 = T::one() - b2.powi(state.step as i32);

    let mut out = ModelWeights::new();
    for (name, w) in weights.iter() {
        let g = grad_for(grads, name, w)?;
        let m = state.m.get_mut(name).expect("layout checked");
        let m_new = m.zip_map(g, |mi, gi| b1 * mi + (T::one() - b1) * gi)?;
        *m = m_new;
        let v = state.v.get_mut(name).expect("layout checked");
        let v_new = v.zip_map(g, |vi, gi| b2 * vi + (T::one() - b2) * gi * gi)?;
        *v = v_new;

        let (m, v) = (
            &state.m.get(name).unwrap().data(),
            &state.v.get(name).unwrap().data(),
        );
        let data = w
            .data()
            .iter()
            .zip(m.iter().zip(v.iter()))
            .map(|(&wi, (&mi, &vi))| {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                wi - lr * m_hat / (v_hat.sqrt() + eps)
            })
            .collect();
        out.insert(name, Tensor::new(w.shape(), data)?)?;
    }
    Ok((state, out))
}

/// Warm-up then inverse-square-root decay:
/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn transformer_lr(d_model: usize, step: u64, warmup: u64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * step.powf(-0.5).min(step * warmup.powf(-1.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: &[f64]) -> ModelWeights<f64> {
        let mut w = ModelWeights::new();
        w.insert(name, Tensor::from_f64([v.len()], v).unwrap())
            .unwrap();
        w
    }

    fn grads(name: &str, v: &[f64]) -> Gradients<f64> {
        let mut g = Gradients::new();
        g.insert(name.into(), Tensor::from_f64([v.len()], v).unwrap());
        g
    }

    #[test]
    fn sgd_single_step() {
        let w = single("w", &[1.0]);
        let out = sgd_step(&w, &grads("w", &[0.5]), 0.1).unwrap();
        assert!((out.get("w").unwrap().data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let w: ModelWeights<f32> = single("w", &[1.5, -0.0, 3.25]).cast();
        let g: Gradients<f32> = [(
            "w".to_string(),
            Tensor::from_f64([3], &[f64::NAN, 1.0, 2.0]).unwrap(),
        )]
        .into_iter()
        .collect();
        assert!(sgd_step(&w, &g, 0.0).unwrap().bit_eq(&w));
    }

    #[test]
    fn sgd_missing_gradient() {
        let w = single("w", &[1.0]);
        let err = sgd_step(&w, &grads("other", &[1.0]), 0.1).unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let w = single("w", &[0.0]);
        let (state, out) = adam_step(
            AdamState::new(),
            &w,
            &grads("w", &[1.0]),
            1e-3,
            AdamParams::default(),
        )
        .unwrap();
        assert_eq!(state.step, 1);
        assert!((out.get("w").unwrap().data()[0] + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_keeps_weights() {
        let w = single("w", &[0.7, -2.0]);
        let (_, out) = adam_step(
            AdamState::new(),
            &w,
            &grads("w", &[0.0, 0.0]),
            1e-2,
            AdamParams::default(),
        )
        .unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // f(w) = (w - 3)^2, minimum at 3.
        let mut w = single("w", &[0.0]);
        let mut state = AdamState::new();
        for _ in 0..100 {
            let x = w.get("w").unwrap().data()[0];
            let g = grads("w", &[2.0 * (x - 3.0)]);
            let lr = 0.3 * 0.96f64.powi(state.step as i32 + 1);
            (state, w) = adam_step(state, &w, &g, lr, AdamParams::default()).unwrap();
        }
        assert!((w.get("w").unwrap().data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn warmup_schedule_peaks_at_warmup() {
        let peak = transformer_lr(256, 4000, 4000);
        assert!(transformer_lr(256, 100, 4000) < peak);
        assert!(transformer_lr(256, 10_000, 4000) < peak);
        assert!((peak - 256f64.powf(-0.5) * 4000f64.powf(-0.5)).abs() < 1e-15);
    }
}
