use super::{Real, Weights};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one buffer per weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(weights: &Weights<T>) -> Self {
        let zeros = || {
            weights
                .tensors
                .iter()
                .map(|t| vec![T::zero(); t.data.len()])
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected ADAM update.
pub fn adam_step<T: Real>(weights: &mut Weights<T>, grads: &[Vec<T>], state: &mut AdamState<T>, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (T::from_f64(ADAM_BETA1), T::from_f64(ADAM_BETA2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - ADAM_BETA1), T::from_f64(1.0 - ADAM_BETA2));
    // lr * m_hat / (sqrt(v_hat) + eps) = step * m / (sqrt(v) + eps * sqrt(c2))
    let step = T::from_f64(lr * c2.sqrt() / c1);
    let eps = T::from_f64(ADAM_EPS * c2.sqrt());
    for (((w, g), m), v) in weights
        .tensors
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..w.data.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            w.data[i] = w.data[i] - step * m[i] / (v[i].sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Tensor;

    fn scalar(w: f64) -> Weights<f64> {
        Weights {
            tensors: vec![Tensor {
                name: "w".into(),
                dims: vec![1],
                data: vec![w],
            }],
        }
    }

    /// Textbook update with explicit bias-corrected moments.
    fn reference(w0: f64, grads: &[f64], lr: f64) -> f64 {
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = i as i32 + 1;
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let mh = m / (1.0 - ADAM_BETA1.powi(t));
            let vh = v / (1.0 - ADAM_BETA2.powi(t));
            w -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        w
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = scalar(0.0);
        let mut s = AdamState::new(&w);
        adam_step(&mut w, &[vec![1.0]], &mut s, 0.1);
        assert!((w.tensors[0].data[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn matches_textbook_trace() {
        let grads = [0.3, -1.2, 0.05, 2.0, -0.7, 0.0, 0.4];
        let mut w = scalar(1.5);
        let mut s = AdamState::new(&w);
        for &g in &grads {
            adam_step(&mut w, &[vec![g]], &mut s, 0.01);
        }
        assert!((w.tensors[0].data[0] - reference(1.5, &grads, 0.01)).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut w = scalar(0.75);
        let mut s = AdamState::new(&w);
        for _ in 0..100 {
            adam_step(&mut w, &[vec![0.0]], &mut s, 0.1);
        }
        assert_eq!(w.tensors[0].data[0], 0.75);
    }

    #[test]
    fn tensors_update_independently() {
        let make = |a: f64, b: f64| Weights {
            tensors: vec![
                Tensor { name: "a".into(), dims: vec![1], data: vec![a] },
                Tensor { name: "b".into(), dims: vec![1], data: vec![b] },
            ],
        };
        let mut ab = make(1.0, 2.0);
        let mut ba = make(2.0, 1.0);
        let (mut sa, mut sb) = (AdamState::new(&ab), AdamState::new(&ba));
        for k in 0..5 {
            let (g1, g2) = (0.1 * k as f64, -0.3);
            adam_step(&mut ab, &[vec![g1], vec![g2]], &mut sa, 0.05);
            adam_step(&mut ba, &[vec![g2], vec![g1]], &mut sb, 0.05);
        }
        assert_eq!(ab.tensors[0].data, ba.tensors[1].data);
        assert_eq!(ab.tensors[1].data, ba.tensors[0].data);
    }
}
