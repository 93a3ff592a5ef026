use super::{Result, Tensor, TensorError};

/// Adam moments and hyperparameters for an ordered parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(param_lens: &[usize], lr: f64) -> Self {
        Self::with_betas(param_lens, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(param_lens: &[usize], lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }
}

/// One bias-corrected Adam update using each parameter's accumulated
/// gradient. Parameters without a gradient are treated as zero-gradient.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(TensorError::LengthMismatch {
            expected: state.m.len(),
            actual: params.len(),
        });
    }
    for (p, m) in params.iter().zip(&state.m) {
        if p.numel() != m.len() {
            return Err(TensorError::LengthMismatch {
                expected: m.len(),
                actual: p.numel(),
            });
        }
        if let Some(g) = p.grad() {
            if g.len() != m.len() {
                return Err(TensorError::LengthMismatch {
                    expected: m.len(),
                    actual: g.len(),
                });
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.epsilon);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad.take();
        let data = p.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        p.grad = grad;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(data: &[f64], grad: &[f64]) -> Tensor {
        let mut p = Tensor::new(vec![data.len()], data.to_vec())
            .unwrap()
            .with_grad();
        p.accumulate_grad(grad).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut ps = vec![param(&[1.0, -2.0, 3.5], &[0.0; 3])];
        let mut st = AdamState::new(&[3], 1e-3);
        adam_step(&mut ps, &mut st).unwrap();
        assert_eq!(ps[0].data(), &[1.0, -2.0, 3.5]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_each_element_by_about_lr() {
        let g = [0.5, -3.0, 1e-2];
        let mut ps = vec![param(&[0.0; 3], &g)];
        let mut st = AdamState::new(&[3], 1e-3);
        adam_step(&mut ps, &mut st).unwrap();
        for (x, gi) in ps[0].data().iter().zip(g) {
            // bias-corrected first step: lr * g / (|g| + eps)
            let expected = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-15, "{x} vs {expected}");
            assert!((x.abs() - 1e-3).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_betas_reduce_to_sign_descent() {
        let mut ps = vec![param(&[1.0, 1.0], &[4.0, -0.25])];
        let mut st = AdamState::with_betas(&[2], 0.1, 0.0, 0.0, 1e-12);
        adam_step(&mut ps, &mut st).unwrap();
        adam_step(&mut ps, &mut st).unwrap();
        let d = ps[0].data();
        assert!((d[0] - 0.8).abs() < 1e-9);
        assert!((d[1] - 1.2).abs() < 1e-9);
        assert_eq!(st.step_count(), 2);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let mut ps = vec![param(&[0.0; 2], &[1.0; 2])];
        let mut st = AdamState::new(&[3], 1e-3);
        assert!(adam_step(&mut ps, &mut st).is_err());
        let mut st = AdamState::new(&[2, 2], 1e-3);
        assert!(adam_step(&mut ps, &mut st).is_err());
    }
}
