use super::{AutodiffError, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for a fixed, ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }
}

/// One bias-corrected Adam update (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), AutodiffError> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(AutodiffError::ParamCount {
            params: params.len(),
            grads: grads.len(),
            state: state.first.len(),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: if p.shape() != g.shape() {
                    g.shape().to_vec()
                } else {
                    m.shape().to_vec()
                },
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        for (((pv, gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut state = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[Tensor::vector(vec![0.5, 0.5])], &mut state, 0.1).unwrap();
        let after_first = p.clone();
        let m_before = state.first_moments()[0].clone();
        let v_before = state.second_moments()[0].clone();

        let mut q = after_first.clone();
        adam_step(&mut [&mut q], &[Tensor::zeros(&[2])], &mut state, 0.1).unwrap();
        for (a, b) in state.first_moments()[0].data().iter().zip(m_before.data()) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }
        for (a, b) in state.second_moments()[0].data().iter().zip(v_before.data()) {
            assert!((a - 0.999 * b).abs() < 1e-15);
        }

        // From a fresh state a zero gradient is an exact no-op.
        let mut r = Tensor::vector(vec![3.0]);
        let mut fresh = AdamState::new([&r]);
        adam_step(&mut [&mut r], &[Tensor::zeros(&[1])], &mut fresh, 0.1).unwrap();
        assert_eq!(r.data(), &[3.0]);
        assert_eq!(fresh.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        // m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut p = Tensor::vector(vec![0.0, 0.0, 0.0]);
        let g = Tensor::vector(vec![2.0, -0.5, 1e-3]);
        let mut state = AdamState::new([&p]);
        adam_step(&mut [&mut p], std::slice::from_ref(&g), &mut state, 0.01).unwrap();
        for (pv, gv) in p.data().iter().zip(g.data()) {
            let expected = -0.01 * gv / (gv.abs() + ADAM_EPS);
            assert!((pv - expected).abs() < 1e-15, "{pv} vs {expected}");
            assert!((pv.abs() - 0.01).abs() < 1e-7);
        }
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = Tensor::vector(vec![0.1, 0.2]);
            let mut s = AdamState::new([&p]);
            for k in 0..5 {
                let g = Tensor::vector(vec![k as f64 * 0.3 - 0.5, 0.7]);
                adam_step(&mut [&mut p], &[g], &mut s, 1e-3).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        let mut s = AdamState::new([&p]);
        let err = adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut s, 0.1).unwrap_err();
        assert!(matches!(err, AutodiffError::ShapeMismatch { op: "adam_step", .. }));
    }
}
