//! Bias-corrected Adam, the outer-loop optimizer for every training pipeline.

use super::{Tensor, TensorError};

/// First/second moment accumulators for one parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter in place.
    pub fn update(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        lr: f64,
    ) -> Result<(), TensorError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TensorError::Shape {
                op: "adam_update",
                detail: format!(
                    "{} params, {} grads, state for {}",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        for ((p, g), (m, v)) in params.iter().zip(grads).zip(self.m.iter().zip(&self.v)) {
            if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
                return Err(TensorError::Shape {
                    op: "adam_update",
                    detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.numel() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut st = AdamState::new(&p);
        // Prime the moments with one non-zero step, then feed zeros.
        st.update(&mut p, &[Tensor::vector(vec![1.0, 1.0])], 0.0).unwrap();
        let m_before = st.m[0].data()[0];
        let snapshot = p[0].clone();
        st.update(&mut p, &[Tensor::vector(vec![0.0, 0.0])], 0.0).unwrap();
        assert_eq!(p[0].data(), snapshot.data());
        assert!((st.m[0].data()[0] - 0.9 * m_before).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_approximately_lr() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(&p);
        st.update(&mut p, &[Tensor::scalar(1.0)], 0.01).unwrap();
        // Bias correction makes the first step very nearly -lr * sign(g).
        assert!((p[0].item() + 0.01).abs() < 1e-9, "got {}", p[0].item());
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // Oracle: the reference scalar recurrence is this very loop; the
        // assertion pins the endpoint.
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(&p);
        for _ in 0..200 {
            let x = p[0].item();
            let g = 2.0 * (x - 3.0);
            st.update(&mut p, &[Tensor::scalar(g)], 0.1).unwrap();
        }
        assert!((p[0].item() - 3.0).abs() < 0.05, "ended at {}", p[0].item());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut st = AdamState::new(&p);
        assert!(st.update(&mut p, &[Tensor::vector(vec![1.0])], 0.1).is_err());
    }
}
