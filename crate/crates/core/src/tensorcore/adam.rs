use super::tensor::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Bias-corrected Adam state for a fixed list of parameter tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zero moments shaped like `params`, with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first_moment: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            second_moment: first_moment.clone(),
            first_moment,
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update. Fails without touching anything if a gradient is non-finite
    /// or shapes disagree.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if !p.same_shape(g) || !p.same_shape(&self.first_moment[i]) {
                return Err(Error::Shape(format!(
                    "adam: parameter {i} has shape {:?} but gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            g.check_finite(&format!("adam gradient for parameter {i}"))?;
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        let mut st = AdamState::new([&p]);
        st.step(&mut [&mut p], &[Tensor::zeros(&[3])], 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = g, v_hat = g^2 after bias correction, so the update is lr * g / (|g| + eps)
        let g = vec![0.5, -3.0, 1e-3, 0.0];
        let mut p = Tensor::vector(vec![0.0; 4]);
        let mut st = AdamState::new([&p]);
        let lr = 0.01;
        st.step(&mut [&mut p], &[Tensor::vector(g.clone())], lr).unwrap();
        for (w, gi) in p.data().iter().zip(&g) {
            let want = -lr * gi / (gi.abs() + 1e-8);
            assert!((w - want).abs() < 1e-15, "{w} vs {want}");
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut w = Tensor::vector(vec![1.0]);
        let mut st = AdamState::new([&w]);
        for _ in 0..200 {
            let g = Tensor::vector(vec![2.0 * w.data()[0]]);
            st.step(&mut [&mut w], &[g], 0.1).unwrap();
        }
        assert!(w.data()[0].abs() < 1e-2, "w = {}", w.data()[0]);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut st = AdamState::new([&p]);
        let err = st
            .step(&mut [&mut p], &[Tensor::vector(vec![0.1, f64::NAN])], 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(st.step_count, 0);
    }
}
