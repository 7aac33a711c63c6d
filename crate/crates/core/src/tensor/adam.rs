use super::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction. Moments are allocated on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores moments (e.g. from a checkpoint).
    pub fn set_moments(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::invalid("adam moments have mismatched shapes"));
        }
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update of `params` given `grads` (same order, same lengths).
    /// A non-finite gradient refuses the whole step and leaves everything
    /// untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                log::error!(
                    "adam: refusing step {}: parameter {i} gradient[{j}] = {}",
                    self.step + 1,
                    g[j]
                );
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter {i} at entry {j}"
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::invalid("adam state does not match parameter list"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
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
        let mut p = vec![Tensor::vector(vec![1.0, -2.0, 3.5])];
        let before = p.clone();
        let mut a = AdamState::default();
        for _ in 0..5 {
            a.step(&mut p, &[vec![0.0; 3]]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn one_step_matches_hand_rolled_update() {
        let mut p = vec![Tensor::scalar(0.5)];
        let mut a = AdamState::default();
        a.step(&mut p, &[vec![1.0]]).unwrap();
        // m = 0.1, v = 0.001; bias-corrected both become 1.0 / 1.0
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat = 0.001 / (1.0 - 0.999);
        let expected = 0.5 - 1e-3 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-15);
        assert!((0.5 - p[0].item() - 1e-3).abs() < 1e-10);
        assert_eq!(a.step, 1);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut p = vec![Tensor::vector(vec![0.3, 0.3]), Tensor::vector(vec![0.3, 0.3])];
        let mut a = AdamState::new(0.01);
        for s in 0..50 {
            let g = (s as f64 * 0.7).sin();
            a.step(&mut p, &[vec![g, g], vec![g, g]]).unwrap();
        }
        assert_eq!(p[0], p[1]);
        assert_eq!(p[0].data()[0], p[0].data()[1]);
    }

    #[test]
    fn nan_gradient_is_refused() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut a = AdamState::default();
        assert!(a.step(&mut p, &[vec![f64::NAN]]).is_err());
        assert_eq!(a.step, 0);
        assert_eq!(p[0].item(), 1.0);
    }
}
