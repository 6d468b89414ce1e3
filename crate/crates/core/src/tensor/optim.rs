use super::{GradSet, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
        }
    }
}

/// Adam moments for a fixed parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub step_count: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub config: AdamConfig,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamSet<S>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<S>> = params.iter().map(|(_, t)| vec![S::zero(); t.len()]).collect();
        AdamState {
            step_count: 0,
            m: zeros.clone(),
            v: zeros,
            config,
        }
    }

    /// One bias-corrected Adam update applied in place.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &GradSet<S>) -> Result<()> {
        if grads.0.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::dim("adam_step", &[params.len()], &[grads.0.len()]));
        }
        self.step_count += 1;
        let c = self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let one = S::one();
        let t = self.step_count as i32;
        let bc1 = one - S::lit(c.beta1.powi(t));
        let bc2 = one - S::lit(c.beta2.powi(t));
        let (lr, eps) = (S::lit(c.learning_rate), S::lit(c.epsilon));
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(&grads.0)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            if g.len() != p.len() {
                return Err(Error::dim("adam_step", p.shape(), &[g.len()]));
            }
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm<S: Scalar>(grads: &GradSet<S>) -> S {
    grads
        .0
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| x * x)
        .sum::<S>()
        .sqrt()
}

/// Rescales all gradients by `threshold / norm` when the global L2 norm
/// exceeds `threshold`. Returns the norm after clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut GradSet<S>, threshold: S) -> S {
    let norm = global_norm(grads);
    if norm <= threshold {
        return norm;
    }
    let factor = threshold / norm;
    for x in grads.0.iter_mut().flat_map(|g| g.iter_mut()) {
        *x *= factor;
    }
    global_norm(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_f64([1], &[value]).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.25);
        let mut st = AdamState::new(&p, AdamConfig::default());
        st.step(&mut p, &GradSet(vec![vec![0.0]])).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.25);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(0.0);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&p, cfg);
        st.step(&mut p, &GradSet(vec![vec![1.0]])).unwrap();
        assert!((p.get("w").unwrap().item() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = single(0.0);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&p, cfg);
        for _ in 0..200 {
            let w = p.get("w").unwrap().item();
            st.step(&mut p, &GradSet(vec![vec![2.0 * (w - 3.0)]])).unwrap();
        }
        assert!((p.get("w").unwrap().item() - 3.0).abs() < 0.1);
    }

    #[test]
    fn clipping_examples() {
        let mut small = GradSet(vec![vec![0.3, 0.4]]);
        assert_eq!(clip_grad_norm(&mut small, 1.0), 0.5);
        assert_eq!(small.0[0], vec![0.3, 0.4]);

        let mut big = GradSet(vec![vec![3.0f64, 4.0]]);
        clip_grad_norm(&mut big, 1.0);
        assert!((big.0[0][0] - 0.6).abs() < 1e-15);
        assert!((big.0[0][1] - 0.8).abs() < 1e-15);
    }
}
