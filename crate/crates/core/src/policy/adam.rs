use super::backward::GradAccumulator;
use super::{Dims, PolicyError, PolicyParams};

/// Adam moments kept beside the policy weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: PolicyParams,
    v: PolicyParams,
    t: u64,
}

impl Adam {
    pub fn new(dims: Dims) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: PolicyParams::zeros(dims),
            v: PolicyParams::zeros(dims),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one Adam update. A gradient containing NaN or infinity leaves
    /// both the weights and the moments untouched.
    pub fn step(&mut self, params: &mut PolicyParams, grads: &GradAccumulator, lr: f64) -> Result<(), PolicyError> {
        if let Some(name) = grads.first_non_finite() {
            return Err(PolicyError::NonFiniteGradient(name));
        }
        if grads.grads.dims() != params.dims() {
            return Err(PolicyError::ShapeMismatch(format!(
                "gradient {:?} vs params {:?}",
                grads.grads.dims(),
                params.dims()
            )));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for (((_, _, w), (_, _, g)), ((_, _, m), (_, _, v))) in tensors {
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{backward, LossGraph, SequenceTerm};

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let dims = Dims::new(5, 4, 6);
        let mut p = PolicyParams::init(dims, 1);
        let before = p.clone();
        let mut opt = Adam::new(dims);
        opt.step(&mut p, &GradAccumulator::zeros(dims), 1e-3).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn identical_steps_are_identical() {
        let dims = Dims::new(5, 4, 6);
        let mut g = GradAccumulator::zeros(dims);
        g.grads.w_rec[3] = 0.7;
        g.grads.b_out[1] = -2.0;
        let run = || {
            let mut p = PolicyParams::init(dims, 4);
            let mut opt = Adam::new(dims);
            opt.step(&mut p, &g, 1e-2).unwrap();
            opt.step(&mut p, &g, 1e-2).unwrap();
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let dims = Dims::new(5, 4, 6);
        let mut p = PolicyParams::init(dims, 1);
        let before = p.clone();
        let mut g = GradAccumulator::zeros(dims);
        g.grads.w_out[0] = f64::NAN;
        let mut opt = Adam::new(dims);
        let err = opt.step(&mut p, &g, 1e-3).unwrap_err();
        assert!(matches!(err, PolicyError::NonFiniteGradient("w_out")));
        assert_eq!(p, before);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn supervised_loss_decreases() {
        let dims = Dims::new(6, 4, 8);
        let mut p = PolicyParams::init(dims, 2);
        let batch: Vec<SequenceTerm> = (0..4)
            .map(|i| SequenceTerm {
                prompt: vec![0, i + 1],
                response: vec![(i + 2) % 6, 5],
                temps: vec![1.0; 2],
                weights: vec![-1.0; 2],
            })
            .collect();
        let graph = LossGraph { terms: batch };
        let nll = |p: &PolicyParams| graph.surrogate(p);
        let start = nll(&p);
        let mut opt = Adam::new(dims);
        for _ in 0..100 {
            let g = backward(&p, &graph).unwrap();
            opt.step(&mut p, &g, 1e-2).unwrap();
        }
        let end = nll(&p);
        assert!(end < 0.5 * start, "{start} -> {end}");
    }
}
