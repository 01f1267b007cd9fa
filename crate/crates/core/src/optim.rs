use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memtrace::{self, Category};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state. Adam moments are created on the first step with the
/// shapes of the parameters they track.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub lr: T,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerState { kind, lr: T::of(lr), m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Update `params` in place from `grads`.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len()
            || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape())
        {
            return Err(Error::shape("optimizer_step", "gradients do not match parameters"));
        }
        memtrace::in_category(Category::Parameters, || match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    let lr = self.lr;
                    let data = p.data().iter().zip(g.data()).map(|(&w, &d)| w - lr * d).collect();
                    *p = Tensor::raw(p.shape().to_vec(), data);
                }
                self.t += 1;
                Ok(())
            }
            OptimizerKind::Adam { beta1, beta2, eps } => self.adam_step(params, grads, beta1, beta2, eps),
        })
    }

    fn adam_step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
            return Err(Error::shape("optimizer_step", "moments do not match parameters"));
        }
        self.t += 1;
        let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
        let step = self.t as i32;
        let c1 = T::one() - b1.powi(step);
        let c2 = T::one() - b2.powi(step);
        for k in 0..params.len() {
            let n = params[k].numel();
            let (mut m, mut v, mut w) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for i in 0..n {
                let g = grads[k].data()[i];
                let mi = b1 * self.m[k].data()[i] + (T::one() - b1) * g;
                let vi = b2 * self.v[k].data()[i] + (T::one() - b2) * g * g;
                let m_hat = mi / c1;
                let v_hat = vi / c2;
                w.push(params[k].data()[i] - self.lr * m_hat / (v_hat.sqrt() + eps));
                m.push(mi);
                v.push(vi);
            }
            let shape = params[k].shape().to_vec();
            self.m[k] = Tensor::raw(shape.clone(), m);
            self.v[k] = Tensor::raw(shape.clone(), v);
            params[k] = Tensor::raw(shape, w);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor<f64> {
        Tensor::vector(vec![v])
    }

    #[test]
    fn sgd_arithmetic() {
        let mut opt = OptimizerState::sgd(0.1);
        let mut p = vec![s(1.0)];
        opt.step(&mut p, &[s(2.0)]).unwrap();
        assert!((p[0].data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for mut opt in [OptimizerState::<f64>::sgd(0.5), OptimizerState::adam(0.5)] {
            let mut p = vec![s(1.25)];
            opt.step(&mut p, &[s(0.0)]).unwrap();
            assert_eq!(p[0].data(), &[1.25]);
        }
    }

    #[test]
    fn adam_first_step_by_hand() {
        // m = 0.1 g, v = 0.001 g², m̂ = g, v̂ = g², update = lr·g/(|g| + ε)
        let g = -0.37;
        let lr = 0.01;
        let mut opt = OptimizerState::adam(lr);
        let mut p = vec![s(0.5)];
        opt.step(&mut p, &[s(g)]).unwrap();
        let m = (1.0 - 0.9) * g;
        let v = (1.0 - 0.999) * g * g;
        let m_hat = m / (1.0 - 0.9);
        let v_hat = v / (1.0 - 0.999);
        let expected = 0.5 - lr * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        // ≈ 0.5 + lr, since the first step moves by lr·sign(-g)
        assert!((p[0].data()[0] - 0.51).abs() < 1e-9);
        assert_eq!(opt.moments().0[0].shape(), &[1]);
    }

    #[test]
    fn step_is_pure_given_state() {
        let opt = OptimizerState::<f64>::adam(0.1);
        let params = vec![Tensor::vector(vec![0.1, -0.2, 0.3])];
        let grads = vec![Tensor::vector(vec![1.0, 0.5, -2.0])];
        let run = || {
            let mut o = opt.clone();
            let mut p = params.clone();
            o.step(&mut p, &grads).unwrap();
            o.step(&mut p, &grads).unwrap();
            p
        };
        assert!(run()[0].same_values(&run()[0]));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut opt = OptimizerState::<f64>::sgd(0.1);
        let mut p = vec![Tensor::vector(vec![0.0, 0.0])];
        assert!(opt.step(&mut p, &[s(1.0)]).is_err());
        assert!(opt.step(&mut p, &[]).is_err());
    }
}
