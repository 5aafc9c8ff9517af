use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// SGD or Adam over a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: T,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: T, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (zeros(), zeros()),
        };
        Self { kind, lr, step: 0, first, second }
    }

    pub fn sgd(lr: T, params: &[Tensor<T>]) -> Self {
        Self::new(OptimizerKind::Sgd, lr, params)
    }

    pub fn adam(lr: T, params: &[Tensor<T>]) -> Self {
        Self::new(OptimizerKind::adam(), lr, params)
    }

    /// Adam first/second moment estimates (empty for SGD).
    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    pub fn restore(kind: OptimizerKind, lr: T, step: u64, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>) -> Self {
        Self { kind, lr, step, first, second }
    }

    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("optimizer_step", params.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim("optimizer_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.add_assign_scaled(g, -self.lr)?;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.len() != params.len() {
                    return Err(Error::dim("optimizer_step moments", self.first.len(), params.len()));
                }
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                let t = self.step as i32;
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.first[k].data_mut();
                    let v = self.second[k].data_mut();
                    for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        *mv = b1 * *mv + (T::one() - b1) * gv;
                        *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *pv -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
