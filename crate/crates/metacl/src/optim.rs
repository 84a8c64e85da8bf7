//! First-order optimizers over lists of parameter tensors.
//!
//! Both optimizers treat the parameter list positionally: construct with the
//! shapes once, then call `step` with gradients in the same order every time.

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Adam with bias correction. Weight decay is the classic L2 form, added to
/// the gradient (g <- g + wd * p) before the moment updates.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Tensor2::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor2::zeros(r, c)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor2], grads: &[Tensor2]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer built for {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            p.check_same_shape(&grads[i], "adam_step")?;
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            let gd = grads[i].data();
            for j in 0..pd.len() {
                let g = gd[j] + self.weight_decay * pd[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                pd[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// AdaGrad: per-element accumulated squared gradients shrink the step size.
pub struct AdaGrad {
    lr: f64,
    eps: f64,
    acc: Vec<Tensor2>,
}

impl AdaGrad {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        AdaGrad {
            lr,
            eps: 1e-10,
            acc: shapes.iter().map(|&(r, c)| Tensor2::zeros(r, c)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor2], grads: &[Tensor2]) -> Result<()> {
        if params.len() != self.acc.len() || grads.len() != self.acc.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer built for {} tensors, got {} params / {} grads",
                self.acc.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, p) in params.iter_mut().enumerate() {
            p.check_same_shape(&grads[i], "adagrad_step")?;
            let acc = self.acc[i].data_mut();
            let pd = p.data_mut();
            let gd = grads[i].data();
            for j in 0..pd.len() {
                let g = gd[j];
                acc[j] += g * g;
                pd[j] -= self.lr * g / (acc[j].sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
