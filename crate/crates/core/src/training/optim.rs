//! Adam with decoupled weight decay, and plain Adam for reference.

use crate::error::{Error, Result};
use crate::params::Weights;
use crate::tensor::{Real, Tensor};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter tensor, zero until first use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn begin(&mut self, sizes: impl ExactSizeIterator<Item = usize>) -> Result<()> {
        if self.m.is_empty() {
            let sizes: Vec<usize> = sizes.collect();
            self.m = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
            self.v = self.m.clone();
        } else {
            let n = sizes.len();
            if n != self.m.len() {
                return Err(Error::Contract(format!(
                    "optimizer state holds {} tensors, got {n}",
                    self.m.len()
                )));
            }
            for (i, size) in sizes.enumerate() {
                if self.m[i].len() != size {
                    return Err(Error::Contract(format!("optimizer state size mismatch at tensor {i}")));
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Per-step constants of the AdamW moment update.
struct Moments<T> {
    beta1: T,
    beta2: T,
    one_minus_beta1: T,
    one_minus_beta2: T,
    correction1: T,
    correction2: T,
    eps: T,
}

impl<T: Real> Moments<T> {
    fn new(beta1: f64, beta2: f64, eps: f64, step: u64) -> Self {
        let t = step as i32;
        Self {
            beta1: T::from_f64_lossy(beta1),
            beta2: T::from_f64_lossy(beta2),
            one_minus_beta1: T::from_f64_lossy(1.0 - beta1),
            one_minus_beta2: T::from_f64_lossy(1.0 - beta2),
            correction1: T::from_f64_lossy(1.0 - beta1.powi(t)),
            correction2: T::from_f64_lossy(1.0 - beta2.powi(t)),
            eps: T::from_f64_lossy(eps),
        }
    }

    /// Updates both moments and returns `m_hat / (sqrt(v_hat) + eps)`.
    #[inline]
    fn direction(&self, m: &mut T, v: &mut T, g: T) -> T {
        *m = self.beta1 * *m + self.one_minus_beta1 * g;
        *v = self.beta2 * *v + self.one_minus_beta2 * g * g;
        let m_hat = *m / self.correction1;
        let v_hat = *v / self.correction2;
        m_hat / (v_hat.sqrt() + self.eps)
    }
}

fn check_lengths<T>(param: &[T], grad: &[T], index: usize) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::Contract(format!(
            "tensor {index}: {} parameters but {} gradients",
            param.len(),
            grad.len()
        )));
    }
    Ok(())
}

impl AdamW {
    /// `theta <- theta (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    fn update<T: Real>(&self, moments: &Moments<T>, param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T]) {
        let lr = T::from_f64_lossy(self.lr);
        let decay = T::from_f64_lossy(1.0 - self.lr * self.weight_decay);
        for k in 0..param.len() {
            let d = moments.direction(&mut m[k], &mut v[k], grad[k]);
            param[k] = param[k] * decay - lr * d;
        }
    }

    /// One step over every tensor of `weights`, in traversal order.
    pub fn apply<T: Real, W: Weights<Tensor<T>>>(
        &self,
        weights: &mut W,
        grads: &[&[T]],
        state: &mut OptimState<T>,
    ) -> Result<()> {
        let mut sizes = Vec::new();
        weights.visit("", &mut |_, t| sizes.push(t.numel()));
        if sizes.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameter tensors but {} gradients",
                sizes.len(),
                grads.len()
            )));
        }
        for (i, (n, g)) in sizes.iter().zip(grads).enumerate() {
            if *n != g.len() {
                return Err(Error::Contract(format!(
                    "tensor {i}: {n} parameters but {} gradients",
                    g.len()
                )));
            }
        }
        state.begin(sizes.into_iter())?;
        let moments = Moments::new(self.beta1, self.beta2, self.eps, state.step);
        let mut i = 0;
        let (ms, vs) = (&mut state.m, &mut state.v);
        weights.visit_mut("", &mut |_, t| {
            self.update(&moments, t.data_mut(), grads[i], &mut ms[i], &mut vs[i]);
            i += 1;
        });
        Ok(())
    }
}

/// One AdamW step over parallel lists of parameters and gradients.
pub fn adamw_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    config: &AdamW,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "tensor {i}: parameter shape {:?} but gradient shape {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.begin(params.iter().map(Tensor::numel))?;
    let moments = Moments::new(config.beta1, config.beta2, config.eps, state.step);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        config.update(&moments, p.data_mut(), g.data(), &mut state.m[i], &mut state.v[i]);
    }
    Ok(())
}

/// Adam hyperparameters, without weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One plain Adam step: `theta <- theta - lr m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    config: &Adam,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract("parameter and gradient counts differ".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        check_lengths(p.data(), g.data(), i)?;
    }
    state.begin(params.iter().map(Tensor::numel))?;
    let t = state.step as i32;
    let lr = T::from_f64_lossy(config.lr);
    let b1 = T::from_f64_lossy(config.beta1);
    let b2 = T::from_f64_lossy(config.beta2);
    let c1 = T::from_f64_lossy(1.0 - config.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - config.beta2.powi(t));
    let eps = T::from_f64_lossy(config.eps);
    let (rest1, rest2) = (
        T::from_f64_lossy(1.0 - config.beta1),
        T::from_f64_lossy(1.0 - config.beta2),
    );
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, (theta, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = b1 * m[k] + rest1 * gk;
            v[k] = b2 * v[k] + rest2 * gk * gk;
            *theta = *theta - lr * ((m[k] / c1) / ((v[k] / c2).sqrt() + eps));
        }
    }
    Ok(())
}
