use super::network::Parameters;
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Stochastic gradient descent with classical momentum:
/// `v <- momentum * v - lr * g`, `theta <- theta + v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Parameters<T>,
}

fn check_finite<T: Scalar>(grads: &Parameters<T>) -> Result<()> {
    match grads
        .layers
        .iter()
        .find(|l| !l.kernel.all_finite() || !l.bias.all_finite())
    {
        Some(bad) => Err(Error::NonFinite(format!("gradient of layer `{}`", bad.name))),
        None => Ok(()),
    }
}

fn zeroed<T: Scalar>(params: &Parameters<T>) -> Parameters<T> {
    let mut z = params.clone();
    for l in &mut z.layers {
        l.kernel.scale(T::zero());
        l.bias.scale(T::zero());
    }
    z
}

fn check_lr(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("learning rate must be positive, got {lr}")))
    }
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &Parameters<T>, lr: f64, momentum: f64) -> Result<Self> {
        check_lr(lr)?;
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: zeroed(params),
        })
    }

    /// Applies one update. A non-finite gradient aborts the step before any
    /// parameter changes and names the offending layer.
    pub fn step(&mut self, params: &mut Parameters<T>, grads: &Parameters<T>) -> Result<()> {
        check_finite(grads)?;
        let lr = T::of(self.lr);
        let mu = T::of(self.momentum);
        for (_, v, g) in self.velocity.zip_mut(grads) {
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = mu * *vi - lr * *gi;
            }
        }
        for (_, p, v) in params.zip_mut(&self.velocity) {
            for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
                *pi = *pi + *vi;
            }
        }
        Ok(())
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: i32,
    m: Parameters<T>,
    v: Parameters<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &Parameters<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        check_lr(lr)?;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::Config("Adam needs betas in [0, 1) and a positive epsilon".into()));
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            steps: 0,
            m: zeroed(params),
            v: zeroed(params),
        })
    }

    pub fn step(&mut self, params: &mut Parameters<T>, grads: &Parameters<T>) -> Result<()> {
        check_finite(grads)?;
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        for (_, m, g) in self.m.zip_mut(grads) {
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = T::of(b1 * mi.as_f64() + (1.0 - b1) * gi.as_f64());
            }
        }
        for (_, v, g) in self.v.zip_mut(grads) {
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                let g = gi.as_f64();
                *vi = T::of(b2 * vi.as_f64() + (1.0 - b2) * g * g);
            }
        }
        for ((lp, lm), lv) in params.layers.iter_mut().zip(&self.m.layers).zip(&self.v.layers) {
            for (p, (m, v)) in [(&mut lp.kernel, (&lm.kernel, &lv.kernel)), (&mut lp.bias, (&lm.bias, &lv.bias))] {
                for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                    let mhat = mi.as_f64() / c1;
                    let vhat = vi.as_f64() / c2;
                    *pi = T::of(pi.as_f64() - self.lr * mhat / (vhat.sqrt() + self.eps));
                }
            }
        }
        Ok(())
    }
}

/// Update rule selected by configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer<T> {
    Sgd(Sgd<T>),
    Adam(Adam<T>),
}

impl<T: Scalar> Optimizer<T> {
    /// `momentum` doubles as Adam's first-moment decay.
    pub fn new(kind: OptimizerKind, params: &Parameters<T>, lr: f64, momentum: f64) -> Result<Self> {
        Ok(match kind {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(params, lr, momentum)?),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(params, lr, momentum, 0.999, 1e-8)?),
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.lr = lr,
            Optimizer::Adam(o) => o.lr = lr,
        }
    }

    pub fn step(&mut self, params: &mut Parameters<T>, grads: &Parameters<T>) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads),
            Optimizer::Adam(o) => o.step(params, grads),
        }
    }
}
