use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// SGD with momentum and L2 weight decay.
///
/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`. Velocity buffers are created on the
/// first step and matched to parameters by position.
#[derive(Clone, Debug)]
pub struct Sgd<E> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<E>>,
}

impl<E: Element> Sgd<E> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Vec<E>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<E>>) {
        self.velocity = velocity;
    }

    pub fn step(&mut self, params: &mut [Tensor<E>]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::usage(format!("parameter {i} has no gradient")));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![E::zero(); p.numel()]).collect();
        }
        if self.velocity.len() != params.len()
            || self.velocity.iter().zip(params.iter()).any(|(v, p)| v.len() != p.numel())
        {
            return Err(Error::usage("optimizer state does not match the parameter list"));
        }
        let (lr, mu, wd) = (E::of(self.lr), E::of(self.momentum), E::of(self.weight_decay));
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let (grad, data) = p.grad_and_data_mut();
            let grad = grad.expect("checked above");
            for ((w, &g), vel) in data.iter_mut().zip(grad).zip(v.iter_mut()) {
                *vel = mu * *vel + g + wd * *w;
                *w = *w - lr * *vel;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::from_f64(&[1], &[v]).unwrap().with_requires_grad(true);
        t.set_grad(vec![g]).unwrap();
        t
    }

    #[test]
    fn plain_step() {
        let mut p = [param(1.0, 1.0)];
        Sgd::new(0.1, 0.0, 0.0).step(&mut p).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_is_noop() {
        let mut p = [param(3.25, 0.0)];
        Sgd::new(0.1, 0.9, 0.0).step(&mut p).unwrap();
        assert_eq!(p[0].data()[0], 3.25);
    }

    #[test]
    fn momentum_recursion() {
        // hand recursion: v1 = g1, p1 = p0 - lr v1; v2 = mu v1 + g2, p2 = p1 - lr v2
        let (lr, mu, g1, g2, p0) = (0.1, 0.9, 0.5, -0.25, 2.0);
        let v1 = g1;
        let p1 = p0 - lr * v1;
        let v2 = mu * v1 + g2;
        let p2 = p1 - lr * v2;

        let mut opt = Sgd::new(lr, mu, 0.0);
        let mut p = [param(p0, g1)];
        opt.step(&mut p).unwrap();
        assert!((p[0].data()[0] - p1).abs() < 1e-15);
        p[0].set_grad(vec![g2]).unwrap();
        opt.step(&mut p).unwrap();
        assert!((p[0].data()[0] - p2).abs() < 1e-15);
        assert!((opt.velocity()[0][0] - v2).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_usage_error() {
        let mut p = [Tensor::<f64>::zeros(&[2])];
        assert!(matches!(Sgd::new(0.1, 0.0, 0.0).step(&mut p), Err(Error::Usage(_))));
    }
}
