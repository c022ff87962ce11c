use super::{Element, Tensor};
use crate::error::{Error, Result};

/// SGD with momentum and L2 weight decay.
///
/// Per parameter: `v ← momentum·v + grad + weight_decay·param`,
/// `param ← param − lr·v`. Velocity buffers are allocated on first use and
/// grads are cleared after each step.
#[derive(Clone, Debug)]
pub struct Sgd<T: Element = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self, i: usize) -> Option<&[T]> {
        self.velocity.get(i).and_then(|v| v.as_deref())
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], lr: f64) -> Result<()> {
        self.step_named(params, lr, |i| format!("#{i}"))
    }

    /// As [`Sgd::step`], naming a parameter in the missing-grad error.
    pub fn step_named(
        &mut self,
        params: &mut [Tensor<T>],
        lr: f64,
        name: impl Fn(usize) -> String,
    ) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::MissingGrad(name(i)));
        }
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for (p, slot) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let g = p.take_grad().expect("checked above");
            let v = slot.get_or_insert_with(|| vec![T::zero(); g.len()]);
            for ((w, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + gi + wd * *w;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::scalar(v).with_requires_grad(true);
        t.set_grad(vec![g]).unwrap();
        t
    }

    #[test]
    fn plain_gradient_step() {
        let mut ps = vec![param(1.0, 1.0)];
        Sgd::new(0.0, 0.0).step(&mut ps, 0.1).unwrap();
        assert!((ps[0].data()[0] - 0.9).abs() < 1e-15);
        assert!(ps[0].grad().is_none());
    }

    #[test]
    fn momentum_recurrence() {
        let mut opt = Sgd::new(0.9, 0.0);
        let mut ps = vec![param(0.0, 1.0)];
        opt.step(&mut ps, 0.1).unwrap();
        assert!((ps[0].data()[0] + 0.1).abs() < 1e-15);
        ps[0].set_grad(vec![1.0]).unwrap();
        opt.step(&mut ps, 0.1).unwrap();
        assert!((opt.velocity(0).unwrap()[0] - 1.9).abs() < 1e-15);
        assert!((ps[0].data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_only() {
        let mut ps = vec![param(1.0, 0.0)];
        Sgd::new(0.0, 0.0005).step(&mut ps, 0.1).unwrap();
        assert!((ps[0].data()[0] - 0.99995).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut ps = vec![param(1.0, 1.0), Tensor::scalar(2.0)];
        let err = Sgd::new(0.9, 0.0).step(&mut ps, 0.1).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "#1"));
        // nothing moved
        assert_eq!(ps[0].data()[0], 1.0);
    }
}
