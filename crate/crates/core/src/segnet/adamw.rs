use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;

/// AdamW with decoupled weight decay and one learning rate per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    steps: u64,
    skipped: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            steps: 0,
            skipped: 0,
        }
    }

    /// Updates taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates refused because a gradient was non-finite.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Applies one update from the accumulated gradients. Returns false and
    /// leaves every parameter untouched if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr_backbone: f64, lr_rest: f64) -> bool {
        let finite = store
            .iter()
            .all(|p| p.tensor.grad().is_none_or(|g| g.iter().all(|x| x.is_finite())));
        if !finite {
            self.skipped += 1;
            return false;
        }
        if self.m.len() != store.len() {
            self.m = store.iter().map(|p| vec![F::zero(); p.tensor.numel()]).collect();
            self.v = self.m.clone();
        }
        self.steps += 1;
        let t = self.steps as i32;
        let f = F::from_f64_lossy;
        let (b1, b2) = (f(self.beta1), f(self.beta2));
        let bc1 = f(1.0 - self.beta1.powi(t));
        let bc2 = f(1.0 - self.beta2.powi(t));
        let eps = f(self.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let lr = match p.group {
                ParamGroup::Backbone => lr_backbone,
                ParamGroup::Rest => lr_rest,
            };
            let decay = f(1.0 - lr * self.weight_decay);
            let lr = f(lr);
            let (value, grad) = p.tensor.value_and_grad_mut();
            let Some(grad) = grad else { continue };
            for i in 0..value.len() {
                let gi = grad[i];
                m[i] = b1 * m[i] + (F::one() - b1) * gi;
                v[i] = b2 * v[i] + (F::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] = value[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(p: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("p", Tensor::scalar(p), ParamGroup::Rest).unwrap();
        s.get_mut("p").unwrap().grad_mut().unwrap()[0] = g;
        s
    }

    #[test]
    fn first_step_is_lr_sized() {
        let mut s = scalar_store(1.0, 1.0);
        AdamW::new(0.0).step(&mut s, 0.1, 0.1);
        assert!((s.get("p").unwrap().item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn decay_only() {
        let mut s = scalar_store(2.0, 0.0);
        AdamW::new(0.05).step(&mut s, 0.1, 0.1);
        assert!((s.get("p").unwrap().item() - 2.0 * (1.0 - 0.005)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_grad_skips() {
        let mut s = scalar_store(1.0, f64::NAN);
        let mut opt = AdamW::new(0.05);
        assert!(!opt.step(&mut s, 0.1, 0.1));
        assert_eq!((opt.steps(), opt.skipped()), (0, 1));
        assert_eq!(s.get("p").unwrap().item(), 1.0);
    }
}
