use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Real;

/// Bias-corrected Adam with per-entry freezing.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    /// Moment buffers sized after `sizes`, one per parameter tensor.
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            step: 0,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One in-place update of every parameter.
    ///
    /// `frozen[p]`, when given, marks entries of parameter `p` that must not
    /// move; their moments are held at zero so they cannot drift back.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], frozen: &[Option<&[bool]>], lr: T) {
        assert_eq!(params.len(), self.first.len(), "parameter count changed");
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        for (p, value) in params.iter_mut().enumerate() {
            let grad = grads[p];
            let mask = frozen.get(p).copied().flatten();
            let (m, v) = (&mut self.first[p], &mut self.second[p]);
            assert_eq!(value.len(), m.len(), "parameter {p} changed size");
            for i in 0..value.len() {
                if mask.is_some_and(|f| f[i]) {
                    m[i] = T::zero();
                    v[i] = T::zero();
                    continue;
                }
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
