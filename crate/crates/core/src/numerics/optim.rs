use std::collections::BTreeMap;

use super::autodiff::Gradients;
use super::tensor::{Real, Tensor};

/// Adam with decoupled weight decay. Decay applies to matrices only.
#[derive(Clone, Debug)]
pub struct AdamW<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, steps: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every named tensor that has a gradient.
    pub fn step<'a, I>(&mut self, params: I, grads: &Gradients<T>)
    where
        I: IntoIterator<Item = (String, &'a mut Tensor<T>)>,
    {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let step_size = T::of(self.lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(self.eps);
        let decay = T::of(1.0 - self.lr * self.weight_decay);
        for (name, p) in params {
            let Some(g) = grads.get(&name) else { continue };
            let (m, v) =
                self.moments.entry(name).or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            let use_decay = p.rank() >= 2 && self.weight_decay != 0.0;
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                if use_decay {
                    *w *= decay;
                }
                *w -= step_size * *mi / ((*vi).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::autodiff::Tape;

    #[test]
    fn minimizes_quadratic() {
        let mut w = Tensor::<f64>::from_rows(&[[3.0, -2.0]]);
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..300 {
            let mut tape = Tape::new();
            let x = tape.param("w", w.clone());
            let l = tape.mean_square(x);
            let g = tape.backward(l).unwrap();
            opt.step([("w".to_string(), &mut w)], &g);
        }
        assert!(w.max_abs() < 1e-2, "{w:?}");
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = Tensor::<f64>::vector(vec![1.0]);
        let mut opt = AdamW::new(1e-3, 0.0);
        let mut tape = Tape::new();
        let x = tape.param("w", w.clone());
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        opt.step([("w".to_string(), &mut w)], &g);
        assert!((w.item() - (1.0 - 1e-3)).abs() < 1e-9);
    }
}
