use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps taken.
    pub t: u64,
    /// First and second moments by parameter name.
    #[serde(skip)]
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, moments: BTreeMap::new() }
    }

    /// Advances the step counter; call once per optimizer step before [`AdamW::update`].
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.raw_dim()), Tensor::zeros(param.raw_dim())));
        let (b1, b2) = (self.beta1, self.beta2);
        m.zip_mut_with(grad, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
        v.zip_mut_with(grad, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (eps, wd) = (self.eps, self.weight_decay);
        ndarray::Zip::from(param).and(&*m).and(&*v).for_each(|p, &m, &v| {
            let step = (m / c1) / ((v / c2).sqrt() + eps);
            *p -= lr * (step + wd * *p);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut opt = AdamW::new(0.0);
        let mut p = array![[1.0, -2.0]];
        opt.tick();
        opt.update("w", &mut p, &array![[0.5, -3.0]], 0.1);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut opt = AdamW::new(0.5);
        let mut p = array![[2.0]];
        opt.tick();
        opt.update("w", &mut p, &array![[0.0]], 0.1);
        // zero gradient leaves only the decay term
        assert!((p[[0, 0]] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = AdamW::new(0.0);
        let mut p = array![[3.0, -4.0]];
        for _ in 0..2000 {
            let g = p.mapv(|x| 2.0 * x);
            opt.tick();
            opt.update("w", &mut p, &g, 0.05);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2), "{p}");
    }
}
