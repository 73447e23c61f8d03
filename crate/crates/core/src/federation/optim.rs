use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Adam with bias correction; moments are keyed by parameter name and
/// persist for the lifetime of the client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every `(name, param, grad)`; parameters without
    /// a gradient are left untouched.
    pub fn update<'a>(&mut self, items: impl IntoIterator<Item = (String, &'a mut Tensor, Option<&'a Tensor>)>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p, g) in items {
            let Some(g) = g else { continue };
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(p.rows(), p.cols()), Tensor::zeros(p.rows(), p.cols())));
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }

    /// Moments as `m.<name>` / `v.<name>` tensors.
    pub fn to_param_set(&self, prefix: &str) -> ParamSet {
        ParamSet::from_named(self.moments.iter().flat_map(|(k, (m, v))| {
            [
                (format!("{prefix}m.{k}"), m.clone()),
                (format!("{prefix}v.{k}"), v.clone()),
            ]
        }))
    }

    pub fn restore(&mut self, set: &ParamSet, prefix: &str, step: u64) {
        self.step = step;
        self.moments.clear();
        let mprefix = format!("{prefix}m.");
        for (name, m) in set.iter() {
            if let Some(k) = name.strip_prefix(&mprefix) {
                if let Some(v) = set.get(&format!("{prefix}v.{k}")) {
                    self.moments.insert(k.to_owned(), (m.clone(), v.clone()));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut adam = Adam::new(0.1);
        let mut p = Tensor::from_rows(&[&[1.0, 1.0]]);
        let g = Tensor::from_rows(&[&[2.0, -0.5]]);
        adam.update([("p".to_owned(), &mut p, Some(&g))]);
        assert!((p.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p.get(0, 1) - 1.1).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_leaves_parameter() {
        let mut adam = Adam::new(0.1);
        let mut p = Tensor::scalar(3.0);
        adam.update([("p".to_owned(), &mut p, None)]);
        assert_eq!(p.item(), 3.0);
    }
}
