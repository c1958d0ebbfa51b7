use serde::{Deserialize, Serialize};

use super::{Gradients, Matrix, ParamSet};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: Some(1.0) }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: AdamWConfig,
    step: u64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamSet<T>, config: AdamWConfig) -> Self {
        let zeros: Vec<_> = params.ids().map(|id| {
            let (r, c) = params.get(id).shape();
            Matrix::zeros(r, c)
        }).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`; returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>, lr: f64) -> f64 {
        self.step += 1;
        let norm = grads.global_norm().as_f64();
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let step_size = T::of(lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(self.config.eps);
        let decay = T::of(1.0 - lr * self.config.weight_decay);
        let clip = T::of(clip);
        for id in params.ids().collect::<Vec<_>>() {
            let p = params.get_mut(id);
            if self.config.weight_decay != 0.0 {
                p.scale_assign(decay);
            }
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            for (((pp, &gg), mm), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let gg = gg * clip;
                *mm = b1t * *mm + one_b1 * gg;
                *vv = b2t * *vv + one_b2 * gg * gg;
                *pp -= step_size * *mm / ((*vv).sqrt() / bc2_sqrt + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = ParamSet::<f64>::new();
        let x = params.add("x", Matrix::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = AdamW::new(&params, AdamWConfig { clip_norm: None, ..Default::default() });
        for _ in 0..2000 {
            let grads = {
                let mut g = Graph::new(&params);
                let v = g.param(x);
                let sq = g.mul(v, v);
                let loss = g.sum(sq);
                g.backward(loss)
            };
            opt.update(&mut params, &grads, 0.05);
        }
        assert!(params.get(x).data().iter().all(|v| v.abs() < 1e-3));
    }
}
