use serde::{Deserialize, Serialize};

use crate::model::Transformer;
use crate::tensor::{Gradients, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &[Tensor<F>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![F::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![F::zero(); p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, block: usize) -> (&[F], &[F]) {
        (&self.m[block], &self.v[block])
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let grads = grads.blocks_mut();
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One bias-corrected Adam update at learning rate `lr`.
///
/// Gradients are checked for finiteness before anything is mutated.
pub fn adam_step<F: Scalar>(
    model: &mut Transformer<F>,
    grads: &Gradients<F>,
    state: &mut AdamState<F>,
    config: &AdamConfig,
    lr: f64,
) -> Result<()> {
    for (i, name) in model.names().iter().enumerate() {
        match grads.get(i) {
            Some(g) if g.shape() != model.params()[i].shape() => {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: model.params()[i].shape().to_vec(),
                    rhs: g.shape().to_vec(),
                })
            }
            Some(g) if !g.all_finite() => return Err(Error::NonFiniteGradient(name.clone())),
            _ => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = F::lit(1.0 - b1.powi(t));
    let bc2 = F::lit(1.0 - b2.powi(t));
    let (b1, b2) = (F::lit(b1), F::lit(b2));
    let (lr, eps, wd) = (F::lit(lr), F::lit(config.epsilon), F::lit(config.weight_decay));
    let one = F::one();
    model.for_each_block(grads, |i, _, p, g| {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, (w, &gr)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gr = gr + wd * *w;
            m[k] = b1 * m[k] + (one - b1) * gr;
            v[k] = b2 * v[k] + (one - b2) * gr * gr;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    });
    Ok(())
}
