use serde::{Deserialize, Serialize};

use super::{FieldParams, Real};
use crate::{Error, Result};

/// Adam hyperparameters with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Also decay biases (weights only by default).
    pub decay_biases: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0013,
            weight_decay: 0.012,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_biases: false,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}.{k}");
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(key("learning_rate"), "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(key("weight_decay"), "must be non-negative"));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key(k), "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(key("eps"), "must be positive"));
        }
        Ok(())
    }
}

/// Moment accumulators, one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<T: Real>(params: &mut FieldParams<T>, grads: &[T], state: &mut AdamState<T>) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite { what: "gradient", index });
    }
    let c = &state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
    let step_size = T::from_f64(c.learning_rate / bc1);
    let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
    let eps = T::from_f64(c.eps);
    let decay = T::from_f64(c.learning_rate * c.weight_decay);
    let mask = params.weight_mask();
    let decay_biases = c.decay_biases;
    for (k, theta) in params.data_mut().iter_mut().enumerate() {
        let g = grads[k];
        let m = b1 * state.m[k] + one_b1 * g;
        let v = b2 * state.v[k] + one_b2 * g * g;
        state.m[k] = m;
        state.v[k] = v;
        if mask[k] || decay_biases {
            *theta -= decay * *theta;
        }
        *theta -= step_size * m / (v.sqrt() * inv_sqrt_bc2 + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlpfield::{EmbeddingConfig, NetworkConfig};

    fn tiny() -> FieldParams<f64> {
        let net = NetworkConfig {
            hidden_layers: 2,
            width: 4,
            skip_layer: None,
            output_init_scale: 1.0,
        };
        let emb = EmbeddingConfig {
            frequencies: 1,
            ..Default::default()
        };
        let n = FieldParams::<f64>::zeros(emb.clone(), net.clone()).len();
        FieldParams::from_parts(emb, net, (0..n).map(|i| 0.01 * i as f64 - 0.3).collect()).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = tiny();
        let before = p.clone();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = AdamState::new(cfg, p.len());
        adam_step(&mut p, &vec![0.0; before.len()], &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = tiny();
        let before = p.clone();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = AdamState::new(cfg, p.len());
        let grads: Vec<f64> = (0..p.len()).map(|i| if i % 2 == 0 { 3.7 } else { -1e-3 }).collect();
        adam_step(&mut p, &grads, &mut s).unwrap();
        for k in 0..p.len() {
            let delta = p.data()[k] - before.data()[k];
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
            let expect = -0.0013 * grads[k] / (grads[k].abs() + 1e-8);
            assert!((delta - expect).abs() < 1e-15, "{k}: {delta} vs {expect}");
        }
    }

    #[test]
    fn decay_applies_to_weights_only_by_default() {
        let mut p = tiny();
        let before = p.clone();
        let mut s = AdamState::new(AdamConfig::default(), p.len());
        adam_step(&mut p, &vec![0.0; before.len()], &mut s).unwrap();
        let mask = p.weight_mask();
        for k in 0..p.len() {
            let expect = if mask[k] { before.data()[k] * (1.0 - 0.0013 * 0.012) } else { before.data()[k] };
            assert!((p.data()[k] - expect).abs() < 1e-15);
        }
        let mut q = before.clone();
        let mut s = AdamState::new(
            AdamConfig {
                decay_biases: true,
                ..Default::default()
            },
            q.len(),
        );
        adam_step(&mut q, &vec![0.0; before.len()], &mut s).unwrap();
        for k in 0..q.len() {
            assert!((q.data()[k] - before.data()[k] * (1.0 - 0.0013 * 0.012)).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = tiny();
        let mut s = AdamState::new(AdamConfig::default(), p.len());
        let mut g = vec![0.0; p.len()];
        g[2] = f64::NAN;
        assert!(matches!(adam_step(&mut p, &g, &mut s), Err(Error::NonFinite { index: 2, .. })));
        assert!(matches!(adam_step(&mut p, &[0.0], &mut s), Err(Error::Shape(_))));
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = tiny();
        let mut s = AdamState::new(
            AdamConfig {
                learning_rate: 0.05,
                weight_decay: 0.0,
                ..Default::default()
            },
            p.len(),
        );
        for _ in 0..2000 {
            let g: Vec<f64> = p.data().iter().map(|x| 2.0 * (x - 0.5)).collect();
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        assert!(p.data().iter().all(|x| (x - 0.5).abs() < 1e-3));
    }
}
