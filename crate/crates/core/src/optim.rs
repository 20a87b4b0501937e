//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlm::{ModelParams, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One Adam update of `params` in place. Moments are kept in `f64`.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.m.len()
        || state.v.len() != state.m.len()
    {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let g = g.to_f64().unwrap_or(f64::NAN);
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let update = cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        *p = *p - T::lit(update);
    }
    Ok(())
}

/// Adam over every tensor of a model, in checkpoint order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new<T: Real>(params: &ModelParams<T>, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            states: params
                .named_tensors()
                .iter()
                .map(|(_, t)| AdamState::new(t.len()))
                .collect(),
        }
    }

    pub fn step<T: Real>(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &ModelParams<T>,
    ) -> Result<()> {
        params.check_same_shape(grads)?;
        for (((_, p), (_, g)), state) in params
            .named_tensors_mut()
            .into_iter()
            .zip(grads.named_tensors())
            .zip(self.states.iter_mut())
        {
            adam_step(&mut p.data, &g.data, state, &self.cfg)?;
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.first().map_or(0, |s| s.step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![0.5f32, -1.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, [0.5, -1.0]);
        assert_eq!(s.m, [0.0, 0.0]);
        assert_eq!(s.v, [0.0, 0.0]);
    }

    #[test]
    fn first_step_hand_computed() {
        // m̂ = g, v̂ = g², so the update is -lr·g/(|g| + eps)
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = vec![0.0f64];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
        assert!((s.m[0] - 0.1).abs() < 1e-15);
        assert!((s.v[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn second_step_hand_computed() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut p = vec![1.0f64];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[2.0], &mut s, &cfg).unwrap();
        adam_step(&mut p, &[-1.0], &mut s, &cfg).unwrap();
        let m2: f64 = 0.9 * 0.2 - 0.1;
        let v2: f64 = 0.999 * 0.004 + 0.001 * 1.0;
        let u2 = 0.01 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        let expected = 1.0 - 0.01 * 2.0 / (2.0 + 1e-8) - u2;
        assert!((p[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0f32; 3];
        let mut s = AdamState::new(3);
        assert!(adam_step(&mut p, &[1.0, 2.0], &mut s, &AdamConfig::default()).is_err());
    }

    #[test]
    fn deterministic_runs() {
        let run = || {
            let mut p = vec![0.3f32, -0.2, 0.9];
            let mut s = AdamState::new(3);
            for k in 0..50 {
                let g: Vec<f32> = p.iter().map(|x| x * 2.0 + k as f32 * 0.01).collect();
                adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
