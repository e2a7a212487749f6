use serde::{Deserialize, Serialize};

use super::tensor::ParamStore;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            weight_decay: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay: the decay shrinks weights directly and
/// never enters the moment estimates.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Vec<f32>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f32>] {
        &self.second_moment
    }

    /// Applies one update using the gradients stored on each parameter.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<(), NnError> {
        if let Some((_, name, _)) = params.iter().find(|(_, _, t)| t.grad.is_none()) {
            return Err(NnError::MissingGrad(name.to_string()));
        }
        if self.first_moment.is_empty() {
            for (_, _, t) in params.iter() {
                self.first_moment.push(vec![0.0; t.len()]);
                self.second_moment.push(vec![0.0; t.len()]);
            }
        }
        if self.first_moment.len() != params.len() {
            return Err(NnError::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bias1 = 1.0 - (beta1 as f64).powi(self.step as i32);
        let bias2 = 1.0 - (beta2 as f64).powi(self.step as i32);
        let (bias1, bias2) = (bias1 as f32, bias2 as f32);
        let decay = 1.0 - lr * weight_decay;

        for (((_, t), m), v) in params
            .tensors_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let grad = t.grad.as_ref().expect("checked above");
            for i in 0..t.data.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                t.data[i] = t.data[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn single(w: f32, g: f32) -> ParamStore {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(w));
        store.get_mut(id).grad = Some(vec![g]);
        store
    }

    fn opt(lr: f32, weight_decay: f32) -> AdamW {
        AdamW::new(AdamWConfig {
            lr,
            weight_decay,
            ..AdamWConfig::default()
        })
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut store = single(1.5, 0.0);
        opt(0.1, 0.0).step(&mut store).unwrap();
        assert_eq!(store.get(crate::nn::ParamId(0)).data, vec![1.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = single(1.0, 1.0);
        let mut o = opt(0.1, 0.0);
        o.step(&mut store).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((store.get(crate::nn::ParamId(0)).data[0] - expected).abs() < 1e-7);
        assert_eq!(o.steps(), 1);
    }

    #[test]
    fn decay_only_step() {
        let mut store = single(1.0, 0.0);
        opt(0.1, 0.1).step(&mut store).unwrap();
        assert!((store.get(crate::nn::ParamId(0)).data[0] - 0.99).abs() < 1e-7);
    }

    #[test]
    fn missing_grad_is_error() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0));
        assert_eq!(
            opt(0.1, 0.0).step(&mut store),
            Err(NnError::MissingGrad("w".into()))
        );
    }

    #[test]
    fn decay_bypasses_moments() {
        let mut store = single(3.0, 0.0);
        let mut o = opt(0.1, 0.5);
        o.step(&mut store).unwrap();
        assert_eq!(o.first_moment()[0], vec![0.0]);
        assert_eq!(o.second_moment()[0], vec![0.0]);
    }

    #[test]
    fn trajectories_are_bitwise_reproducible() {
        let run = || {
            let mut store = ParamStore::new();
            let id = store.add("w", Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap());
            let mut o = opt(0.05, 0.01);
            let mut trace = Vec::new();
            for step in 0..50 {
                let w = store.get(id).data.clone();
                let grad = w.iter().map(|x| 2.0 * x + (step as f32).sin()).collect();
                store.get_mut(id).grad = Some(grad);
                o.step(&mut store).unwrap();
                trace.push(store.get(id).data.clone());
            }
            trace
        };
        let a = run();
        let b = run();
        let bits = |t: &Vec<Vec<f32>>| t.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
