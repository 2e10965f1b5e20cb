//! Minimal differentiable building blocks: layers, parameter traversal and
//! the Adam optimizer.

mod layers;

pub use layers::{flatten, relu_backward_inplace, relu_inplace, unflatten, Conv1d, Linear};

use serde::{Deserialize, Serialize};

/// Uniform access to the trainable tensors of a module.
///
/// `tensors` and `tensors_mut` must enumerate the same tensors in the same
/// order; optimizers and gradient checks rely on it.
pub trait Parameters {
    /// `(name, shape, values)` for every tensor.
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])>;

    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }
}

pub(crate) fn prefixed<'a>(
    prefix: &str,
    tensors: Vec<(String, Vec<usize>, &'a [f64])>,
) -> impl Iterator<Item = (String, Vec<usize>, &'a [f64])> + 'a {
    let prefix = prefix.to_string();
    tensors
        .into_iter()
        .map(move |(n, s, v)| (format!("{prefix}.{n}"), s, v))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: Parameters + ?Sized>(config: AdamConfig, params: &P) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|(_, _, v)| v.len()).collect();
        Self {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<P: Parameters + ?Sized, G: Parameters + ?Sized>(&mut self, params: &mut P, grads: &G) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let grads = grads.tensors();
        let params = params.tensors_mut();
        assert_eq!(params.len(), grads.len(), "parameter/gradient structure mismatch");
        for (((p, (_, _, g)), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        x: Vec<f64>,
    }

    impl Parameters for Quadratic {
        fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
            vec![("x".into(), vec![self.x.len()], &self.x)]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.x]
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Quadratic { x: vec![1.0, -2.0] };
        let g = Quadratic { x: vec![0.5, -3.0] };
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &g);
        // bias correction makes the first update lr * sign(g)
        assert!((p.x[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p.x[1] - (-2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Quadratic { x: vec![3.0, -4.0] };
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            &p,
        );
        for _ in 0..2000 {
            let g = Quadratic {
                x: p.x.iter().map(|v| 2.0 * v).collect(),
            };
            adam.step(&mut p, &g);
        }
        assert!(p.x.iter().all(|v| v.abs() < 1e-2), "{:?}", p.x);
    }
}
