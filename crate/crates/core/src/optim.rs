//! Adam optimizer over array-shaped parameters.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            step_size: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub params: AdamParams,
    pub first_moment: Array2<f64>,
    pub second_moment: Array2<f64>,
    pub iteration: usize,
}

impl OptimizerState {
    pub fn new(params: AdamParams, shape: (usize, usize)) -> Self {
        Self {
            params,
            first_moment: Array2::zeros(shape),
            second_moment: Array2::zeros(shape),
            iteration: 0,
        }
    }

    /// One bias-corrected descent step on `x` given `grad`.
    pub fn step(&mut self, x: &mut Array2<f64>, grad: &Array2<f64>) {
        let AdamParams {
            step_size,
            beta1,
            beta2,
            epsilon,
        } = self.params;
        self.iteration += 1;
        let t = self.iteration as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        Zip::from(x)
            .and(grad)
            .and(&mut self.first_moment)
            .and(&mut self.second_moment)
            .for_each(|x, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *x -= step_size * (*m / c1) / ((*v / c2).sqrt() + epsilon);
            });
    }
}
