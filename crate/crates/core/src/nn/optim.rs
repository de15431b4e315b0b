use serde::{Deserialize, Serialize};

use super::{ModuleParams, NnError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum UpdateRule {
    /// Plain gradient descent.
    Sgd,
    /// Adaptive moments with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub rule: UpdateRule,
    /// Rescale the full gradient when its L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            rule: UpdateRule::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            rule: UpdateRule::Sgd,
            clip_norm: None,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Moment accumulators for one [`ModuleParams`].
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step_count: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ModuleParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step_count: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ModuleParams) -> Result<(), NnError> {
        for t in params.tensors() {
            if t.grad.iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFiniteGradient(t.name.clone()));
            }
        }
        let scale = match self.config.clip_norm {
            Some(max) => {
                let n = params.grad_norm();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step_count += 1;
        let lr = self.config.learning_rate;
        match self.config.rule {
            UpdateRule::Sgd => {
                for t in params.tensors_mut() {
                    for (v, g) in t.values.iter_mut().zip(&t.grad) {
                        *v -= lr * scale * g;
                    }
                }
            }
            UpdateRule::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.step_count as i32);
                let c2 = 1.0 - beta2.powi(self.step_count as i32);
                for ((t, m), s) in params.tensors_mut().iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    for k in 0..t.values.len() {
                        let g = t.grad[k] * scale;
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                        s[k] = beta2 * s[k] + (1.0 - beta2) * g * g;
                        let mh = m[k] / c1;
                        let sh = s[k] / c2;
                        t.values[k] -= lr * mh / (sh.sqrt() + eps);
                    }
                }
            }
        }
        params.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_on_square() {
        let mut p = ModuleParams::new(0);
        let w = p.add_tensor("w", vec![1], vec![1.0]).unwrap();
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1), &p);
        let v = p.get(w).values[0];
        p.get_mut(w).grad[0] = 2.0 * v;
        opt.step(&mut p).unwrap();
        assert!((p.get(w).values[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.get(w).grad[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = ModuleParams::new(5);
        p.add_weight("w", 3, 3).unwrap();
        let before = p.clone();
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &p);
        opt.step(&mut p).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = ModuleParams::new(0);
        p.add_tensor("w", vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        let g = [0.5, -2.0, 1e-3];
        p.tensors_mut()[0].grad = g.to_vec();
        let cfg = OptimizerConfig::adam(0.01);
        let mut opt = OptimizerState::new(cfg, &p);
        opt.step(&mut p).unwrap();
        for (k, gk) in g.iter().enumerate() {
            // m_hat = g, v_hat = g^2 on the first step
            let expect = 1.0 - 0.01 * gk / (gk.abs() + 1e-8);
            assert!((p.tensors()[0].values[k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = ModuleParams::new(0);
        p.add_bias("enc.b", 2).unwrap();
        p.tensors_mut()[0].grad[1] = f64::NAN;
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &p);
        assert_eq!(opt.step(&mut p), Err(NnError::NonFiniteGradient("enc.b".into())));
    }
}
