//! Mini-batch training loop shared by every learned component.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctg::GraphError;
use crate::nn::{ModuleParams, NnError, OptimizerConfig, OptimizerState};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error("{component} diverged: non-finite loss in epoch {epoch}")]
    Diverged { component: String, epoch: usize },
    #[error("demonstration of task {0} has no action labels")]
    Unlabeled(u64),
    #[error("empty demonstration")]
    EmptyDemo,
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 3e-3,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub component: String,
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Adam over shuffled mini-batches; gradients are averaged within a batch.
pub fn fit<E, F>(
    component: &str,
    params: &mut ModuleParams,
    cfg: &TrainConfig,
    seed: u64,
    examples: &[E],
    loss: F,
) -> Result<Vec<EpochLog>, ModelError>
where
    F: Fn(&ModuleParams, &E) -> Result<(f64, Vec<Vec<f64>>), NnError>,
{
    fit_with_hook(component, params, cfg, seed, examples, loss, |_, _| {})
}

/// [`fit`] with a callback after every epoch (for extra metrics).
pub fn fit_with_hook<E, F, H>(
    component: &str,
    params: &mut ModuleParams,
    cfg: &TrainConfig,
    seed: u64,
    examples: &[E],
    loss: F,
    mut on_epoch: H,
) -> Result<Vec<EpochLog>, ModelError>
where
    F: Fn(&ModuleParams, &E) -> Result<(f64, Vec<Vec<f64>>), NnError>,
    H: FnMut(&EpochLog, &ModuleParams),
{
    if examples.is_empty() {
        return Err(ModelError::Data(format!("{component}: no training examples")));
    }
    let mut opt = OptimizerState::new(
        OptimizerConfig {
            clip_norm: cfg.clip_norm,
            ..OptimizerConfig::adam(cfg.learning_rate)
        },
        params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            params.zero_grad();
            for &i in batch {
                let (l, g) = loss(params, &examples[i])?;
                if !l.is_finite() {
                    return Err(ModelError::Diverged {
                        component: component.to_string(),
                        epoch,
                    });
                }
                total += l;
                params.accumulate(&g);
            }
            params.scale_grad(1.0 / batch.len() as f64);
            opt.step(params).map_err(|e| match e {
                NnError::NonFiniteGradient(_) => ModelError::Diverged {
                    component: component.to_string(),
                    epoch,
                },
                other => other.into(),
            })?;
        }
        let mean_loss = total / examples.len() as f64;
        log::debug!("{component} epoch {epoch}: loss {mean_loss:.5}");
        let entry = EpochLog {
            component: component.to_string(),
            epoch,
            mean_loss,
        };
        on_epoch(&entry, params);
        logs.push(entry);
    }
    Ok(logs)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tape;

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn fit_reduces_quadratic_loss() {
        let mut p = ModuleParams::new(0);
        let w = p.add_tensor("w", vec![2], vec![1.0, -1.0]).unwrap();
        let targets = vec![[0.5, 0.25], [0.5, 0.25]];
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 2,
            learning_rate: 0.05,
            clip_norm: None,
        };
        let logs = fit("quad", &mut p, &cfg, 0, &targets, |p, t| {
            let mut tape = Tape::new();
            let s = tape.bind(p);
            let x = tape.param(s, w);
            let y = tape.input(t.to_vec());
            let d = tape.sub(x, y)?;
            let sq = tape.mul(d, d)?;
            let l = tape.sum(sq);
            Ok((tape.scalar(l), tape.backward(l).into_store(s)))
        })
        .unwrap();
        assert!(logs.last().unwrap().mean_loss < 1e-3);
        assert!(logs[0].mean_loss > logs[2].mean_loss);
    }

    #[test]
    fn divergence_is_reported() {
        let mut p = ModuleParams::new(0);
        p.add_tensor("w", vec![1], vec![1.0]).unwrap();
        let r = fit("boom", &mut p, &TrainConfig::default(), 0, &[()], |_, _| {
            Ok((f64::NAN, vec![vec![0.0]]))
        });
        assert!(matches!(r, Err(ModelError::Diverged { ref component, epoch: 0 }) if component == "boom"));
    }
}
