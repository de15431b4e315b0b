//! Flat policy baseline: the interpreter architecture conditioned on the
//! current observation, trained by behavior cloning. It attends over the
//! demonstration at every step and emits the next action (or END) directly,
//! with no graph in between.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{ActionId, Demonstration, EnvState, StepStatus, TaskSpec, World};
use crate::executor::{Rollout, RolloutOutcome, TrajectoryStep, INVALID_LIMIT};
use crate::interpreter::{frames_of, subsample, Seq2Seq};
use crate::nn::{load_checkpoint, save_checkpoint, ModuleParams, NnError, Tape};
use crate::train::{argmax, fit, EpochLog, ModelError, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatConfig {
    pub hidden: usize,
    pub action_embed: usize,
    pub subsample_cap: usize,
    pub train: TrainConfig,
}

impl Default for FlatConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            action_embed: 16,
            subsample_cap: 64,
            train: TrainConfig {
                epochs: 25,
                ..TrainConfig::default()
            },
        }
    }
}

/// Behavior-cloning example: condition on `context`, imitate `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatExample {
    pub context: Vec<Vec<f64>>,
    /// Observation before each target step (the last precedes END).
    pub observations: Vec<Vec<f64>>,
    /// Target actions followed by END.
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatPolicy {
    pub config: FlatConfig,
    pub params: ModuleParams,
    net: Seq2Seq,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    component: String,
    config: FlatConfig,
}

impl FlatPolicy {
    pub fn new(vocab: usize, features: usize, config: FlatConfig, seed: u64) -> Result<Self, ModelError> {
        let mut params = ModuleParams::new(seed);
        let net = Seq2Seq::build(&mut params, vocab, features, config.hidden, config.action_embed, features)?;
        Ok(Self { config, params, net })
    }

    pub fn example(&self, context: &Demonstration, target: &Demonstration) -> Result<FlatExample, ModelError> {
        let acts = target.actions.as_ref().ok_or(ModelError::Unlabeled(target.task_id))?;
        if context.observations.is_empty() || target.observations.len() != acts.len() + 1 {
            return Err(ModelError::EmptyDemo);
        }
        let mut targets: Vec<usize> = acts.iter().map(|a| a.index()).collect();
        targets.push(self.net.end());
        Ok(FlatExample {
            context: subsample(&frames_of(context), self.config.subsample_cap),
            observations: frames_of(target),
            targets,
        })
    }

    pub fn loss(&self, params: &ModuleParams, ex: &FlatExample) -> Result<(f64, Vec<Vec<f64>>), NnError> {
        let net = &self.net;
        let mut tape = Tape::new();
        let s = tape.bind(params);
        let (anns, mut h) = net.encode(&mut tape, s, &ex.context)?;
        let mut ctx = net.initial_context(&mut tape, &ex.context[0]);
        let mut prev = net.bos();
        let mut terms = Vec::with_capacity(ex.targets.len());
        for (&t, o) in ex.targets.iter().zip(&ex.observations) {
            let obs = tape.input(o.clone());
            let (h2, c2, logits) = net.step(&mut tape, s, prev, h, ctx, &anns, Some(obs))?;
            terms.push(tape.softmax_ce(logits, t)?);
            h = h2;
            ctx = c2;
            prev = t;
        }
        let total = tape.add_n(&terms)?;
        Ok((tape.scalar(total), tape.backward(total).into_store(s)))
    }

    pub fn train(&mut self, examples: &[FlatExample], seed: u64) -> Result<Vec<EpochLog>, ModelError> {
        let mut params = self.params.clone();
        let logs = fit("flat_policy", &mut params, &self.config.train, seed, examples, |p, ex| {
            self.loss(p, ex)
        })?;
        self.params = params;
        Ok(logs)
    }

    /// Teacher-forced exact-sequence accuracy.
    pub fn sequence_accuracy(&self, examples: &[FlatExample]) -> Result<f64, ModelError> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let net = &self.net;
        let mut hits = 0;
        for ex in examples {
            let mut tape = Tape::new();
            let s = tape.bind(&self.params);
            let (anns, mut h) = net.encode(&mut tape, s, &ex.context)?;
            let mut ctx = net.initial_context(&mut tape, &ex.context[0]);
            let mut prev = net.bos();
            let mut ok = true;
            for (&t, o) in ex.targets.iter().zip(&ex.observations) {
                let obs = tape.input(o.clone());
                let (h2, c2, logits) = net.step(&mut tape, s, prev, h, ctx, &anns, Some(obs))?;
                ok &= argmax(tape.value(logits)) == Some(t);
                h = h2;
                ctx = c2;
                prev = t;
            }
            hits += usize::from(ok);
        }
        Ok(hits as f64 / examples.len() as f64)
    }

    /// Greedy closed-loop execution conditioned on `demo`. Emitting END stops
    /// the episode.
    pub fn rollout(
        &self,
        demo: &Demonstration,
        world: &World,
        task: &TaskSpec,
        initial: &EnvState,
        max_steps: usize,
    ) -> Result<Rollout, ModelError> {
        if demo.observations.is_empty() {
            return Err(ModelError::EmptyDemo);
        }
        if max_steps == 0 {
            return Err(ModelError::Data("max_steps must be at least 1".into()));
        }
        let net = &self.net;
        let context = subsample(&frames_of(demo), self.config.subsample_cap);
        let mut tape = Tape::new();
        let s = tape.bind(&self.params);
        let (anns, mut h) = net.encode(&mut tape, s, &context)?;
        let mut ctx = net.initial_context(&mut tape, &context[0]);
        let mut prev = net.bos();
        let mut state = initial.clone();
        let mut obs = world.featurize(&state);
        let mut steps = Vec::new();
        let mut invalid = 0;
        let done = |steps, state: EnvState, outcome| {
            Ok(Rollout {
                success: world.check_success(&state, task),
                steps,
                outcome,
                final_state: state,
            })
        };
        if world.check_success(&state, task) {
            return done(steps, state, RolloutOutcome::Goal);
        }
        for _ in 0..max_steps {
            let o = tape.input(obs.features.clone());
            let (h2, c2, logits) = net.step(&mut tape, s, prev, h, ctx, &anns, Some(o))?;
            h = h2;
            ctx = c2;
            let a = argmax(tape.value(logits)).expect("non-empty logits");
            if a == net.end() {
                steps.push(TrajectoryStep {
                    observation: obs.digest(),
                    node: None,
                    action: None,
                    status: None,
                });
                return done(steps, state, RolloutOutcome::Stopped);
            }
            let action = ActionId(a as u32);
            let (next, next_obs, status) = world.step(&state, action, task)?;
            steps.push(TrajectoryStep {
                observation: obs.digest(),
                node: None,
                action: Some(action),
                status: Some(status),
            });
            match status {
                StepStatus::Goal => return done(steps, next, RolloutOutcome::Goal),
                StepStatus::Invalid => {
                    invalid += 1;
                    if invalid >= INVALID_LIMIT {
                        return done(steps, next, RolloutOutcome::InvalidLoop);
                    }
                }
                StepStatus::Ok => invalid = 0,
            }
            prev = a;
            state = next;
            obs = next_obs;
        }
        done(steps, state, RolloutOutcome::Budget)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let meta = serde_json::to_value(Meta {
            component: "flat_policy".into(),
            config: self.config.clone(),
        })
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        save_checkpoint(path, &self.params, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let ck = load_checkpoint(path)?;
        let meta: Meta = serde_json::from_value(ck.meta.clone()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if meta.component != "flat_policy" {
            return Err(ModelError::Checkpoint(format!(
                "expected flat_policy checkpoint, found {}",
                meta.component
            )));
        }
        let params = ck.to_params()?;
        let net = Seq2Seq::attach(&params)?;
        Ok(Self {
            config: meta.config,
            params,
            net,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::CollectionWorld;
    use crate::nn::{gradient_check, scaled, GradCheckOptions};

    fn cfg(epochs: usize) -> FlatConfig {
        FlatConfig {
            hidden: 12,
            action_embed: 6,
            subsample_cap: 64,
            train: TrainConfig {
                epochs,
                batch_size: 2,
                learning_rate: 1e-2,
                clip_norm: Some(5.0),
            },
        }
    }

    fn world() -> World {
        World::Collection(CollectionWorld::with_counts(vec![2]))
    }

    #[test]
    fn gradient_check_over_seeds() {
        let w = world();
        let t = w.generate_tasks(1, 0).unwrap().remove(0);
        let (a, b) = (w.demo(&t, 1).unwrap(), w.demo(&t, 2).unwrap());
        for seed in 0..10 {
            let m = FlatPolicy::new(w.vocab_size(), w.feature_width(), cfg(0), seed).unwrap();
            let ex = m.example(&a, &b).unwrap();
            let err = gradient_check(
                &m.params,
                &GradCheckOptions {
                    seed,
                    ..Default::default()
                },
                |p| {
                    let (l, g) = m.loss(p, &ex)?;
                    Ok(scaled(l, g))
                },
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn overfits_a_single_task() {
        let w = world();
        let t = w.generate_tasks(1, 3).unwrap().remove(0);
        let (a, b) = (w.demo(&t, 1).unwrap(), w.demo(&t, 2).unwrap());
        let mut m = FlatPolicy::new(w.vocab_size(), w.feature_width(), cfg(150), 1).unwrap();
        let ex = m.example(&a, &b).unwrap();
        m.train(std::slice::from_ref(&ex), 0).unwrap();
        assert_eq!(m.sequence_accuracy(&[ex]).unwrap(), 1.0);
        // Acting from the target demo's start replays it.
        let r = m.rollout(&a, &w, &t, &b.initial_state, 40).unwrap();
        assert!(r.success, "{:?}", r.outcome);
    }

    #[test]
    fn checkpoint_round_trip() {
        let w = world();
        let m = FlatPolicy::new(w.vocab_size(), w.feature_width(), cfg(0), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flat.json");
        m.save(&p).unwrap();
        assert_eq!(FlatPolicy::load(&p).unwrap(), m);
    }
}
