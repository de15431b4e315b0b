//! Demo interpreter: observation frames → executed action sequence.
//!
//! A GRU encodes the frames. Each frame contributes an annotation
//! `[h_t, o_t, o_{t+1}]` (the last frame pairs with zeros). A GRU decoder
//! attends over the annotations with a bilinear score
//! `ann_t · W_a [h_dec, ctx_prev]` and emits one action (or END) per step.
//! The initial context is `[0, 0, o_1]`, so attention can chain from one
//! transition to the next by matching `o_{t+1}` of the previous context
//! against `o_t` of the candidates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{ActionId, Demonstration};
use crate::nn::{load_checkpoint, save_checkpoint, GruCell, Linear, ModuleParams, NnError, ParamId, StoreId, Tape, Var};
use crate::train::{argmax, fit, EpochLog, ModelError, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpreterConfig {
    pub hidden: usize,
    pub action_embed: usize,
    /// Longer demos are uniformly subsampled to this many frames.
    pub subsample_cap: usize,
    pub train: TrainConfig,
}

impl Default for InterpreterConfig {
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

/// Handles into an interpreter parameter store.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Seq2Seq {
    pub vocab: usize,
    pub features: usize,
    pub hidden: usize,
    pub enc: GruCell,
    pub dec: GruCell,
    pub att: ParamId,
    pub emb: ParamId,
    pub out: Linear,
}

impl Seq2Seq {
    pub fn annotation_width(hidden: usize, features: usize) -> usize {
        hidden + 2 * features
    }

    /// `extra` widens the decoder input (the flat policy feeds the current
    /// observation there).
    pub fn build(
        params: &mut ModuleParams,
        vocab: usize,
        features: usize,
        hidden: usize,
        embed: usize,
        extra: usize,
    ) -> Result<Self, NnError> {
        let ann = Self::annotation_width(hidden, features);
        let enc = GruCell::new(params, "enc", features, hidden)?;
        let dec = GruCell::new(params, "dec", embed + ann + extra, hidden)?;
        let att = params.add_weight("att", ann, hidden + ann + extra)?;
        // Rows: actions, END, BOS.
        let emb = params.add_weight("emb", vocab + 2, embed)?;
        let out = Linear::new(params, "out", hidden + ann, vocab + 1, true)?;
        Ok(Self {
            vocab,
            features,
            hidden,
            enc,
            dec,
            att,
            emb,
            out,
        })
    }

    pub fn attach(params: &ModuleParams) -> Result<Self, NnError> {
        let enc = GruCell::attach(params, "enc")?;
        let out = Linear::attach(params, "out", true)?;
        Ok(Self {
            vocab: out.out_dim - 1,
            features: enc.input,
            hidden: enc.hidden,
            dec: GruCell::attach(params, "dec")?,
            att: params.id("att")?,
            emb: params.id("emb")?,
            out,
            enc,
        })
    }

    pub fn end(&self) -> usize {
        self.vocab
    }

    pub fn bos(&self) -> usize {
        self.vocab + 1
    }

    /// Runs the encoder; returns annotations and the final hidden state.
    pub fn encode(&self, tape: &mut Tape<'_>, s: StoreId, frames: &[Vec<f64>]) -> Result<(Vec<Var>, Var), NnError> {
        let mut h = tape.input(vec![0.0; self.hidden]);
        let xs: Vec<Var> = frames.iter().map(|f| tape.input(f.clone())).collect();
        let mut hs = Vec::with_capacity(frames.len());
        for &x in &xs {
            h = self.enc.step(tape, s, x, h)?;
            hs.push(h);
        }
        let zeros = tape.input(vec![0.0; self.features]);
        let anns = (0..xs.len())
            .map(|t| {
                let next = xs.get(t + 1).copied().unwrap_or(zeros);
                tape.concat(&[hs[t], xs[t], next])
            })
            .collect();
        Ok((anns, h))
    }

    /// Context pointing at the first transition: `[0, 0, o_1]`.
    pub fn initial_context(&self, tape: &mut Tape<'_>, first: &[f64]) -> Var {
        let mut v = vec![0.0; self.hidden + self.features];
        v.extend_from_slice(first);
        tape.input(v)
    }

    /// One decoder step; returns `(hidden, context, logits)`.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        tape: &mut Tape<'_>,
        s: StoreId,
        prev: usize,
        h: Var,
        ctx: Var,
        anns: &[Var],
        extra: Option<Var>,
    ) -> Result<(Var, Var, Var), NnError> {
        let e = tape.row(s, self.emb, prev)?;
        let x = match extra {
            Some(o) => tape.concat(&[e, ctx, o]),
            None => tape.concat(&[e, ctx]),
        };
        let h = self.dec.step(tape, s, x, h)?;
        let q = match extra {
            Some(o) => tape.concat(&[h, ctx, o]),
            None => tape.concat(&[h, ctx]),
        };
        let key = tape.matvec(s, self.att, q)?;
        let scores = anns.iter().map(|a| tape.dot(*a, key)).collect::<Result<Vec<_>, _>>()?;
        let scores = tape.concat(&scores);
        let alpha = tape.softmax(scores);
        let ctx = tape.mix(alpha, anns)?;
        let hc = tape.concat(&[h, ctx]);
        let logits = self.out.forward(tape, s, hc)?;
        Ok((h, ctx, logits))
    }
}

/// Uniformly subsamples to at most `cap` frames, keeping first and last.
pub fn subsample(frames: &[Vec<f64>], cap: usize) -> Vec<Vec<f64>> {
    let n = frames.len();
    if n <= cap || cap < 2 {
        return frames.to_vec();
    }
    (0..cap)
        .map(|i| {
            let idx = (i as f64 * (n - 1) as f64 / (cap - 1) as f64).round() as usize;
            frames[idx].clone()
        })
        .collect()
}

pub fn frames_of(demo: &Demonstration) -> Vec<Vec<f64>> {
    demo.observations.iter().map(|o| o.features.clone()).collect()
}

/// A decoded demonstration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interpretation {
    pub actions: Vec<ActionId>,
    /// Decoding hit the length cap before emitting END.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpreterParams {
    pub config: InterpreterConfig,
    pub params: ModuleParams,
    net: Seq2Seq,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    component: String,
    config: InterpreterConfig,
}

impl InterpreterParams {
    pub fn new(vocab: usize, features: usize, config: InterpreterConfig, seed: u64) -> Result<Self, ModelError> {
        let mut params = ModuleParams::new(seed);
        let net = Seq2Seq::build(&mut params, vocab, features, config.hidden, config.action_embed, 0)?;
        Ok(Self { config, params, net })
    }

    pub fn vocab(&self) -> usize {
        self.net.vocab
    }

    pub fn end_symbol(&self) -> usize {
        self.net.end()
    }

    /// Teacher-forced summed cross entropy over `targets` (which end with END).
    pub fn sequence_loss(&self, params: &ModuleParams, frames: &[Vec<f64>], targets: &[usize]) -> Result<(f64, Vec<Vec<f64>>), NnError> {
        let frames = subsample(frames, self.config.subsample_cap);
        let net = &self.net;
        let mut tape = Tape::new();
        let s = tape.bind(params);
        let (anns, mut h) = net.encode(&mut tape, s, &frames)?;
        let mut ctx = net.initial_context(&mut tape, &frames[0]);
        let mut prev = net.bos();
        let mut losses = Vec::with_capacity(targets.len());
        for &t in targets {
            let (h2, c2, logits) = net.step(&mut tape, s, prev, h, ctx, &anns, None)?;
            losses.push(tape.softmax_ce(logits, t)?);
            h = h2;
            ctx = c2;
            prev = t;
        }
        let total = tape.add_n(&losses)?;
        Ok((tape.scalar(total), tape.backward(total).into_store(s)))
    }

    pub(crate) fn targets(&self, demo: &Demonstration) -> Result<Vec<usize>, ModelError> {
        let acts = demo.actions.as_ref().ok_or(ModelError::Unlabeled(demo.task_id))?;
        if demo.observations.is_empty() {
            return Err(ModelError::EmptyDemo);
        }
        let mut t: Vec<usize> = acts.iter().map(|a| a.index()).collect();
        if let Some(bad) = t.iter().find(|&&a| a >= self.vocab()) {
            return Err(ModelError::Data(format!("action {bad} outside vocabulary")));
        }
        t.push(self.end_symbol());
        Ok(t)
    }

    /// Trains on labeled demonstrations of seen tasks.
    pub fn train(&mut self, demos: &[Demonstration], seed: u64) -> Result<Vec<EpochLog>, ModelError> {
        let examples = demos
            .iter()
            .map(|d| Ok((frames_of(d), self.targets(d)?)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        let mut params = self.params.clone();
        let logs = fit("interpreter", &mut params, &self.config.train, seed, &examples, |p, (f, t)| {
            self.sequence_loss(p, f, t)
        })?;
        self.params = params;
        Ok(logs)
    }

    /// Greedy decoding, capped at twice the number of frames.
    pub fn interpret(&self, demo: &Demonstration) -> Result<Interpretation, ModelError> {
        if demo.observations.is_empty() {
            return Err(ModelError::EmptyDemo);
        }
        let frames = subsample(&frames_of(demo), self.config.subsample_cap);
        let cap = 2 * demo.observations.len();
        let net = &self.net;
        let mut tape = Tape::new();
        let s = tape.bind(&self.params);
        let (anns, mut h) = net.encode(&mut tape, s, &frames)?;
        let mut ctx = net.initial_context(&mut tape, &frames[0]);
        let mut prev = net.bos();
        let mut actions = Vec::new();
        while actions.len() < cap {
            let (h2, c2, logits) = net.step(&mut tape, s, prev, h, ctx, &anns, None)?;
            let a = argmax(tape.value(logits)).expect("non-empty logits");
            if a == net.end() {
                return Ok(Interpretation { actions, truncated: false });
            }
            actions.push(ActionId(a as u32));
            h = h2;
            ctx = c2;
            prev = a;
        }
        log::warn!("interpretation of task {} truncated at {cap} actions", demo.task_id);
        Ok(Interpretation { actions, truncated: true })
    }

    /// Fraction of demos whose decoded sequence equals the recorded one.
    pub fn sequence_accuracy(&self, demos: &[Demonstration]) -> Result<f64, ModelError> {
        if demos.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0;
        for d in demos {
            let want = d.actions.as_ref().ok_or(ModelError::Unlabeled(d.task_id))?;
            if &self.interpret(d)?.actions == want {
                hits += 1;
            }
        }
        Ok(hits as f64 / demos.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let meta = serde_json::to_value(Meta {
            component: "interpreter".into(),
            config: self.config.clone(),
        })
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        save_checkpoint(path, &self.params, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let ck = load_checkpoint(path)?;
        let meta: Meta = serde_json::from_value(ck.meta.clone()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if meta.component != "interpreter" {
            return Err(ModelError::Checkpoint(format!(
                "expected interpreter checkpoint, found {}",
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
    use crate::env::{StackingWorld, World};
    use crate::nn::{gradient_check, scaled, GradCheckOptions};

    fn small_cfg(epochs: usize) -> InterpreterConfig {
        InterpreterConfig {
            hidden: 12,
            action_embed: 6,
            subsample_cap: 64,
            train: TrainConfig {
                epochs,
                batch_size: 4,
                learning_rate: 1e-2,
                clip_norm: Some(5.0),
            },
        }
    }

    fn demos(n: usize, seed: u64) -> (World, Vec<Demonstration>) {
        let w = World::Stacking(StackingWorld::new(3));
        let tasks = w.generate_tasks(n, seed).unwrap();
        let d = tasks.iter().map(|t| w.demo(t, t.id).unwrap()).collect();
        (w, d)
    }

    #[test]
    fn subsample_keeps_ends() {
        let frames: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let s = subsample(&frames, 4);
        assert_eq!(s.len(), 4);
        assert_eq!(s[0], vec![0.0]);
        assert_eq!(s[3], vec![9.0]);
        assert_eq!(subsample(&frames, 20).len(), 10);
    }

    #[test]
    fn gradient_check_over_seeds() {
        let (w, ds) = demos(6, 0);
        for seed in 0..10u64 {
            let m = InterpreterParams::new(w.vocab_size(), w.feature_width(), small_cfg(1), seed).unwrap();
            let d = ds.iter().find(|d| d.actions.as_ref().unwrap().len() >= 2).unwrap();
            let t = m.targets(d).unwrap();
            let f = frames_of(d);
            let err = gradient_check(
                &m.params,
                &GradCheckOptions {
                    seed,
                    ..Default::default()
                },
                |p| {
                    let (l, g) = m.sequence_loss(p, &f, &t)?;
                    Ok(scaled(l, g))
                },
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn memorizes_a_single_demo() {
        let (w, ds) = demos(13, 1);
        let d = ds.iter().max_by_key(|d| d.actions.as_ref().unwrap().len()).unwrap().clone();
        let mut m = InterpreterParams::new(w.vocab_size(), w.feature_width(), small_cfg(150), 3).unwrap();
        m.train(std::slice::from_ref(&d), 0).unwrap();
        assert_eq!(m.sequence_accuracy(&[d]).unwrap(), 1.0);
    }

    #[test]
    fn training_is_deterministic_and_unlabeled_rejected() {
        let (w, ds) = demos(5, 2);
        let mut a = InterpreterParams::new(w.vocab_size(), w.feature_width(), small_cfg(2), 4).unwrap();
        let mut b = a.clone();
        a.train(&ds, 9).unwrap();
        b.train(&ds, 9).unwrap();
        assert_eq!(a.params, b.params);
        let err = a.train(&[ds[0].without_labels()], 0).unwrap_err();
        assert!(matches!(err, ModelError::Unlabeled(_)));
    }

    #[test]
    fn untrained_decoding_is_capped() {
        let (w, ds) = demos(3, 3);
        let m = InterpreterParams::new(w.vocab_size(), w.feature_width(), small_cfg(0), 5).unwrap();
        let r = m.interpret(&ds[0]).unwrap();
        assert!(r.actions.len() <= 2 * ds[0].observations.len());
        assert!(r.actions.iter().all(|a| a.index() < w.vocab_size()));
        if r.truncated {
            assert_eq!(r.actions.len(), 2 * ds[0].observations.len());
        }
        let mut empty = ds[0].clone();
        empty.observations.clear();
        assert!(matches!(m.interpret(&empty), Err(ModelError::EmptyDemo)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (w, ds) = demos(2, 4);
        let m = InterpreterParams::new(w.vocab_size(), w.feature_width(), small_cfg(0), 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("interp.json");
        m.save(&path).unwrap();
        let back = InterpreterParams::load(&path).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.interpret(&ds[0]).unwrap(), m.interpret(&ds[0]).unwrap());
    }
}
