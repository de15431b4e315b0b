use std::fmt::Write as _;
use std::path::Path;

use super::{demo_path, Dataset, ExperimentConfig, HarnessError};
use crate::ctg::ConjugateTaskGraph;
use crate::executor::{ExecutorExample, ExecutorParams};
use crate::flat::FlatPolicy;
use crate::gcn::{GcnParams, GcnTrainingPair};
use crate::interpreter::InterpreterParams;
use crate::train::EpochLog;

/// Every learned component of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModels {
    pub interpreter: InterpreterParams,
    pub gcn: GcnParams,
    pub executor: ExecutorParams,
    /// Executor of the no-graph variant: edge supervision over a fully
    /// connected graph of each demo's own nodes.
    pub no_graph: Option<ExecutorParams>,
    pub flat: Option<FlatPolicy>,
    pub curves: Vec<EpochLog>,
}

const FILES: [&str; 3] = ["interpreter.json", "gcn.json", "executor.json"];

impl TrainedModels {
    pub fn save(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        self.interpreter.save(&dir.join(FILES[0]))?;
        self.gcn.save(&dir.join(FILES[1]))?;
        self.executor.save(&dir.join(FILES[2]))?;
        if let Some(e) = &self.no_graph {
            e.save(&dir.join("executor_no_graph.json"))?;
        }
        if let Some(f) = &self.flat {
            f.save(&dir.join("flat_policy.json"))?;
        }
        super::write_file(&dir.join("curves.csv"), &curves_csv(&self.curves))
    }

    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let missing: Vec<_> = FILES.iter().map(|f| dir.join(f)).filter(|p| !p.exists()).collect();
        if !missing.is_empty() {
            return Err(HarnessError::Missing(missing));
        }
        let flat_path = dir.join("flat_policy.json");
        let no_graph_path = dir.join("executor_no_graph.json");
        Ok(Self {
            interpreter: InterpreterParams::load(&dir.join(FILES[0]))?,
            gcn: GcnParams::load(&dir.join(FILES[1]))?,
            executor: ExecutorParams::load(&dir.join(FILES[2]))?,
            no_graph: if no_graph_path.exists() {
                Some(ExecutorParams::load(&no_graph_path)?)
            } else {
                None
            },
            flat: if flat_path.exists() {
                Some(FlatPolicy::load(&flat_path)?)
            } else {
                None
            },
            curves: Vec::new(),
        })
    }
}

pub fn curves_csv(curves: &[EpochLog]) -> String {
    let mut s = String::from("component,epoch,mean_loss\n");
    for c in curves {
        let _ = writeln!(s, "{},{},{:.8}", c.component, c.epoch, c.mean_loss);
    }
    s
}

/// Trains interpreter, GCN, executor (localizer then edge classifier, on
/// frozen GCN embeddings) and, if configured, the flat baseline.
pub fn train_all(cfg: &ExperimentConfig, ds: &Dataset) -> Result<TrainedModels, HarnessError> {
    let world = &ds.world;
    let (vocab, features) = (world.vocab_size(), world.feature_width());
    let demos: Vec<_> = ds.seen.iter().flat_map(|t| t.demos.iter().cloned()).collect();

    log::info!("training interpreter on {} demos", demos.len());
    let mut interpreter = InterpreterParams::new(vocab, features, cfg.interpreter.clone(), cfg.seed_for("init/interpreter"))?;
    let mut curves = interpreter.train(&demos, cfg.seed_for("train/interpreter"))?;

    let mut pairs = Vec::with_capacity(demos.len());
    for t in &ds.seen {
        for d in &t.demos {
            pairs.push(GcnTrainingPair::new(demo_path(t.task.id, d)?, &t.union)?);
        }
    }
    log::info!("training gcn on {} pairs", pairs.len());
    let mut gcn = GcnParams::new(vocab, cfg.gcn.clone(), cfg.seed_for("init/gcn"))?;
    curves.extend(gcn.train(&pairs, cfg.seed_for("train/gcn"))?.epochs);

    let mut examples = Vec::with_capacity(demos.len());
    let mut fc_examples = Vec::new();
    for t in &ds.seen {
        for d in &t.demos {
            let path = demo_path(t.task.id, d)?;
            let out = gcn.forward(&path)?;
            examples.push(ExecutorExample::from_demo(d, &t.union, &out, vocab)?);
            if cfg.train_no_graph {
                let fc = ConjugateTaskGraph::fully_connected(None, path.actions(), true);
                fc_examples.push(ExecutorExample::from_demo(d, &fc, &out, vocab)?);
            }
        }
    }
    log::info!("training executor on {} demos", examples.len());
    let mut executor = ExecutorParams::new(vocab, features, cfg.gcn.hidden, cfg.executor.clone(), cfg.seed_for("init/executor"))?;
    curves.extend(executor.train(&examples, cfg.seed_for("train/executor"))?);

    let no_graph = if cfg.train_no_graph {
        log::info!("training no-graph executor");
        let mut e = ExecutorParams::new(vocab, features, cfg.gcn.hidden, cfg.executor.clone(), cfg.seed_for("init/no_graph"))?;
        let logs = e.train(&fc_examples, cfg.seed_for("train/no_graph"))?;
        curves.extend(logs.into_iter().map(|l| EpochLog {
            component: format!("no_graph_{}", l.component),
            ..l
        }));
        Some(e)
    } else {
        None
    };

    let flat = if cfg.train_flat {
        let mut flat = FlatPolicy::new(vocab, features, cfg.flat.clone(), cfg.seed_for("init/flat"))?;
        let mut ex = Vec::new();
        for t in &ds.seen {
            let n = t.demos.len();
            for k in 0..n {
                ex.push(flat.example(&t.demos[k], &t.demos[(k + 1) % n])?);
            }
        }
        log::info!("training flat policy on {} pairs", ex.len());
        curves.extend(flat.train(&ex, cfg.seed_for("train/flat"))?);
        Some(flat)
    } else {
        None
    };
    Ok(TrainedModels {
        interpreter,
        gcn,
        executor,
        no_graph,
        flat,
        curves,
    })
}
