use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{collection_eval_tasks, train_all, AblationFlags, Dataset, ExperimentConfig, HarnessError, TaskData, TrainedModels};
use crate::ctg::{union_graphs, ConjugateTaskGraph, EdgeMetrics};
use crate::env::{ActionId, Demonstration, EnvState, TaskSpec, World};
use crate::executor::{
    nll_of_demo, rollout, uniform_nll, EdgeClassifier, LearnedEdges, LearnedLocalizer, NodeLocalizer, PolicyBundle, RolloutOutcome,
    UniformEdges, UniformLocalizer,
};
use crate::gcn::{GcnOutput, GcnParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResetMode {
    Fresh,
    /// Sorting only: the scene forces an order different from the demo's.
    AlternateOrder,
}

impl AblationFlags {
    /// `full`, or the set flags joined with `+`.
    pub fn name(&self) -> String {
        let names: Vec<&str> = [
            (self.no_interpreter, "no_interpreter"),
            (self.no_localizer, "no_localizer"),
            (self.no_edge_classifier, "no_edge_classifier"),
            (self.no_gcn, "no_gcn"),
            (self.fully_connected_init, "fully_connected_init"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if names.is_empty() {
            "full".into()
        } else {
            names.join("+")
        }
    }

    /// The full model followed by each single-flag ablation.
    pub fn grid() -> Vec<AblationFlags> {
        let none = AblationFlags::default();
        vec![
            none,
            AblationFlags {
                no_interpreter: true,
                ..none
            },
            AblationFlags {
                no_localizer: true,
                ..none
            },
            AblationFlags {
                no_edge_classifier: true,
                ..none
            },
            AblationFlags { no_gcn: true, ..none },
            AblationFlags {
                fully_connected_init: true,
                ..none
            },
        ]
    }
}

/// The graph an (ablated) generator produces from one demo.
#[derive(Debug, Clone)]
pub struct GeneratedGraph {
    /// Interpreted path; `None` without an interpreter.
    pub path: Option<ConjugateTaskGraph>,
    pub graph: ConjugateTaskGraph,
    /// GCN pass whose embeddings feed the edge classifier.
    pub gcn: GcnOutput,
}

pub fn generate_graph(
    models: &TrainedModels,
    world: &World,
    flags: &AblationFlags,
    task_id: u64,
    demo: &Demonstration,
) -> Result<GeneratedGraph, HarnessError> {
    if flags.no_interpreter {
        let graph = ConjugateTaskGraph::fully_connected(Some(task_id), world.actions(), true);
        let gcn = models.gcn.forward(&graph)?;
        return Ok(GeneratedGraph { path: None, graph, gcn });
    }
    let actions = models.interpreter.interpret(&demo.without_labels())?.actions;
    // Nothing decoded: a START-only graph, which dead-ends on rollout.
    let path = if actions.is_empty() {
        log::warn!("interpretation of task {task_id} is empty");
        ConjugateTaskGraph::empty(Some(task_id), [])
    } else {
        ConjugateTaskGraph::path_from_actions(Some(task_id), &actions)?
    };
    let gcn = models.gcn.forward(&path)?;
    let graph = if flags.fully_connected_init {
        ConjugateTaskGraph::fully_connected(Some(task_id), path.actions(), true)
    } else if flags.no_gcn {
        path.clone()
    } else {
        GcnParams::complete_from(&gcn, &path, models.gcn.config.threshold)?
    };
    Ok(GeneratedGraph {
        path: Some(path),
        graph,
        gcn,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task_id: u64,
    pub success: bool,
    pub outcome: RolloutOutcome,
    pub steps: usize,
    pub demo_length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<ConjugateTaskGraph>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<ConjugateTaskGraph>,
}

impl EpisodeRecord {
    /// Completed edge set ⊇ path edge set (vacuous without a path).
    pub fn retains_path(&self) -> bool {
        match (&self.path, &self.graph) {
            (Some(p), Some(g)) => p.is_subgraph_of(g),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllRow {
    pub task_id: u64,
    pub condition: String,
    pub demos: usize,
    pub total_nll: f64,
}

/// One evaluated condition: the unit behind a metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRun {
    pub condition: String,
    pub domain: String,
    pub seen_tasks: usize,
    pub episodes: Vec<EpisodeRecord>,
    #[serde(default)]
    pub edges: Option<EdgeMetrics>,
    /// NLL protocol rows only: scored demos and their mean NLL.
    #[serde(default)]
    pub scored: usize,
    #[serde(default)]
    pub mean_nll: Option<f64>,
    pub seconds: f64,
}

impl ConditionRun {
    pub fn successes(&self) -> usize {
        self.episodes.iter().filter(|e| e.success).count()
    }

    pub fn success_rate(&self) -> Option<f64> {
        (!self.episodes.is_empty()).then(|| self.successes() as f64 / self.episodes.len() as f64)
    }

    pub fn retention_violations(&self) -> usize {
        self.episodes.iter().filter(|e| !e.retains_path()).count()
    }
}

/// Everything one CLI stage produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    pub experiment_id: String,
    /// Names the actions in exported graphs.
    pub world: World,
    pub runs: Vec<ConditionRun>,
    #[serde(default)]
    pub nll: Vec<NllRow>,
    /// Named scalar checks (e.g. closed-form deviations).
    #[serde(default)]
    pub checks: BTreeMap<String, f64>,
}

impl RunRecord {
    pub fn new(stage: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            stage: stage.into(),
            experiment_id: cfg.experiment_id.clone(),
            world: cfg.world.clone(),
            runs: Vec::new(),
            nll: Vec::new(),
            checks: BTreeMap::new(),
        }
    }

    pub fn run(&self, condition: &str) -> Option<&ConditionRun> {
        self.runs.iter().find(|r| r.condition == condition)
    }
}

struct Timer(Option<Instant>);

impl Timer {
    fn start(on: bool) -> Self {
        Timer(on.then(Instant::now))
    }

    fn seconds(&self) -> f64 {
        self.0.map_or(0.0, |t| t.elapsed().as_secs_f64())
    }
}

fn max_steps(demo: &Demonstration) -> usize {
    2 * demo.len() + 4
}

fn initial_state(
    cfg: &ExperimentConfig,
    world: &World,
    task: &TaskSpec,
    demo: &Demonstration,
    reset: ResetMode,
) -> Result<EnvState, HarnessError> {
    let seed = cfg.seed_for(&format!("eval/{}", task.id));
    let (state, _) = match reset {
        ResetMode::Fresh => world.reset(task, seed)?,
        ResetMode::AlternateOrder => {
            let acts: &[ActionId] = demo.actions.as_deref().unwrap_or(&[]);
            world.reset_alternate_order(task, acts, seed)?
        }
    };
    Ok(state)
}

fn truth_of(t: &TaskData) -> Result<ConjugateTaskGraph, HarnessError> {
    Ok(union_graphs(&t.paths()?, Some(Some(t.task.id)))?)
}

/// Conditions the (ablated) NTG on each task's first demo and rolls it out.
pub fn evaluate(
    cfg: &ExperimentConfig,
    models: &TrainedModels,
    world: &World,
    tasks: &[TaskData],
    flags: &AblationFlags,
    reset: ResetMode,
) -> Result<ConditionRun, HarnessError> {
    let timer = Timer::start(cfg.record_time);
    let mut episodes = Vec::with_capacity(tasks.len());
    let mut edges = EdgeMetrics::default();
    for t in tasks {
        let demo = &t.demos[0];
        let g = generate_graph(models, world, flags, t.task.id, demo)?;
        if g.path.is_some() {
            edges = edges.merge(EdgeMetrics::compare(&g.graph, &truth_of(t)?));
        }
        let localizer: Box<dyn NodeLocalizer> = if flags.no_localizer {
            Box::new(UniformLocalizer)
        } else {
            Box::new(LearnedLocalizer(&models.executor))
        };
        let classifier: Box<dyn EdgeClassifier> = if flags.no_edge_classifier {
            Box::new(UniformEdges)
        } else {
            Box::new(LearnedEdges {
                exec: &models.executor,
                gcn: g.gcn,
            })
        };
        let keep = g.path.is_some();
        let bundle = PolicyBundle {
            graph: g.graph,
            localizer,
            edges: classifier,
        };
        let init = initial_state(cfg, world, &t.task, demo, reset)?;
        let r = rollout(&bundle, world, &t.task, &init, max_steps(demo))?;
        let rec = EpisodeRecord {
            task_id: t.task.id,
            success: r.success,
            outcome: r.outcome,
            steps: r.steps.len(),
            demo_length: demo.len(),
            path: g.path,
            graph: keep.then_some(bundle.graph),
        };
        if !rec.retains_path() {
            log::error!("task {}: completed graph dropped a demonstrated edge", t.task.id);
        }
        episodes.push(rec);
    }
    let name = flags.name();
    let run = ConditionRun {
        condition: name.clone(),
        domain: world.kind().to_string(),
        seen_tasks: cfg.seen_tasks,
        episodes,
        edges: (!flags.no_interpreter).then_some(edges),
        scored: 0,
        mean_nll: None,
        seconds: timer.seconds(),
    };
    log::info!(
        "{name}: success {:.3} over {} episodes",
        run.success_rate().unwrap_or(0.0),
        run.episodes.len()
    );
    Ok(run)
}

/// Flat baseline on the same protocol as [`evaluate`].
pub fn evaluate_flat(
    cfg: &ExperimentConfig,
    models: &TrainedModels,
    world: &World,
    tasks: &[TaskData],
    reset: ResetMode,
) -> Result<ConditionRun, HarnessError> {
    let flat = models
        .flat
        .as_ref()
        .ok_or_else(|| HarnessError::Config("no flat policy trained (set train_flat)".into()))?;
    let timer = Timer::start(cfg.record_time);
    let mut episodes = Vec::with_capacity(tasks.len());
    for t in tasks {
        let demo = &t.demos[0];
        let init = initial_state(cfg, world, &t.task, demo, reset)?;
        let r = flat.rollout(&demo.without_labels(), world, &t.task, &init, max_steps(demo))?;
        episodes.push(EpisodeRecord {
            task_id: t.task.id,
            success: r.success,
            outcome: r.outcome,
            steps: r.steps.len(),
            demo_length: demo.len(),
            path: None,
            graph: None,
        });
    }
    Ok(ConditionRun {
        condition: "flat".into(),
        domain: world.kind().to_string(),
        seen_tasks: cfg.seen_tasks,
        episodes,
        edges: None,
        scored: 0,
        mean_nll: None,
        seconds: timer.seconds(),
    })
}

/// Trains and evaluates the full model on the first `c` seen tasks for
/// every `c` in `counts`; the unseen set is shared.
pub fn data_efficiency_sweep(cfg: &ExperimentConfig, ds: &Dataset, counts: &[usize]) -> Result<RunRecord, HarnessError> {
    let mut rec = RunRecord::new("sweep", cfg);
    for &c in counts {
        if c == 0 || c > ds.seen.len() {
            return Err(HarnessError::Config(format!("sweep count {c} outside 1..={}", ds.seen.len())));
        }
        let sub_cfg = ExperimentConfig {
            seen_tasks: c,
            ..cfg.clone()
        };
        let sub = Dataset {
            world: ds.world.clone(),
            seen: ds.seen[..c].to_vec(),
            unseen: ds.unseen.clone(),
        };
        log::info!("sweep: {c} seen tasks");
        let models = train_all(&sub_cfg, &sub)?;
        rec.runs.push(evaluate(
            &sub_cfg,
            &models,
            &ds.world,
            &ds.unseen,
            &AblationFlags::default(),
            ResetMode::Fresh,
        )?);
    }
    Ok(rec)
}

/// Full model, no GCN and no edge classifier on order-forcing resets.
pub fn alternate_order(cfg: &ExperimentConfig, models: &TrainedModels, ds: &Dataset) -> Result<RunRecord, HarnessError> {
    let none = AblationFlags::default();
    let mut rec = RunRecord::new("sort_alt", cfg);
    for flags in [
        none,
        AblationFlags { no_gcn: true, ..none },
        AblationFlags {
            no_edge_classifier: true,
            ..none
        },
    ] {
        rec.runs
            .push(evaluate(cfg, models, &ds.world, &ds.unseen, &flags, ResetMode::AlternateOrder)?);
    }
    Ok(rec)
}

/// NTG and the flat baseline on unseen collection tasks of each size in
/// `cfg.eval_object_counts`. Conditions are named `full/nN`, `flat/nN`.
pub fn step_generalization(cfg: &ExperimentConfig, models: &TrainedModels, ds: &Dataset) -> Result<RunRecord, HarnessError> {
    let mut rec = RunRecord::new("collect_gen", cfg);
    for &n in &cfg.eval_object_counts {
        let (world, tasks) = collection_eval_tasks(cfg, ds, n)?;
        let mut ntg = evaluate(cfg, models, &world, &tasks, &AblationFlags::default(), ResetMode::Fresh)?;
        ntg.condition = format!("full/n{n}");
        let mut flat = evaluate_flat(cfg, models, &world, &tasks, ResetMode::Fresh)?;
        flat.condition = format!("flat/n{n}");
        log::info!(
            "n={n}: ntg {:.3} flat {:.3}",
            ntg.success_rate().unwrap_or(0.0),
            flat.success_rate().unwrap_or(0.0)
        );
        rec.runs.push(ntg);
        rec.runs.push(flat);
    }
    Ok(rec)
}

/// Conditions on each unseen task's first demo and scores the others under
/// the full graph, a fully connected graph over the demoed nodes
/// (`no_graph`), and a uniform policy over the whole action space.
pub fn nll_protocol(cfg: &ExperimentConfig, models: &TrainedModels, ds: &Dataset) -> Result<RunRecord, HarnessError> {
    if cfg.unseen_demos < 2 {
        return Err(HarnessError::Config(
            "the NLL protocol needs at least 2 demos per unseen task".into(),
        ));
    }
    if models.no_graph.is_none() {
        log::warn!("no no-graph executor trained; scoring the no-graph variant with the full executor");
    }
    let timer = Timer::start(cfg.record_time);
    let world = &ds.world;
    let mut rec = RunRecord::new("nll", cfg);
    let uniform_graph = ConjugateTaskGraph::fully_connected(None, world.actions(), true);
    let mut closed_form_error: f64 = 0.0;
    let mut totals: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for t in &ds.unseen {
        let g = generate_graph(models, world, &AblationFlags::default(), t.task.id, &t.demos[0])?;
        let path = g.path.clone().expect("interpreter enabled");
        let no_graph = ConjugateTaskGraph::fully_connected(Some(t.task.id), path.actions(), true);
        let learned = LearnedEdges {
            exec: &models.executor,
            gcn: g.gcn.clone(),
        };
        let variant = LearnedEdges {
            exec: models.no_graph.as_ref().unwrap_or(&models.executor),
            gcn: g.gcn.clone(),
        };
        let held_out = &t.demos[1..];
        for (name, graph, edges) in [
            ("full", &g.graph, &learned as &dyn EdgeClassifier),
            ("no_graph", &no_graph, &variant as &dyn EdgeClassifier),
            ("uniform", &uniform_graph, &UniformEdges as &dyn EdgeClassifier),
        ] {
            let mut total = 0.0;
            for d in held_out {
                let nll = nll_of_demo(graph, edges, d)?;
                if name == "uniform" {
                    let closed = uniform_nll(graph, d).ok_or(HarnessError::Task {
                        task: t.task.id,
                        message: "demo leaves the full action space".into(),
                    })?;
                    closed_form_error = closed_form_error.max((closed - nll).abs());
                }
                total += nll;
            }
            let e = totals.entry(name).or_default();
            e.0 += total;
            e.1 += held_out.len();
            rec.nll.push(NllRow {
                task_id: t.task.id,
                condition: name.into(),
                demos: held_out.len(),
                total_nll: total,
            });
        }
    }
    for name in ["full", "no_graph", "uniform"] {
        let (sum, n) = totals[name];
        rec.runs.push(ConditionRun {
            condition: format!("nll/{name}"),
            domain: world.kind().to_string(),
            seen_tasks: cfg.seen_tasks,
            episodes: Vec::new(),
            edges: None,
            scored: n,
            mean_nll: Some(sum / n as f64),
            seconds: timer.seconds(),
        });
    }
    rec.checks.insert("uniform_closed_form_max_abs_error".into(), closed_form_error);
    Ok(rec)
}
