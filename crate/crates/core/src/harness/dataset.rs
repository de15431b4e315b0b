use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_file, ExperimentConfig, HarnessError};
use crate::ctg::{union_graphs, ConjugateTaskGraph, NodeKey};
use crate::env::{ActionId, CollectionWorld, Demonstration, Goal, TaskSpec, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub task: TaskSpec,
    pub demos: Vec<Demonstration>,
    /// Union of the demos' paths: the task's ground-truth graph.
    pub union: ConjugateTaskGraph,
}

impl TaskData {
    pub fn paths(&self) -> Result<Vec<ConjugateTaskGraph>, HarnessError> {
        self.demos.iter().map(|d| demo_path(self.task.id, d)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub world: World,
    pub seen: Vec<TaskData>,
    pub unseen: Vec<TaskData>,
}

pub fn demo_path(task_id: u64, demo: &Demonstration) -> Result<ConjugateTaskGraph, HarnessError> {
    let acts = demo.actions.as_ref().ok_or(HarnessError::Task {
        task: task_id,
        message: "demo has no action labels".into(),
    })?;
    Ok(ConjugateTaskGraph::path_from_actions(Some(task_id), acts)?)
}

fn task_data(world: &World, task: TaskSpec, demos: usize, cfg: &ExperimentConfig, tag: &str) -> Result<TaskData, HarnessError> {
    let wrap = |e: &dyn std::fmt::Display| HarnessError::Task {
        task: task.id,
        message: e.to_string(),
    };
    let demos = (0..demos)
        .map(|k| {
            world
                .demo(&task, cfg.seed_for(&format!("{tag}/demo/{}/{k}", task.id)))
                .map_err(|e| wrap(&e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let paths = demos.iter().map(|d| demo_path(task.id, d)).collect::<Result<Vec<_>, _>>()?;
    let union = union_graphs(&paths, None).map_err(|e| wrap(&e))?;
    Ok(TaskData { task, demos, union })
}

/// Generates the seen/unseen split. Unseen tasks come first in the task
/// stream, so growing `seen_tasks` keeps the unseen set fixed.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    cfg.validate()?;
    let world = cfg.world.clone();
    let tasks = world.generate_tasks(cfg.unseen_tasks + cfg.seen_tasks, cfg.seed_for("tasks"))?;
    let mut unseen = Vec::with_capacity(cfg.unseen_tasks);
    let mut seen = Vec::with_capacity(cfg.seen_tasks);
    for (i, t) in tasks.into_iter().enumerate() {
        if i < cfg.unseen_tasks {
            unseen.push(task_data(&world, t, cfg.unseen_demos, cfg, "unseen")?);
        } else {
            seen.push(task_data(&world, t, cfg.demos_per_task, cfg, "seen")?);
        }
    }
    Ok(Dataset { world, seen, unseen })
}

/// Collection only: `cfg.unseen_tasks` episodes over manifests with exactly
/// `n` objects that differ from every seen manifest. When fewer such
/// manifests exist they are cycled; each episode gets its own id (hence its
/// own demos and layout), `n·10⁶ + i`.
pub fn collection_eval_tasks(cfg: &ExperimentConfig, ds: &Dataset, n: usize) -> Result<(World, Vec<TaskData>), HarnessError> {
    let World::Collection(base) = &ds.world else {
        return Err(HarnessError::Config("step generalization needs the collection domain".into()));
    };
    let cw = CollectionWorld {
        object_counts: vec![n],
        ..base.clone()
    };
    let available = usize::try_from(cw.goal_count()).unwrap_or(usize::MAX);
    let world = World::Collection(cw);
    let seen: HashSet<&Goal> = ds.seen.iter().map(|t| &t.task.goal).collect();
    let want = cfg.unseen_tasks;
    let draw = (want + seen.len()).min(available);
    let pool: Vec<TaskSpec> = world
        .generate_tasks(draw, cfg.seed_for(&format!("collect/{n}")))?
        .into_iter()
        .filter(|t| !seen.contains(&t.goal))
        .take(want)
        .collect();
    if pool.is_empty() {
        return Err(HarnessError::Config(format!("no unseen collection manifests with {n} objects")));
    }
    if pool.len() < want {
        log::info!("{n} objects: {} unseen manifests, cycled over {want} episodes", pool.len());
    }
    let mut out = Vec::with_capacity(want);
    for i in 0..want {
        let task = TaskSpec {
            id: n as u64 * 1_000_000 + i as u64,
            ..pool[i % pool.len()].clone()
        };
        out.push(task_data(&world, task, cfg.unseen_demos, cfg, &format!("collect{n}"))?);
    }
    Ok((world, out))
}

#[derive(Serialize)]
struct TaskRow<'a> {
    split: &'a str,
    task: &'a TaskSpec,
}

#[derive(Serialize)]
struct SequenceRow<'a> {
    task_id: u64,
    demo: usize,
    actions: &'a [ActionId],
}

#[derive(Serialize)]
struct FrameRow {
    task_id: u64,
    demo: usize,
    frame: usize,
    node: NodeKey,
}

#[derive(Serialize)]
struct EdgeRow {
    task_id: u64,
    demo: usize,
    step: usize,
    node: NodeKey,
    candidates: Vec<ActionId>,
    label: ActionId,
}

#[derive(Serialize)]
struct GcnRow {
    task_id: u64,
    demo: usize,
    input: ConjugateTaskGraph,
    target: ConjugateTaskGraph,
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("dataset rows serialize");
    s.push('\n');
    s
}

/// Writes the dataset plus derived supervision tables under `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), HarnessError> {
    write_file(&dir.join("dataset.json"), &json(ds))?;
    let tasks: Vec<TaskRow> = ds
        .seen
        .iter()
        .map(|t| TaskRow {
            split: "seen",
            task: &t.task,
        })
        .chain(ds.unseen.iter().map(|t| TaskRow {
            split: "unseen",
            task: &t.task,
        }))
        .collect();
    write_file(&dir.join("tasks.json"), &json(&tasks))?;
    for (sub, split) in [("demos", &ds.seen), ("demos_unseen", &ds.unseen)] {
        for t in split.iter() {
            for (k, d) in t.demos.iter().enumerate() {
                write_file(&dir.join(sub).join(format!("task_{:05}_demo_{k}.json", t.task.id)), &json(d))?;
            }
            write_file(&dir.join("unions").join(format!("task_{:05}.json", t.task.id)), &json(&t.union))?;
        }
    }
    let mut seqs = Vec::new();
    let mut frames = Vec::new();
    let mut edges = Vec::new();
    let mut pairs = Vec::new();
    for t in &ds.seen {
        let id = t.task.id;
        for (k, d) in t.demos.iter().enumerate() {
            let acts = d.actions.as_deref().unwrap_or(&[]);
            seqs.push(SequenceRow {
                task_id: id,
                demo: k,
                actions: acts,
            });
            for f in 0..d.observations.len() {
                let node = if f == 0 { NodeKey::Start } else { NodeKey::Action(acts[f - 1]) };
                frames.push(FrameRow {
                    task_id: id,
                    demo: k,
                    frame: f,
                    node,
                });
            }
            for (s, &a) in acts.iter().enumerate() {
                let node = if s == 0 { NodeKey::Start } else { NodeKey::Action(acts[s - 1]) };
                edges.push(EdgeRow {
                    task_id: id,
                    demo: k,
                    step: s,
                    node,
                    candidates: t.union.outgoing(node)?,
                    label: a,
                });
            }
            pairs.push(GcnRow {
                task_id: id,
                demo: k,
                input: demo_path(id, d)?,
                target: t.union.clone(),
            });
        }
    }
    let sup = dir.join("supervision");
    write_file(&sup.join("interpreter.json"), &json(&seqs))?;
    write_file(&sup.join("localizer.json"), &json(&frames))?;
    write_file(&sup.join("edges.json"), &json(&edges))?;
    write_file(&sup.join("gcn_pairs.json"), &json(&pairs))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, HarnessError> {
    let p = dir.join("dataset.json");
    if !p.exists() {
        return Err(HarnessError::Missing(vec![p]));
    }
    let text = std::fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{SortingWorld, StackingWorld};

    fn tiny(world: World) -> ExperimentConfig {
        ExperimentConfig {
            world,
            seen_tasks: 2,
            unseen_tasks: 1,
            demos_per_task: 3,
            unseen_demos: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn files_and_union_monotonicity() {
        let cfg = tiny(World::Stacking(StackingWorld::new(4)));
        let ds = build_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(std::fs::read_dir(dir.path().join("demos")).unwrap().count(), 6);
        for t in &ds.seen {
            for p in t.paths().unwrap() {
                assert!(t.union.edge_count() >= p.edge_count());
                assert!(p.is_subgraph_of(&t.union));
            }
        }
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let cfg = tiny(World::Sorting(SortingWorld::default()));
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(&build_dataset(&cfg).unwrap(), a.path()).unwrap();
        write_dataset(&build_dataset(&cfg).unwrap(), b.path()).unwrap();
        for f in ["dataset.json", "supervision/edges.json", "supervision/gcn_pairs.json"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn unseen_split_is_stable_across_seen_counts() {
        let mut cfg = tiny(World::Stacking(StackingWorld::new(5)));
        let a = build_dataset(&cfg).unwrap();
        cfg.seen_tasks = 6;
        let b = build_dataset(&cfg).unwrap();
        assert_eq!(a.unseen, b.unseen);
        assert_eq!(a.seen[..], b.seen[..2]);
    }
}
