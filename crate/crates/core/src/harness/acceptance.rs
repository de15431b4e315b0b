//! The acceptance suite: oracle equivalences, gradient and gate identities,
//! and the end-to-end experiment trends, each reduced to one pass/fail line.
//!
//! Experiments write their runs under `dir/<domain>/` so the retention and
//! reproducibility checks can read back exactly what was produced.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{
    alternate_order, build_dataset, demo_path, evaluate, export, load_runs, nll_protocol, save_run, step_generalization, train_all,
    write_dataset, AblationFlags, Dataset, ExperimentConfig, HarnessError, ResetMode, RunRecord,
};
use crate::ctg::{goal_distance, oracle_graph, shortest_sequences, union_graphs, ConjugateTaskGraph, OracleOptions};
use crate::env::stacking::enumerate_configurations;
use crate::env::{EnvState, Goal, StackingGoal, StackingWorld, TaskSpec, World};
use crate::executor::{rollout, ExecutorExample, ExecutorParams, PolicyBundle, TrueEdges, TrueLocalizer};
use crate::flat::FlatPolicy;
use crate::gcn::{GcnParams, GcnTrainingPair};
use crate::interpreter::{frames_of, InterpreterParams};
use crate::nn::{gradient_check, scaled, GradCheckOptions, ModuleParams, NnError};

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}] criterion {:>2} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

pub const CRITERIA: [(u32, &str); 10] = [
    (1, "oracle_rollouts"),
    (2, "union_equals_oracle"),
    (3, "gradient_checks"),
    (4, "gate_identities"),
    (5, "stacking_generalization"),
    (6, "ablation_zeros"),
    (7, "step_generalization"),
    (8, "nll_ordering"),
    (9, "retention"),
    (10, "reproducibility"),
];

pub const SWEEP: [usize; 4] = [50, 100, 200, 400];
const GRAD_TOL: f64 = 1e-4;
const GATE_TOL: f64 = 1e-9;

fn result(id: u32, passed: bool, detail: String) -> CriterionResult {
    let name = CRITERIA.iter().find(|c| c.0 == id).map_or("?", |c| c.1);
    CriterionResult {
        id,
        name: name.into(),
        passed,
        detail,
    }
}

/// Runs the criteria in `only` (all when empty), writing artifacts under `dir`.
pub fn run_suite(dir: &Path, only: &[u32]) -> Result<Vec<CriterionResult>, HarnessError> {
    let want = |id: u32| only.is_empty() || only.contains(&id);
    let mut out = Vec::new();
    if want(1) {
        out.push(oracle_rollouts()?);
    }
    if want(2) {
        out.push(union_equals_oracle()?);
    }
    if want(3) {
        out.push(gradient_checks()?);
    }
    if want(4) {
        out.push(gate_identities()?);
    }
    let mut stacking = None;
    if want(5) || want(6) || want(8) {
        stacking = Some(stacking_experiments(&dir.join("stacking"))?);
    }
    let mut sorting = None;
    if want(6) || want(8) {
        sorting = Some(sorting_experiments(&dir.join("sorting"))?);
    }
    let mut collection = None;
    if want(7) || want(8) {
        collection = Some(collection_experiments(&dir.join("collection"))?);
    }
    if want(5) {
        out.push(stacking_generalization(stacking.as_ref().expect("stacking ran")));
    }
    if want(6) {
        out.push(ablation_zeros(
            stacking.as_ref().expect("stacking ran"),
            sorting.as_ref().expect("sorting ran"),
        ));
    }
    if want(7) {
        out.push(step_generalization_check(collection.as_ref().expect("collection ran")));
    }
    if want(8) {
        let nll: Vec<&RunRecord> = [&stacking, &sorting, &collection].into_iter().flatten().map(|d| &d.nll).collect();
        out.push(nll_ordering(&nll));
    }
    if want(10) {
        out.push(reproducibility(&dir.join("repro"))?);
    }
    // Last, so it covers every run written above.
    if want(9) {
        out.push(retention(dir)?);
    }
    out.sort_by_key(|r| r.id);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Oracle and identity checks

/// Every (start, goal) pair of the 4-block world at distance 1..=5 is solved
/// by the ground-truth localizer and edge classifier on the oracle graph.
pub fn oracle_rollouts() -> Result<CriterionResult, HarnessError> {
    let world = World::Stacking(StackingWorld::new(4));
    let configs = enumerate_configurations(4);
    let opts = OracleOptions::default();
    let (mut tasks, mut solved) = (0usize, 0usize);
    let mut by_distance = BTreeMap::new();
    let mut first_failure = None;
    for (gi, goal) in configs.iter().enumerate() {
        let task = TaskSpec {
            id: gi as u64,
            domain: world.kind(),
            seed: 0,
            goal: Goal::Stacking(StackingGoal {
                support: goal.support.clone(),
            }),
        };
        for start in &configs {
            let initial = EnvState::Stacking(start.clone());
            let d = goal_distance(&world, &task, &initial, &opts)?;
            if !(1..=5).contains(&d) {
                continue;
            }
            tasks += 1;
            *by_distance.entry(d).or_insert(0usize) += 1;
            let bundle = PolicyBundle {
                graph: oracle_graph(&world, &task, &initial, &opts)?,
                localizer: Box::new(TrueLocalizer),
                edges: Box::new(TrueEdges {
                    world: &world,
                    task: &task,
                    opts,
                }),
            };
            let r = rollout(&bundle, &world, &task, &initial, 2 * d + 4)?;
            if r.success {
                solved += 1;
            } else if first_failure.is_none() {
                first_failure = Some(format!("goal {gi} from {:?}: {:?}", start.support, r.outcome));
            }
        }
    }
    let mut detail = format!("{solved}/{tasks} solved; tasks by distance {by_distance:?}");
    if let Some(f) = first_failure {
        let _ = write!(detail, "; first failure {f}");
    }
    Ok(result(1, tasks > 0 && solved == tasks, detail))
}

/// Sorting tasks whose seeded demos realize every shortest order: the union
/// of the demo paths must equal the oracle graph edge for edge.
pub fn union_equals_oracle() -> Result<CriterionResult, HarnessError> {
    let world = World::Sorting(Default::default());
    let opts = OracleOptions::default();
    let tasks = world.generate_tasks(40, 17)?;
    let (mut covered, mut equal) = (0usize, 0usize);
    let mut mismatch = None;
    for task in &tasks {
        let (initial, _) = world.reset(task, 0)?;
        let all = shortest_sequences(&world, task, &initial, &opts, 10_000)?;
        let mut seen = std::collections::BTreeSet::new();
        let mut paths = Vec::new();
        for seed in 0..(8 * all.len() as u64 + 64) {
            let d = world.plan_demo(task, &initial, seed)?;
            let acts = d.actions.clone().unwrap_or_default();
            if seen.insert(acts.clone()) {
                paths.push(ConjugateTaskGraph::path_from_actions(Some(task.id), &acts)?);
            }
            if seen.len() == all.len() {
                break;
            }
        }
        if !all.iter().all(|s| seen.contains(s)) {
            continue;
        }
        covered += 1;
        let union = union_graphs(&paths, Some(Some(task.id)))?;
        let oracle = oracle_graph(&world, task, &initial, &opts)?;
        if union.edge_set() == oracle.edge_set() {
            equal += 1;
        } else if mismatch.is_none() {
            mismatch = Some(task.id);
        }
    }
    let mut detail = format!("{equal}/{covered} fully covered tasks match ({} generated)", tasks.len());
    if let Some(id) = mismatch {
        let _ = write!(detail, "; first mismatch task {id}");
    }
    Ok(result(2, covered > 0 && equal == covered, detail))
}

/// Central-difference checks of every learned block over 10 seeds, at the
/// stacking preset's sizes.
pub fn gradient_checks() -> Result<CriterionResult, HarnessError> {
    let cfg = ExperimentConfig::preset("stacking")?;
    let world = &cfg.world;
    let (vocab, features) = (world.vocab_size(), world.feature_width());
    let tasks = world.generate_tasks(20, 3)?;

    // A task whose two demos differ, so the union offers a real choice.
    let mut sample = None;
    for t in &tasks {
        let (a, b) = (world.demo(t, 1)?, world.demo(t, 2)?);
        let (pa, pb) = (demo_path(t.id, &a)?, demo_path(t.id, &b)?);
        let union = union_graphs(&[pa.clone(), pb], Some(Some(t.id)))?;
        if union.edge_count() > pa.edge_count() {
            sample = Some((a, b, pa, union));
            break;
        }
    }
    let Some((a, b, path, union)) = sample else {
        return Ok(result(3, false, "no task with distinct demo orders".into()));
    };

    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for seed in 0..10u64 {
        let opts = GradCheckOptions {
            seed,
            ..Default::default()
        };

        let interp = InterpreterParams::new(vocab, features, cfg.interpreter.clone(), seed)?;
        let (frames, targets) = (frames_of(&a), interp.targets(&a)?);
        record(
            "interpreter",
            check(&interp.params, &opts, |p| interp.sequence_loss(p, &frames, &targets))?,
        );

        let gcn = GcnParams::new(vocab, cfg.gcn.clone(), seed)?;
        let pair = GcnTrainingPair::new(path.clone(), &union)?;
        record("gcn", check(&gcn.params, &opts, |p| gcn.pair_loss(p, &pair))?);

        let ex = ExecutorExample::from_demo(&a, &union, &gcn.forward(&path)?, vocab)?;
        let exec = ExecutorParams::new(vocab, features, cfg.gcn.hidden, cfg.executor.clone(), seed)?;
        record("localizer", check(&exec.params, &opts, |p| exec.loss(p, &ex, false))?);
        record("edge_classifier", check(&exec.params, &opts, |p| exec.loss(p, &ex, true))?);

        let flat = FlatPolicy::new(vocab, features, cfg.flat.clone(), seed)?;
        let fex = flat.example(&a, &b)?;
        record("flat_policy", check(&flat.params, &opts, |p| flat.loss(p, &fex))?);
    }
    let passed = worst.values().all(|&e| e < GRAD_TOL);
    let detail = worst.iter().map(|(k, v)| format!("{k}={v:.2e}")).collect::<Vec<_>>().join(" ");
    Ok(result(3, passed, format!("max rel err {detail} (tol {GRAD_TOL:e}, 10 seeds)")))
}

fn scaled_pair((l, g): (f64, Vec<Vec<f64>>)) -> (f64, Vec<Vec<f64>>) {
    scaled(l, g)
}

fn check<F>(params: &ModuleParams, opts: &GradCheckOptions, f: F) -> Result<f64, HarnessError>
where
    F: Fn(&ModuleParams) -> Result<(f64, Vec<Vec<f64>>), NnError>,
{
    gradient_check(params, opts, |p| f(p).map(scaled_pair)).map_err(|e| HarnessError::Model(e.into()))
}

/// Saturated gates: keep-all leaves the graph fixed for the full unroll;
/// overwrite-all with a zero message flips every entry after one step.
pub fn gate_identities() -> Result<CriterionResult, HarnessError> {
    let cfg = ExperimentConfig::preset("stacking")?;
    let world = &cfg.world;
    let tasks = world.generate_tasks(10, 5)?;
    let (mut fix, mut comp) = (0.0f64, 0.0f64);
    for (seed, t) in tasks.iter().enumerate() {
        let g = demo_path(t.id, &world.demo(t, seed as u64)?)?;
        let mut m = GcnParams::new(world.vocab_size(), cfg.gcn.clone(), seed as u64)?;
        m.force_gates(-40.0, 40.0);
        let out = m.forward(&g)?;
        for (c, c0) in out.strengths.iter().zip(g.matrix()) {
            fix = fix.max((c - c0).abs());
        }
        m.force_gates(40.0, -40.0);
        let out = m.forward_iterations(&g, 1)?;
        for (c, c0) in out.strengths.iter().zip(g.matrix()) {
            comp = comp.max((c - (1.0 - c0)).abs());
        }
    }
    Ok(result(
        4,
        fix < GATE_TOL && comp < GATE_TOL,
        format!("fixpoint max dev {fix:.2e}, complement max dev {comp:.2e} (tol {GATE_TOL:e})"),
    ))
}

// ---------------------------------------------------------------------------
// Experiments

pub struct DomainRuns {
    pub dir: PathBuf,
    pub main: RunRecord,
    pub nll: RunRecord,
}

fn prepare(cfg: &ExperimentConfig, dir: &Path) -> Result<Dataset, HarnessError> {
    let ds = build_dataset(cfg)?;
    write_dataset(&ds, &dir.join("dataset"))?;
    super::write_file(&dir.join("config.json"), &(cfg.to_json() + "\n"))?;
    Ok(ds)
}

fn finish(dir: &Path, runs: &[&RunRecord]) -> Result<(), HarnessError> {
    for r in runs {
        save_run(dir, r)?;
    }
    export(dir).map(|_| ())
}

/// Data-efficiency sweep, ablation grid at the largest count, and NLL.
pub fn stacking_experiments(dir: &Path) -> Result<DomainRuns, HarnessError> {
    let cfg = ExperimentConfig::preset("stacking")?;
    let ds = prepare(&cfg, dir)?;
    let mut sweep = RunRecord::new("sweep", &cfg);
    let mut ablate = RunRecord::new("ablate", &cfg);
    let mut nll = None;
    for &c in &SWEEP {
        let last = c == ds.seen.len();
        let sub_cfg = ExperimentConfig {
            seen_tasks: c,
            train_no_graph: last,
            train_flat: false,
            ..cfg.clone()
        };
        let sub = Dataset {
            world: ds.world.clone(),
            seen: ds.seen[..c.min(ds.seen.len())].to_vec(),
            unseen: ds.unseen.clone(),
        };
        log::info!("stacking: training on {c} seen tasks");
        let models = train_all(&sub_cfg, &sub)?;
        sweep.runs.push(evaluate(
            &sub_cfg,
            &models,
            &ds.world,
            &ds.unseen,
            &AblationFlags::default(),
            ResetMode::Fresh,
        )?);
        if last {
            for flags in AblationFlags::grid() {
                ablate
                    .runs
                    .push(evaluate(&sub_cfg, &models, &ds.world, &ds.unseen, &flags, ResetMode::Fresh)?);
            }
            nll = Some(nll_protocol(&sub_cfg, &models, &ds)?);
        }
    }
    let nll = nll.ok_or_else(|| HarnessError::Config(format!("stacking preset must have {} seen tasks", SWEEP[3])))?;
    finish(dir, &[&sweep, &ablate, &nll])?;
    sweep.runs.extend(ablate.runs);
    Ok(DomainRuns {
        dir: dir.into(),
        main: sweep,
        nll,
    })
}

pub fn sorting_experiments(dir: &Path) -> Result<DomainRuns, HarnessError> {
    let cfg = ExperimentConfig::preset("sorting")?;
    let ds = prepare(&cfg, dir)?;
    log::info!("sorting: training on {} seen tasks", ds.seen.len());
    let models = train_all(&cfg, &ds)?;
    let main = alternate_order(&cfg, &models, &ds)?;
    let nll = nll_protocol(&cfg, &models, &ds)?;
    finish(dir, &[&main, &nll])?;
    Ok(DomainRuns {
        dir: dir.into(),
        main,
        nll,
    })
}

pub fn collection_experiments(dir: &Path) -> Result<DomainRuns, HarnessError> {
    let cfg = ExperimentConfig::preset("collection")?;
    let ds = prepare(&cfg, dir)?;
    log::info!("collection: training on {} seen tasks", ds.seen.len());
    let models = train_all(&cfg, &ds)?;
    let main = step_generalization(&cfg, &models, &ds)?;
    let nll = nll_protocol(&cfg, &models, &ds)?;
    finish(dir, &[&main, &nll])?;
    Ok(DomainRuns {
        dir: dir.into(),
        main,
        nll,
    })
}

fn rate(run: &RunRecord, condition: &str) -> Option<f64> {
    run.run(condition).and_then(|c| c.success_rate())
}

fn episodes(run: &RunRecord, condition: &str) -> usize {
    run.run(condition).map_or(0, |c| c.episodes.len())
}

pub fn stacking_generalization(d: &DomainRuns) -> CriterionResult {
    let rates: Vec<f64> = d
        .main
        .runs
        .iter()
        .take(SWEEP.len())
        .map(|c| c.success_rate().unwrap_or(0.0))
        .collect();
    let monotone = rates.windows(2).all(|w| w[1] >= w[0] - 0.05);
    let final_rate = rates.last().copied().unwrap_or(0.0);
    let eps = d.main.runs.last().map_or(0, |c| c.episodes.len());
    let curve = SWEEP
        .iter()
        .zip(&rates)
        .map(|(c, r)| format!("{c}:{r:.3}"))
        .collect::<Vec<_>>()
        .join(" ");
    result(
        5,
        rates.len() == SWEEP.len() && final_rate >= 0.85 && monotone && eps >= 50,
        format!("success by seen tasks {curve}; monotone within 0.05: {monotone}; {eps} episodes"),
    )
}

pub fn ablation_zeros(stacking: &DomainRuns, sorting: &DomainRuns) -> CriterionResult {
    let s = &stacking.main;
    let a = &sorting.main;
    let get = |r: &RunRecord, c: &str| rate(r, c).unwrap_or(f64::NAN);
    let (ni, nl) = (get(s, "no_interpreter"), get(s, "no_localizer"));
    let (full, ne, ng) = (get(a, "full"), get(a, "no_edge_classifier"), get(a, "no_gcn"));
    let passed = ni == 0.0 && nl == 0.0 && ne == 0.0 && ng <= 0.10 && full >= 0.80;
    result(
        6,
        passed,
        format!(
            "stacking no_interpreter={ni:.3} no_localizer={nl:.3}; alternate-order sorting full={full:.3} no_edge_classifier={ne:.3} no_gcn={ng:.3}"
        ),
    )
}

pub fn step_generalization_check(d: &DomainRuns) -> CriterionResult {
    let mut parts = Vec::new();
    let mut passed = true;
    for n in 1..=5 {
        let (full, flat) = (format!("full/n{n}"), format!("flat/n{n}"));
        let (a, b) = (rate(&d.main, &full), rate(&d.main, &flat));
        let eps = episodes(&d.main, &full).min(episodes(&d.main, &flat));
        let ok = matches!((a, b), (Some(a), Some(b)) if a > b) && eps >= 50;
        passed &= ok;
        parts.push(format!(
            "N={n} ntg={:.3} flat={:.3}{}",
            a.unwrap_or(f64::NAN),
            b.unwrap_or(f64::NAN),
            if ok { "" } else { " (not greater)" }
        ));
    }
    result(7, passed, parts.join("; "))
}

pub fn nll_ordering(runs: &[&RunRecord]) -> CriterionResult {
    let mut passed = !runs.is_empty();
    let mut parts = Vec::new();
    for r in runs {
        let m = |c: &str| r.run(c).and_then(|c| c.mean_nll).unwrap_or(f64::NAN);
        let (full, ng, uni) = (m("nll/full"), m("nll/no_graph"), m("nll/uniform"));
        let closed = r.checks.get("uniform_closed_form_max_abs_error").copied().unwrap_or(f64::INFINITY);
        let ok = full < ng && ng < uni && closed < GATE_TOL;
        passed &= ok;
        parts.push(format!(
            "{} full={full:.4} no_graph={ng:.4} uniform={uni:.4} closed-form err={closed:.1e}{}",
            r.world.kind(),
            if ok { "" } else { " (ordering violated)" }
        ));
    }
    result(8, passed, parts.join("; "))
}

/// Every completed graph saved under `dir` contains its demonstrated path.
pub fn retention(dir: &Path) -> Result<CriterionResult, HarnessError> {
    fn walk(d: &Path, out: &mut Vec<PathBuf>) {
        if d.join("runs").is_dir() {
            out.push(d.to_path_buf());
        }
        let Ok(entries) = std::fs::read_dir(d) else { return };
        for e in entries.flatten() {
            if e.path().is_dir() && e.file_name() != "runs" {
                walk(&e.path(), out);
            }
        }
    }
    let mut run_dirs = Vec::new();
    walk(dir, &mut run_dirs);
    run_dirs.sort();
    let (mut graphs, mut violations) = (0usize, 0usize);
    for d in &run_dirs {
        for r in load_runs(d)? {
            for c in &r.runs {
                for e in &c.episodes {
                    if e.path.is_some() && e.graph.is_some() {
                        graphs += 1;
                        violations += usize::from(!e.retains_path());
                    }
                }
            }
        }
    }
    Ok(result(
        9,
        graphs > 0 && violations == 0,
        format!(
            "{violations} violations over {graphs} completed graphs in {} run directories",
            run_dirs.len()
        ),
    ))
}

/// Small stacking configuration for the reproducibility check.
pub fn repro_config() -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::preset("stacking")?;
    cfg.experiment_id = "repro".into();
    cfg.world = World::Stacking(StackingWorld::new(4));
    cfg.seen_tasks = 30;
    cfg.unseen_tasks = 10;
    cfg.demos_per_task = 2;
    cfg.unseen_demos = 3;
    cfg.interpreter.train.epochs = 3;
    cfg.gcn.train.epochs = 3;
    cfg.executor.localizer.epochs = 3;
    cfg.executor.edge.epochs = 3;
    cfg.validate()?;
    Ok(cfg)
}

fn repro_pass(cfg: &ExperimentConfig, dir: &Path) -> Result<(), HarnessError> {
    let ds = prepare(cfg, dir)?;
    let models = train_all(cfg, &ds)?;
    let mut ablate = RunRecord::new("ablate", cfg);
    for flags in AblationFlags::grid() {
        ablate
            .runs
            .push(evaluate(cfg, &models, &ds.world, &ds.unseen, &flags, ResetMode::Fresh)?);
    }
    let nll = nll_protocol(cfg, &models, &ds)?;
    finish(dir, &[&ablate, &nll])
}

fn output_files(dir: &Path) -> Vec<PathBuf> {
    fn walk(root: &Path, d: &Path, out: &mut Vec<PathBuf>) {
        let Ok(entries) = std::fs::read_dir(d) else { return };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.extension().is_some_and(|x| x == "csv" || x == "dot") {
                out.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// Runs the small configuration twice and compares every CSV and DOT byte.
pub fn reproducibility(dir: &Path) -> Result<CriterionResult, HarnessError> {
    let cfg = repro_config()?;
    let (a, b) = (dir.join("a"), dir.join("b"));
    for d in [&a, &b] {
        if d.exists() {
            std::fs::remove_dir_all(d).map_err(|e| HarnessError::io(d, e))?;
        }
        repro_pass(&cfg, d)?;
    }
    let (fa, fb) = (output_files(&a), output_files(&b));
    let mut differing = Vec::new();
    for f in &fa {
        let same = std::fs::read(a.join(f)).ok() == std::fs::read(b.join(f)).ok();
        if !same {
            differing.push(f.display().to_string());
        }
    }
    let csv = fa.iter().filter(|f| f.extension().is_some_and(|x| x == "csv")).count();
    let passed = fa == fb && differing.is_empty() && csv > 0 && fa.len() > csv;
    let mut detail = format!("{} files compared ({csv} csv, {} dot)", fa.len(), fa.len() - csv);
    if fa != fb {
        detail += "; file lists differ";
    }
    if !differing.is_empty() {
        let _ = write!(detail, "; differing: {}", differing.join(", "));
    }
    Ok(result(10, passed, detail))
}
