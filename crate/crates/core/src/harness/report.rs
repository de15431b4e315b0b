use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{read_file, write_file, HarnessError, RunRecord};
use crate::ctg::to_dot;

pub const METRICS_HEADER: &str = "experiment_id,condition,domain,seen_tasks,episodes,success_rate,mean_nll,edge_f1,seconds";

/// One metrics CSV row. Optional fields render blank.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub experiment_id: String,
    pub condition: String,
    pub domain: String,
    pub seen_tasks: usize,
    pub episodes: usize,
    pub success_rate: Option<f64>,
    pub mean_nll: Option<f64>,
    pub edge_f1: Option<f64>,
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn from_run(run: &RunRecord) -> Vec<Self> {
        run.runs
            .iter()
            .map(|c| MetricsRecord {
                experiment_id: run.experiment_id.clone(),
                condition: c.condition.clone(),
                domain: c.domain.clone(),
                seen_tasks: c.seen_tasks,
                episodes: if c.episodes.is_empty() { c.scored } else { c.episodes.len() },
                success_rate: c.success_rate(),
                mean_nll: c.mean_nll,
                edge_f1: c.edges.map(|e| e.f1()),
                seconds: c.seconds,
            })
            .collect()
    }

    fn fields(&self) -> [String; 9] {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        [
            self.experiment_id.clone(),
            self.condition.clone(),
            self.domain.clone(),
            self.seen_tasks.to_string(),
            self.episodes.to_string(),
            opt(self.success_rate),
            opt(self.mean_nll),
            opt(self.edge_f1),
            format!("{:.3}", self.seconds),
        ]
    }
}

pub fn metrics_csv(rows: &[MetricsRecord]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = METRICS_HEADER.split(',').collect();
    let err = |e: csv::Error| HarnessError::Config(format!("csv: {e}"));
    w.write_record(&header).map_err(err)?;
    for r in rows {
        w.write_record(r.fields()).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn nll_csv(runs: &[RunRecord]) -> String {
    let mut s = String::from("experiment_id,task_id,condition,demos,total_nll,mean_nll\n");
    for r in runs {
        for row in &r.nll {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6}",
                r.experiment_id,
                row.task_id,
                row.condition,
                row.demos,
                row.total_nll,
                row.total_nll / row.demos.max(1) as f64
            );
        }
    }
    s
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn run_files(run_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let dir = run_dir.join("runs");
    if !dir.is_dir() {
        return Err(HarnessError::Missing(vec![dir]));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| HarnessError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    if files.is_empty() {
        return Err(HarnessError::Missing(vec![dir.join("*.json")]));
    }
    files.sort();
    Ok(files)
}

pub fn load_runs(run_dir: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    run_files(run_dir)?
        .iter()
        .map(|p| serde_json::from_str(&read_file(p)?).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display()))))
        .collect()
}

pub fn save_run(run_dir: &Path, run: &RunRecord) -> Result<PathBuf, HarnessError> {
    let p = run_dir.join("runs").join(format!("{}.json", slug(&run.stage)));
    let mut text = serde_json::to_string_pretty(run).expect("run records serialize");
    text.push('\n');
    write_file(&p, &text)?;
    Ok(p)
}

fn summary(runs: &[RunRecord], rows: &[MetricsRecord]) -> String {
    let mut s = String::new();
    for r in runs {
        let _ = writeln!(s, "[{}] {}", r.stage, r.experiment_id);
        for c in &r.runs {
            let _ = write!(s, "  {:<32} {:<10} seen={:<4}", c.condition, c.domain, c.seen_tasks);
            if let Some(rate) = c.success_rate() {
                let _ = write!(s, " success={}/{} ({:.1}%)", c.successes(), c.episodes.len(), 100.0 * rate);
            }
            if let Some(nll) = c.mean_nll {
                let _ = write!(s, " mean_nll={nll:.4} over {} demos", c.scored);
            }
            if let Some(e) = c.edges {
                let _ = write!(s, " edge_p/r/f1={:.3}/{:.3}/{:.3}", e.precision(), e.recall(), e.f1());
            }
            let v = c.retention_violations();
            if v > 0 {
                let _ = write!(s, " RETENTION_VIOLATIONS={v}");
            }
            s.push('\n');
        }
        for (k, v) in &r.checks {
            let _ = writeln!(s, "  check {k} = {v:.3e}");
        }
    }
    let _ = writeln!(s, "{} metric rows", rows.len());
    s
}

/// Renders every saved run under `run_dir`: `metrics.csv`, `nll.csv`,
/// `summary.txt`, and a path/completed DOT pair per generated graph.
pub fn export(run_dir: &Path) -> Result<Vec<MetricsRecord>, HarnessError> {
    let runs = load_runs(run_dir)?;
    let rows: Vec<MetricsRecord> = runs.iter().flat_map(MetricsRecord::from_run).collect();
    write_file(&run_dir.join("metrics.csv"), &metrics_csv(&rows)?)?;
    if runs.iter().any(|r| !r.nll.is_empty()) {
        write_file(&run_dir.join("nll.csv"), &nll_csv(&runs))?;
    }
    for r in &runs {
        let label = |a| r.world.action_name(a);
        for c in &r.runs {
            let dir = run_dir.join("graphs").join(slug(&r.stage)).join(slug(&c.condition));
            for e in &c.episodes {
                if let (Some(p), Some(g)) = (&e.path, &e.graph) {
                    write_file(&dir.join(format!("task_{:07}_path.dot", e.task_id)), &to_dot(p, &label))?;
                    write_file(&dir.join(format!("task_{:07}_completed.dot", e.task_id)), &to_dot(g, &label))?;
                }
            }
        }
    }
    write_file(&run_dir.join("summary.txt"), &summary(&runs, &rows))?;
    Ok(rows)
}
