//! Leave-one-out retrieval metrics (R-Precision, MAP@R), reports and the
//! per-task best-adaptor selector.

use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{extract_features, FeatureModel};
use crate::checkpoint::write_atomic;
use crate::data::TaskDataset;
use crate::error::{GrappaError, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Test embeddings and class labels of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTask {
    pub name: String,
    pub embeddings: Array2<f64>,
    pub labels: Vec<usize>,
}

fn unit_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut r in out.rows_mut() {
        let n = r.dot(&r).sqrt();
        if n > 0.0 {
            r.mapv_inplace(|v| v / n);
        }
    }
    out
}

fn rank_by_similarity(query: usize, sims: ndarray::ArrayView1<f64>) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..sims.len()).filter(|&j| j != query).collect();
    ids.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    ids
}

/// Every other id by descending cosine similarity to `query`, ties by id.
pub fn rank_gallery(query: usize, embeddings: &Array2<f64>) -> Vec<usize> {
    let unit = unit_rows(embeddings);
    let sims = unit.dot(&unit.row(query));
    rank_by_similarity(query, sims.view())
}

/// Fraction of the top `r` that is relevant; `None` when `r == 0`.
pub fn r_precision(ranking: &[usize], relevant: &[bool], r: usize) -> Option<f64> {
    if r == 0 {
        return None;
    }
    let hits = ranking.iter().take(r).filter(|&&id| relevant[id]).count();
    Some(hits as f64 / r as f64)
}

/// `(1/r) Σ_{i<=r} rel(i) P(i)`; `None` when `r == 0`.
pub fn map_at_r(ranking: &[usize], relevant: &[bool], r: usize) -> Option<f64> {
    if r == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &id) in ranking.iter().take(r).enumerate() {
        if relevant[id] {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / r as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: usize,
    pub label: usize,
    pub r: usize,
    pub rp: f64,
    pub map_at_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub num_images: usize,
    pub num_scored: usize,
    /// Queries whose class has no other member.
    pub num_excluded: usize,
    pub rp: f64,
    pub map_at_r: f64,
    pub queries: Vec<QueryResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDelta {
    pub task: String,
    pub rp: f64,
    pub map_at_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub baseline: String,
    pub tasks: Vec<TaskDelta>,
    pub mean_rp: f64,
    pub mean_map_at_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub schema_version: u32,
    pub model: String,
    pub model_fingerprint: String,
    pub tasks: Vec<TaskReport>,
    pub mean_rp: f64,
    pub mean_map_at_r: f64,
    pub baseline: Option<BaselineComparison>,
}

/// Scores every query of a task against the rest of the task.
pub fn evaluate_task(task: &EvalTask) -> Result<TaskReport> {
    let n = task.embeddings.nrows();
    if n < 2 || task.labels.len() != n {
        return Err(GrappaError::Data(format!(
            "task `{}` needs at least two labeled embeddings, has {n} rows and {} labels",
            task.name,
            task.labels.len()
        )));
    }
    let unit = unit_rows(&task.embeddings);
    let sims = unit.dot(&unit.t());
    let results: Vec<Option<QueryResult>> = (0..n)
        .into_par_iter()
        .map(|q| {
            let ranking = rank_by_similarity(q, sims.index_axis(Axis(0), q));
            let relevant: Vec<bool> = task.labels.iter().map(|&l| l == task.labels[q]).collect();
            let r = ranking.iter().filter(|&&id| relevant[id]).count();
            Some(QueryResult {
                query: q,
                label: task.labels[q],
                r,
                rp: r_precision(&ranking, &relevant, r)?,
                map_at_r: map_at_r(&ranking, &relevant, r)?,
            })
        })
        .collect();
    let queries: Vec<QueryResult> = results.into_iter().flatten().collect();
    let scored = queries.len();
    let mean = |f: fn(&QueryResult) -> f64| {
        if scored == 0 {
            0.0
        } else {
            queries.iter().map(f).sum::<f64>() / scored as f64
        }
    };
    Ok(TaskReport {
        task: task.name.clone(),
        num_images: n,
        num_scored: scored,
        num_excluded: n - scored,
        rp: mean(|q| q.rp),
        map_at_r: mean(|q| q.map_at_r),
        queries,
    })
}

pub fn evaluate_tasks(tasks: &[EvalTask], model: &str, fingerprint: &str) -> Result<RetrievalReport> {
    if tasks.is_empty() {
        return Err(GrappaError::Data("no evaluation tasks".into()));
    }
    let reports = tasks.iter().map(evaluate_task).collect::<Result<Vec<_>>>()?;
    let k = reports.len() as f64;
    Ok(RetrievalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model: model.to_string(),
        model_fingerprint: fingerprint.to_string(),
        mean_rp: reports.iter().map(|t| t.rp).sum::<f64>() / k,
        mean_map_at_r: reports.iter().map(|t| t.map_at_r).sum::<f64>() / k,
        tasks: reports,
        baseline: None,
    })
}

/// Embeds each test split with `model` and scores it.
pub fn evaluate_model<M: FeatureModel + ?Sized>(
    model: &M,
    name: &str,
    fingerprint: &str,
    tests: &[&TaskDataset],
    chunk: usize,
) -> Result<RetrievalReport> {
    if tests.is_empty() {
        return Err(GrappaError::Data("no evaluation tasks".into()));
    }
    let mut tasks = Vec::with_capacity(tests.len());
    for t in tests {
        if t.is_empty() {
            return Err(GrappaError::Data(format!("task `{}` has no test images", t.task)));
        }
        tasks.push(EvalTask {
            name: t.task.clone(),
            embeddings: extract_features(model, &t.images, chunk)?,
            labels: t.labels.clone(),
        });
    }
    evaluate_tasks(&tasks, name, fingerprint)
}

impl RetrievalReport {
    fn check_same_tasks(&self, other: &RetrievalReport) -> Result<()> {
        let a: Vec<&str> = self.tasks.iter().map(|t| t.task.as_str()).collect();
        let b: Vec<&str> = other.tasks.iter().map(|t| t.task.as_str()).collect();
        if a != b {
            return Err(GrappaError::Data(format!("task lists differ: {a:?} vs {b:?}")));
        }
        Ok(())
    }

    /// Attaches per-task differences `self - baseline`.
    pub fn with_baseline(mut self, baseline: &RetrievalReport) -> Result<Self> {
        self.check_same_tasks(baseline)?;
        let tasks: Vec<TaskDelta> = self
            .tasks
            .iter()
            .zip(&baseline.tasks)
            .map(|(m, b)| TaskDelta {
                task: m.task.clone(),
                rp: m.rp - b.rp,
                map_at_r: m.map_at_r - b.map_at_r,
            })
            .collect();
        self.baseline = Some(BaselineComparison {
            baseline: baseline.model.clone(),
            tasks,
            mean_rp: self.mean_rp - baseline.mean_rp,
            mean_map_at_r: self.mean_map_at_r - baseline.mean_map_at_r,
        });
        Ok(self)
    }

    pub fn task(&self, name: &str) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One row per scored query.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "query", "label", "r", "rp", "map_at_r"])
            .map_err(|e| GrappaError::Data(e.to_string()))?;
        for t in &self.tasks {
            for q in &t.queries {
                w.write_record([
                    t.task.clone(),
                    q.query.to_string(),
                    q.label.to_string(),
                    q.r.to_string(),
                    q.rp.to_string(),
                    q.map_at_r.to_string(),
                ])
                .map_err(|e| GrappaError::Data(e.to_string()))?;
            }
        }
        let bytes = w.into_inner().map_err(|e| GrappaError::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| GrappaError::Data(e.to_string()))
    }

    /// Writes `<stem>.json`, `<stem>.csv` and, with a baseline attached and
    /// `chart` set, `<stem>.svg`.
    pub fn write(&self, stem: &Path, chart: bool) -> Result<()> {
        write_atomic(&stem.with_extension("json"), self.to_json()?.as_bytes())?;
        write_atomic(&stem.with_extension("csv"), self.to_csv()?.as_bytes())?;
        if chart {
            if let Some(svg) = self.delta_chart_svg() {
                write_atomic(&stem.with_extension("svg"), svg.as_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| GrappaError::io(path, e))?;
        let report: Self = serde_json::from_slice(&text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(GrappaError::Data(format!(
                "report schema {} is not supported",
                report.schema_version
            )));
        }
        Ok(report)
    }

    /// Bar chart of per-task RP change against the baseline, in points.
    pub fn delta_chart_svg(&self) -> Option<String> {
        let cmp = self.baseline.as_ref()?;
        let (bar, gap, height, pad) = (60.0, 20.0, 240.0, 40.0);
        let deltas: Vec<f64> = cmp.tasks.iter().map(|t| 100.0 * t.rp).collect();
        let span = deltas.iter().fold(1.0f64, |m, d| m.max(d.abs()));
        let width = pad * 2.0 + deltas.len() as f64 * (bar + gap);
        let zero = pad + height / 2.0;
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{}\">\n",
            height + 2.0 * pad
        );
        svg += &format!(
            "<text x=\"{pad}\" y=\"20\" font-size=\"12\">RP change vs {} (points)</text>\n",
            cmp.baseline
        );
        svg += &format!(
            "<line x1=\"{pad}\" y1=\"{zero}\" x2=\"{}\" y2=\"{zero}\" stroke=\"black\"/>\n",
            width - pad
        );
        for (i, (t, d)) in cmp.tasks.iter().zip(&deltas).enumerate() {
            let x = pad + i as f64 * (bar + gap);
            let h = d.abs() / span * height / 2.0;
            let y = if *d >= 0.0 { zero - h } else { zero };
            let color = if *d >= 0.0 { "#4c72b0" } else { "#c44e52" };
            svg += &format!(
                "<rect x=\"{x}\" y=\"{y:.2}\" width=\"{bar}\" height=\"{h:.2}\" fill=\"{color}\"/>\n"
            );
            svg += &format!(
                "<text x=\"{x}\" y=\"{:.2}\" font-size=\"11\">{} {d:+.1}</text>\n",
                height + 2.0 * pad - 8.0,
                t.task
            );
        }
        svg += "</svg>\n";
        Some(svg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleChoice {
    pub task: String,
    /// Index into the input reports.
    pub selected: usize,
    pub rp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub choices: Vec<OracleChoice>,
    pub report: RetrievalReport,
}

/// Picks, per task, the report with the highest RP (lowest index on ties).
pub fn oracle_select(reports: &[RetrievalReport]) -> Result<OracleReport> {
    let first = reports
        .first()
        .ok_or_else(|| GrappaError::Data("oracle needs at least one report".into()))?;
    for r in &reports[1..] {
        first.check_same_tasks(r)?;
    }
    let mut choices = Vec::new();
    let mut tasks = Vec::new();
    for (ti, t) in first.tasks.iter().enumerate() {
        let mut best = 0;
        for (i, r) in reports.iter().enumerate().skip(1) {
            if r.tasks[ti].rp > reports[best].tasks[ti].rp {
                best = i;
            }
        }
        let chosen = reports[best].tasks[ti].clone();
        debug_assert!(reports.iter().all(|r| r.tasks[ti].rp <= chosen.rp));
        choices.push(OracleChoice {
            task: t.task.clone(),
            selected: best,
            rp: chosen.rp,
        });
        tasks.push(chosen);
    }
    let k = tasks.len() as f64;
    let report = RetrievalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model: "oracle".into(),
        model_fingerprint: String::new(),
        mean_rp: tasks.iter().map(|t| t.rp).sum::<f64>() / k,
        mean_map_at_r: tasks.iter().map(|t| t.map_at_r).sum::<f64>() / k,
        tasks,
        baseline: None,
    };
    Ok(OracleReport { choices, report })
}
