//! Ablation harness and prototype inspection.

use std::fs;
use std::path::Path;

use crate::config::{AblationRow, TrainConfig};
use crate::error::{ensure, Error, Result};
use crate::evaluation::{mean_ranks, MetricEntry, MetricReport};
use crate::model::MultiTaskModel;
use crate::synthdata::PartialLabelBatch;
use crate::tensor::Tensor;
use crate::training::{train_loaded, LoadedData};

pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_RUNS_FILE: &str = "ablation_runs.csv";

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub row: AblationRow,
    pub seed: u64,
    pub report: MetricReport,
    /// Mean rank of this row among all rows trained with the same seed.
    pub seed_rank: f64,
}

#[derive(Clone, Debug)]
pub struct AblationSummary {
    pub runs: Vec<AblationRun>,
    /// Seed-averaged report per row, in row order.
    pub averaged: Vec<(AblationRow, MetricReport)>,
    pub averaged_rank: Vec<f64>,
}

impl AblationSummary {
    pub fn run(&self, row: AblationRow, seed: u64) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.row == row && r.seed == seed)
    }

    pub fn averaged(&self, row: AblationRow) -> Option<&MetricReport> {
        self.averaged.iter().find(|(r, _)| *r == row).map(|(_, m)| m)
    }

    /// One line per row with seed-averaged task metrics.
    pub fn to_csv(&self) -> String {
        let rows: Vec<(&str, String, &MetricReport, f64)> = self
            .averaged
            .iter()
            .zip(&self.averaged_rank)
            .map(|((row, rep), &rank)| (row.label(), String::new(), rep, rank))
            .collect();
        table(false, &rows)
    }

    /// One line per (row, seed) run.
    pub fn runs_csv(&self) -> String {
        let rows: Vec<(&str, String, &MetricReport, f64)> = self
            .runs
            .iter()
            .map(|r| (r.row.label(), r.seed.to_string(), &r.report, r.seed_rank))
            .collect();
        table(true, &rows)
    }
}

fn table(with_seed: bool, rows: &[(&str, String, &MetricReport, f64)]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let mut s = String::from(if with_seed { "row,seed" } else { "row" });
    for e in &first.2.entries {
        s.push_str(&format!(",{}_{}", e.task, e.metric));
    }
    s.push_str(",mean_rank\n");
    for (label, seed, report, rank) in rows {
        s.push_str(label);
        if with_seed {
            s.push_str(&format!(",{seed}"));
        }
        for e in &report.entries {
            s.push_str(&format!(",{:?}", e.value));
        }
        s.push_str(&format!(",{rank:?}\n"));
    }
    s
}

/// Entry-wise mean of reports over the same tasks.
pub fn average_reports(reports: &[MetricReport]) -> Result<MetricReport> {
    ensure!(!reports.is_empty(), "nothing to average");
    let n = reports.len() as f64;
    let entries = reports[0]
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut sum = 0.0;
            for r in reports {
                let x = r.entries.get(i).filter(|x| x.task == e.task && x.metric == e.metric);
                let x = x.ok_or_else(|| Error::Validation("reports cover different tasks".into()))?;
                sum += x.value;
            }
            Ok(MetricEntry {
                task: e.task.clone(),
                metric: e.metric,
                value: sum / n,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        protocol: reports[0].protocol.clone(),
        entries,
    })
}

/// Trains every `row` under every seed and writes per-run outputs to
/// `out_dir/<row>/seed<k>/` plus a comparison table.
pub fn run_ablation(
    base: &TrainConfig,
    data: &LoadedData,
    out_dir: &Path,
    rows: &[AblationRow],
    seeds: &[u64],
) -> Result<AblationSummary> {
    ensure!(!rows.is_empty() && !seeds.is_empty(), "ablation needs rows and seeds");
    let mut runs = Vec::new();
    for &seed in seeds {
        let mut reports = Vec::new();
        for &row in rows {
            let cfg = TrainConfig {
                seed,
                ..base.for_row(row)
            };
            let dir = out_dir.join(row_dir(row)).join(format!("seed{seed}"));
            let outcome = train_loaded(&cfg, data, &dir, None)?;
            reports.push((row, outcome.report));
        }
        let only: Vec<MetricReport> = reports.iter().map(|(_, r)| r.clone()).collect();
        let ranks = mean_ranks(&only)?;
        for ((row, report), seed_rank) in reports.into_iter().zip(ranks) {
            runs.push(AblationRun {
                row,
                seed,
                report,
                seed_rank,
            });
        }
    }
    let mut averaged = Vec::new();
    for &row in rows {
        let reps: Vec<MetricReport> = runs
            .iter()
            .filter(|r| r.row == row)
            .map(|r| r.report.clone())
            .collect();
        averaged.push((row, average_reports(&reps)?));
    }
    let only: Vec<MetricReport> = averaged.iter().map(|(_, r)| r.clone()).collect();
    let summary = AblationSummary {
        runs,
        averaged_rank: mean_ranks(&only)?,
        averaged,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (file, text) in [(ABLATION_FILE, summary.to_csv()), (ABLATION_RUNS_FILE, summary.runs_csv())] {
        let path = out_dir.join(file);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(summary)
}

fn row_dir(row: AblationRow) -> &'static str {
    match row {
        AblationRow::Baseline => "baseline",
        AblationRow::WithTae => "tae",
        AblationRow::WithTke => "tke",
        AblationRow::Full => "tc",
    }
}

/// Affinity statistics of a trained prototype bank.
#[derive(Clone, Debug)]
pub struct PrototypeInspection {
    /// Row `t`: mean affinity over all tokens of task `t`'s features.
    pub mean_affinity: Vec<Vec<f64>>,
    /// The prototype matrix `V[T, d]`.
    pub slots: Tensor,
    /// Cross-attention weights of the last block for the first sample of
    /// each task, averaged over heads: `[T, hw, hw]`.
    pub attention: Option<Tensor>,
}

impl PrototypeInspection {
    /// Tasks whose mean affinity peaks at their own prototype.
    pub fn argmax_matches(&self) -> usize {
        self.mean_affinity
            .iter()
            .enumerate()
            .filter(|(t, row)| argmax(row) == *t)
            .count()
    }

    pub fn affinity_csv(&self, task_names: &[&str]) -> String {
        let mut s = String::from("task");
        for n in task_names {
            s.push_str(&format!(",{n}"));
        }
        s.push('\n');
        for (t, row) in self.mean_affinity.iter().enumerate() {
            s.push_str(task_names[t]);
            for v in row {
                s.push_str(&format!(",{v:?}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn slots_csv(&self, task_names: &[&str]) -> String {
        let d = self.slots.shape()[1];
        let mut s = String::from("task");
        for j in 0..d {
            s.push_str(&format!(",v{j}"));
        }
        s.push('\n');
        for (t, row) in self.slots.data().chunks(d).enumerate() {
            s.push_str(task_names[t]);
            for v in row {
                s.push_str(&format!(",{v:?}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn attention_csv(&self, task_names: &[&str]) -> Option<String> {
        let a = self.attention.as_ref()?;
        let (n, m) = (a.shape()[1], a.shape()[2]);
        let mut s = String::from("task,query,key,weight\n");
        for (t, block) in a.data().chunks(n * m).enumerate() {
            for q in 0..n {
                for k in 0..m {
                    s.push_str(&format!("{},{q},{k},{:?}\n", task_names[t], block[q * m + k]));
                }
            }
        }
        Some(s)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode affinities over `data`, averaged per task.
pub fn inspect_prototype(model: &MultiTaskModel, data: &PartialLabelBatch, batch_size: usize) -> Result<PrototypeInspection> {
    let proto = model
        .prototype
        .as_ref()
        .ok_or_else(|| Error::Validation("model has no prototype bank".into()))?;
    ensure!(!data.is_empty() && batch_size >= 1, "nothing to inspect");
    let t_count = model.task_count();
    let mut sums = vec![vec![0.0; t_count]; t_count];
    let mut counts = vec![0usize; t_count];
    let mut attention = None;
    let mut start = 0;
    while start < data.len() {
        let idx: Vec<usize> = (start..(start + batch_size).min(data.len())).collect();
        let batch = data.select(&idx);
        let pass = model.forward(&batch.images, false)?;
        let a = pass.affinity.expect("prototype models produce affinities");
        let a = pass.ctx.graph.value(a);
        let (hw, b) = (a.shape()[1], batch.len());
        for (row, chunk) in a.data().chunks(hw * t_count).enumerate() {
            let task = row / b;
            for tok in chunk.chunks(t_count) {
                for (s, v) in sums[task].iter_mut().zip(tok) {
                    *s += v;
                }
            }
            counts[task] += hw;
        }
        if attention.is_none() {
            if let Some(tr) = pass.traces.last() {
                attention = Some(first_sample_attention(pass.ctx.graph.value(tr.cross_weights), t_count, b)?);
            }
        }
        start += batch_size;
    }
    let mean_affinity = sums
        .into_iter()
        .zip(counts)
        .map(|(row, n)| row.into_iter().map(|s| s / n as f64).collect())
        .collect();
    Ok(PrototypeInspection {
        mean_affinity,
        slots: model.store.get(proto.slots).clone(),
        attention,
    })
}

/// Head-averaged weights `[T·B·H, n, m]` → `[T, n, m]` for sample 0 of each task.
fn first_sample_attention(w: &Tensor, tasks: usize, batch: usize) -> Result<Tensor> {
    let s = w.shape();
    let groups = tasks * batch;
    ensure!(s[0] % groups == 0, "attention groups {} vs {groups} sequences", s[0]);
    let heads = s[0] / groups;
    let per = s[1] * s[2];
    let mut out = vec![0.0; tasks * per];
    for t in 0..tasks {
        let seq = t * batch;
        for h in 0..heads {
            let src = &w.data()[(seq * heads + h) * per..(seq * heads + h + 1) * per];
            for (o, v) in out[t * per..(t + 1) * per].iter_mut().zip(src) {
                *o += v / heads as f64;
            }
        }
    }
    Tensor::new(&[tasks, s[1], s[2]], out)
}
