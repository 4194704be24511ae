//! Dense-prediction metrics with mergeable accumulators, metric reports and
//! run comparison.
//!
//! Every accumulator sums integers (counts, or values in fixed point), so
//! merging shards or reordering samples gives bit-identical results.

use std::fmt;

use crate::error::{ensure, Error, Result};
use crate::model::MultiTaskModel;
use crate::synthdata::{Label, PartialLabelBatch, TaskRole, TaskSpec};
use crate::tensor::Tensor;

/// Thresholds `k / 255` for `k = 0..255`.
pub const F_THRESHOLDS: usize = 255;
/// Fixed-point scale for real-valued sums.
const FIXED_SCALE: f64 = (1u64 << 40) as f64;
const NORMAL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    MeanIou,
    AbsErr,
    MeanAngularErr,
    MaxF,
    OdsF,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::MeanIou => "mIoU",
            MetricKind::AbsErr => "absErr",
            MetricKind::MeanAngularErr => "mErr",
            MetricKind::MaxF => "maxF",
            MetricKind::OdsF => "odsF",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, MetricKind::MeanIou | MetricKind::MaxF | MetricKind::OdsF)
    }

    pub fn for_role(role: TaskRole) -> MetricKind {
        match role {
            TaskRole::Segmentation => MetricKind::MeanIou,
            TaskRole::Depth => MetricKind::AbsErr,
            TaskRole::Normal => MetricKind::MeanAngularErr,
            TaskRole::Saliency => MetricKind::MaxF,
            TaskRole::Boundary => MetricKind::OdsF,
        }
    }

    pub fn from_name(s: &str) -> Option<MetricKind> {
        [
            MetricKind::MeanIou,
            MetricKind::AbsErr,
            MetricKind::MeanAngularErr,
            MetricKind::MaxF,
            MetricKind::OdsF,
        ]
        .into_iter()
        .find(|m| m.name() == s)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    /// `counts[label * classes + pred]`.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[u32], label: &[u32]) -> Result<()> {
        ensure!(pred.len() == label.len(), "prediction and label sizes differ");
        for (&p, &l) in pred.iter().zip(label) {
            ensure!(
                (p as usize) < self.classes && (l as usize) < self.classes,
                "class out of range"
            );
            self.counts[l as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Mean IoU over classes that occur in the labels.
    pub fn miou(&self) -> Result<f64> {
        let c = self.classes;
        let mut sum = 0.0;
        let mut present = 0;
        for k in 0..c {
            let tp = self.counts[k * c + k];
            let label_total: u64 = self.counts[k * c..(k + 1) * c].iter().sum();
            if label_total == 0 {
                continue;
            }
            let pred_total: u64 = (0..c).map(|l| self.counts[l * c + k]).sum();
            sum += tp as f64 / (label_total + pred_total - tp) as f64;
            present += 1;
        }
        ensure!(present > 0, "mIoU of an empty evaluation set");
        Ok(sum / present as f64)
    }
}

/// Order-independent mean of real values kept in 2⁻⁴⁰ fixed point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MeanAccumulator {
    sum: i128,
    count: u64,
}

impl MeanAccumulator {
    pub fn add(&mut self, v: f64) {
        self.sum += (v * FIXED_SCALE).round() as i128;
        self.count += 1;
    }

    pub fn merge(&mut self, other: &MeanAccumulator) {
        self.sum += other.sum;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> Result<f64> {
        ensure!(self.count > 0, "mean of an empty evaluation set");
        Ok(self.sum as f64 / FIXED_SCALE / self.count as f64)
    }
}

/// Positive/negative pixel histograms over the threshold grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FMeasureAccumulator {
    pos: Vec<u64>,
    neg: Vec<u64>,
}

impl Default for FMeasureAccumulator {
    fn default() -> Self {
        Self {
            pos: vec![0; F_THRESHOLDS],
            neg: vec![0; F_THRESHOLDS],
        }
    }
}

/// Largest `k` with `p ≥ k / 255`.
fn threshold_bin(p: f64) -> usize {
    let top = F_THRESHOLDS - 1;
    let mut k = ((p * 255.0).floor().max(0.0) as usize).min(top);
    while k < top && p >= (k + 1) as f64 / 255.0 {
        k += 1;
    }
    while k > 0 && p < k as f64 / 255.0 {
        k -= 1;
    }
    k
}

impl FMeasureAccumulator {
    pub fn add(&mut self, probs: &[f64], labels: &[u32]) -> Result<()> {
        ensure!(probs.len() == labels.len(), "prediction and label sizes differ");
        for (&p, &l) in probs.iter().zip(labels) {
            ensure!((0.0..=1.0).contains(&p), "probability {p} outside [0, 1]");
            let k = threshold_bin(p);
            match l {
                0 => self.neg[k] += 1,
                1 => self.pos[k] += 1,
                _ => return Err(Error::Validation(format!("binary label expected, got {l}"))),
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &FMeasureAccumulator) {
        for (a, b) in self.pos.iter_mut().zip(&other.pos) {
            *a += b;
        }
        for (a, b) in self.neg.iter_mut().zip(&other.neg) {
            *a += b;
        }
    }

    /// F1 at every threshold, lowest threshold first.
    pub fn curve(&self) -> Result<Vec<f64>> {
        let total_pos: u64 = self.pos.iter().sum();
        ensure!(total_pos > 0, "F-measure undefined: no positive labels");
        let mut out = vec![0.0; F_THRESHOLDS];
        let (mut tp, mut fp) = (0u64, 0u64);
        for k in (0..F_THRESHOLDS).rev() {
            tp += self.pos[k];
            fp += self.neg[k];
            let fnn = total_pos - tp;
            out[k] = 2.0 * tp as f64 / (2 * tp + fp + fnn) as f64;
        }
        Ok(out)
    }

    /// Best F1 over the shared threshold grid.
    pub fn best(&self) -> Result<f64> {
        Ok(self.curve()?.into_iter().fold(0.0, f64::max))
    }
}

pub fn miou(pred: &[u32], label: &[u32], classes: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, label)?;
    cm.miou()
}

fn check_same(pred: &Tensor, label: &Tensor) -> Result<()> {
    ensure!(
        pred.shape() == label.shape(),
        "prediction {:?} and label {:?} differ",
        pred.shape(),
        label.shape()
    );
    Ok(())
}

pub fn abs_err(pred: &Tensor, label: &Tensor) -> Result<f64> {
    check_same(pred, label)?;
    let mut acc = MeanAccumulator::default();
    for (p, l) in pred.data().iter().zip(label.data()) {
        acc.add((p - l).abs());
    }
    acc.mean()
}

/// Angles in degrees between per-pixel vectors of `[B,3,H,W]` fields.
pub fn angular_errors(pred: &Tensor, label: &Tensor) -> Result<Vec<f64>> {
    check_same(pred, label)?;
    let s = pred.shape();
    ensure!(s.len() == 4 && s[1] == 3, "normal fields must be [B,3,H,W], got {s:?}");
    let hw = s[2] * s[3];
    let (p, l) = (pred.data(), label.data());
    let mut out = Vec::with_capacity(s[0] * hw);
    for b in 0..s[0] {
        let base = b * 3 * hw;
        for i in 0..hw {
            let pv = [p[base + i], p[base + hw + i], p[base + 2 * hw + i]];
            let lv = [l[base + i], l[base + hw + i], l[base + 2 * hw + i]];
            let pn = pv.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORMAL_EPS);
            let ln = lv.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORMAL_EPS);
            let dot: f64 = (0..3).map(|c| (pv[c] / pn) * (lv[c] / ln)).sum();
            out.push(dot.clamp(-1.0, 1.0).acos().to_degrees());
        }
    }
    Ok(out)
}

pub fn mean_angular_error(pred: &Tensor, label: &Tensor) -> Result<f64> {
    let mut acc = MeanAccumulator::default();
    for a in angular_errors(pred, label)? {
        acc.add(a);
    }
    acc.mean()
}

pub fn max_f_measure(probs: &[f64], labels: &[u32]) -> Result<f64> {
    let mut acc = FMeasureAccumulator::default();
    acc.add(probs, labels)?;
    acc.best()
}

/// One threshold chosen for the whole set; pixels match exactly, with no
/// boundary-distance tolerance.
pub fn ods_f_measure(probs: &[f64], labels: &[u32]) -> Result<f64> {
    max_f_measure(probs, labels)
}

/// Mean over images of each image's own best F1; images without positives are skipped.
pub fn ois_f_measure(images: &[(&[f64], &[u32])]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for (p, l) in images {
        if l.iter().any(|&v| v == 1) {
            sum += max_f_measure(p, l)?;
            n += 1;
        }
    }
    ensure!(n > 0, "F-measure undefined: no positive labels");
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricAccumulator {
    Confusion(ConfusionMatrix),
    Mean(MeanAccumulator),
    FMeasure(FMeasureAccumulator),
}

/// Accumulates one task's metric over batches of predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetric {
    pub task: TaskSpec,
    pub kind: MetricKind,
    pub acc: MetricAccumulator,
}

impl TaskMetric {
    pub fn new(task: &TaskSpec) -> Self {
        let kind = MetricKind::for_role(task.role);
        let acc = match kind {
            MetricKind::MeanIou => MetricAccumulator::Confusion(ConfusionMatrix::new(task.classes)),
            MetricKind::AbsErr | MetricKind::MeanAngularErr => {
                MetricAccumulator::Mean(MeanAccumulator::default())
            }
            MetricKind::MaxF | MetricKind::OdsF => {
                MetricAccumulator::FMeasure(FMeasureAccumulator::default())
            }
        };
        Self {
            task: task.clone(),
            kind,
            acc,
        }
    }

    /// Adds sample `b` of a `[B,C,H,W]` head output against its label.
    pub fn add(&mut self, output: &Tensor, b: usize, label: &Label) -> Result<()> {
        let s = output.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let o = &output.data()[b * c * hw..(b + 1) * c * hw];
        match (&mut self.acc, label) {
            (MetricAccumulator::Confusion(cm), Label::Classes(l)) => {
                let pred: Vec<u32> = (0..hw)
                    .map(|i| {
                        let mut best = 0;
                        for k in 1..c {
                            if o[k * hw + i] > o[best * hw + i] {
                                best = k;
                            }
                        }
                        best as u32
                    })
                    .collect();
                cm.add(&pred, l)
            }
            (MetricAccumulator::FMeasure(f), Label::Classes(l)) => {
                ensure!(c == 2, "binary task head must emit 2 logits, got {c}");
                let probs: Vec<f64> = (0..hw)
                    .map(|i| {
                        let (z0, z1) = (o[i], o[hw + i]);
                        1.0 / (1.0 + (z0 - z1).exp())
                    })
                    .collect();
                f.add(&probs, l)
            }
            (MetricAccumulator::Mean(m), Label::Values(l)) => {
                ensure!(l.numel() == c * hw, "label size does not match prediction");
                if self.kind == MetricKind::AbsErr {
                    for (p, q) in o.iter().zip(l.data()) {
                        m.add((p - q).abs());
                    }
                } else {
                    let shape = [1, c, s[2], s[3]];
                    let pt = Tensor::new(&shape, o.to_vec())?;
                    let lt = Tensor::new(&shape, l.data().to_vec())?;
                    for a in angular_errors(&pt, &lt)? {
                        m.add(a);
                    }
                }
                Ok(())
            }
            _ => Err(Error::Validation(format!(
                "label kind does not match task {}",
                self.task.role.name()
            ))),
        }
    }

    pub fn merge(&mut self, other: &TaskMetric) -> Result<()> {
        match (&mut self.acc, &other.acc) {
            (MetricAccumulator::Confusion(a), MetricAccumulator::Confusion(b)) => a.merge(b),
            (MetricAccumulator::Mean(a), MetricAccumulator::Mean(b)) => a.merge(b),
            (MetricAccumulator::FMeasure(a), MetricAccumulator::FMeasure(b)) => a.merge(b),
            _ => return Err(Error::Validation("cannot merge different metrics".into())),
        }
        Ok(())
    }

    pub fn value(&self) -> Result<f64> {
        match &self.acc {
            MetricAccumulator::Confusion(cm) => cm.miou(),
            MetricAccumulator::Mean(m) => m.mean(),
            MetricAccumulator::FMeasure(f) => f.best(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricEntry {
    pub task: String,
    pub metric: MetricKind,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub protocol: String,
    pub entries: Vec<MetricEntry>,
}

pub const REPORT_NOTE: &str =
    "# odsF/maxF use pixel-exact matching with no boundary tolerance; mIoU is dataset-wide";

impl MetricReport {
    pub fn get(&self, task: &str) -> Option<&MetricEntry> {
        self.entries.iter().find(|e| e.task == task)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_NOTE}\ntask,metric,value,protocol\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{:?},{}\n", e.task, e.metric, e.value, self.protocol));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<MetricReport> {
        let mut entries = Vec::new();
        let mut protocol = String::new();
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            if line.starts_with("task,") {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            ensure!(f.len() == 4, "bad report row '{line}'");
            let metric = MetricKind::from_name(f[1])
                .ok_or_else(|| Error::Validation(format!("unknown metric '{}'", f[1])))?;
            let value = f[2]
                .parse()
                .map_err(|_| Error::Validation(format!("bad value '{}'", f[2])))?;
            protocol = f[3].to_string();
            entries.push(MetricEntry {
                task: f[0].to_string(),
                metric,
                value,
            });
        }
        Ok(MetricReport { protocol, entries })
    }
}

/// Runs the model in eval mode over `data` in batches.
pub fn evaluate(
    model: &MultiTaskModel,
    data: &PartialLabelBatch,
    batch_size: usize,
    protocol: &str,
) -> Result<MetricReport> {
    ensure!(batch_size >= 1, "batch_size must be at least 1");
    let mut metrics: Vec<TaskMetric> = model.tasks.iter().map(TaskMetric::new).collect();
    let n = data.len();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let batch = data.select(&idx);
        let preds = model.predict(&batch.images)?;
        for (t, m) in metrics.iter_mut().enumerate() {
            for b in 0..batch.len() {
                if let Some(label) = &batch.labels[t][b] {
                    m.add(&preds[t], b, label)?;
                }
            }
        }
        start += batch_size;
    }
    let entries = metrics
        .iter()
        .map(|m| {
            Ok(MetricEntry {
                task: m.task.role.name().to_string(),
                metric: m.kind,
                value: m.value()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        protocol: protocol.to_string(),
        entries,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunComparison {
    /// Improvement of `b` over `a` per task: positive means `b` is better.
    pub deltas: Vec<MetricEntry>,
    /// Mean rank of `a` and `b` across tasks (1 is best).
    pub mean_rank: (f64, f64),
}

fn check_tasks(reports: &[&MetricReport]) -> Result<()> {
    let first = reports[0];
    for r in reports {
        ensure!(
            r.entries.len() == first.entries.len()
                && r
                    .entries
                    .iter()
                    .zip(&first.entries)
                    .all(|(x, y)| x.task == y.task && x.metric == y.metric),
            "reports cover different tasks"
        );
    }
    Ok(())
}

pub fn compare_runs(a: &MetricReport, b: &MetricReport) -> Result<RunComparison> {
    check_tasks(&[a, b])?;
    let deltas = a
        .entries
        .iter()
        .zip(&b.entries)
        .map(|(x, y)| MetricEntry {
            task: x.task.clone(),
            metric: x.metric,
            value: if x.metric.higher_is_better() {
                y.value - x.value
            } else {
                x.value - y.value
            },
        })
        .collect();
    let ranks = mean_ranks(&[a.clone(), b.clone()])?;
    Ok(RunComparison {
        deltas,
        mean_rank: (ranks[0], ranks[1]),
    })
}

/// Per-report mean over tasks of its rank among `reports`; ties share the average rank.
pub fn mean_ranks(reports: &[MetricReport]) -> Result<Vec<f64>> {
    ensure!(!reports.is_empty(), "no reports to rank");
    let refs: Vec<&MetricReport> = reports.iter().collect();
    check_tasks(&refs)?;
    let n = reports.len();
    let tasks = reports[0].entries.len();
    ensure!(tasks > 0, "reports have no tasks");
    let mut total = vec![0.0; n];
    for t in 0..tasks {
        let higher = reports[0].entries[t].metric.higher_is_better();
        let score = |i: usize| {
            let v = reports[i].entries[t].value;
            if higher {
                v
            } else {
                -v
            }
        };
        for (i, tot) in total.iter_mut().enumerate() {
            let better = (0..n).filter(|&j| score(j) > score(i)).count();
            let ties = (0..n).filter(|&j| score(j) == score(i)).count();
            *tot += better as f64 + (ties as f64 + 1.0) / 2.0;
        }
    }
    Ok(total.into_iter().map(|v| v / tasks as f64).collect())
}
