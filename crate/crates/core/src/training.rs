//! Masked multi-task loss, the total objective, Adam, and the training loop.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{save_checkpoint, Checkpoint, NamedTensor, RngState};
use crate::config::TrainConfig;
use crate::error::{ensure, Error, Result};
use crate::evaluation::{evaluate, MetricReport};
use crate::model::{ForwardPass, MultiTaskModel};
use crate::nn::{update_running_stats, ParamKind, ParamStore};
use crate::prototype::{akg_loss, tc_loss, tke_loss};
use crate::synthdata::{load_split, read_manifest, DatasetManifest, Label, PartialLabelBatch, Split, TaskKind, TaskSpec};
use crate::tensor::Tensor;

/// Sum over tasks of each task's mean loss over its labeled samples.
///
/// Categorical tasks use pixel cross-entropy on `[B,C,H,W]` logits,
/// regression tasks mean absolute error. Tasks without labels add nothing.
pub fn supervised_loss(
    g: &mut Graph,
    predictions: &[Var],
    batch: &PartialLabelBatch,
    tasks: &[TaskSpec],
) -> Result<Var> {
    ensure!(
        predictions.len() == tasks.len() && batch.labels.len() == tasks.len(),
        "need one prediction and label set per task"
    );
    let b = batch.len();
    let mut terms = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let labeled: Vec<usize> = (0..b).filter(|&i| batch.labels[t][i].is_some()).collect();
        if labeled.is_empty() {
            continue;
        }
        let s = g.shape(predictions[t]).to_vec();
        ensure!(s[0] == b, "prediction batch {} vs labels {b}", s[0]);
        let (c, hw) = (s[1], s[2] * s[3]);
        let n = labeled.len() as f64;
        match task.kind {
            TaskKind::Categorical => {
                let nhwc = g.permute(predictions[t], &[0, 2, 3, 1]);
                let rows = g.reshape(nhwc, &[b * hw, c]);
                let mut targets = vec![0usize; b * hw];
                let mut weights = vec![0.0; b * hw];
                let w = 1.0 / (n * hw as f64);
                for &i in &labeled {
                    let Some(Label::Classes(cls)) = &batch.labels[t][i] else {
                        return Err(Error::Validation(format!("task {t} expects class labels")));
                    };
                    ensure!(cls.len() == hw, "label size mismatch for task {t}");
                    for (p, &k) in cls.iter().enumerate() {
                        ensure!((k as usize) < c, "class {k} out of range for task {t}");
                        targets[i * hw + p] = k as usize;
                        weights[i * hw + p] = w;
                    }
                }
                terms.push(g.softmax_cross_entropy(rows, targets, weights));
            }
            TaskKind::Regression => {
                let per = c * hw;
                let mut target = vec![0.0; b * per];
                let mut weights = vec![0.0; b * per];
                let w = 1.0 / (n * per as f64);
                for &i in &labeled {
                    let Some(Label::Values(v)) = &batch.labels[t][i] else {
                        return Err(Error::Validation(format!("task {t} expects real labels")));
                    };
                    ensure!(v.numel() == per, "label size mismatch for task {t}");
                    target[i * per..(i + 1) * per].copy_from_slice(v.data());
                    weights[i * per..(i + 1) * per].fill(w);
                }
                let target = g.constant(Tensor::new(&s, target)?);
                let diff = g.sub(predictions[t], target);
                let abs = g.abs(diff);
                terms.push(g.weighted_sum(abs, weights));
            }
        }
    }
    ensure!(!terms.is_empty(), "batch has no labeled task");
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    Ok(total)
}

/// `L_MTL + λ1·L_tae + λ2·L_akg`; absent or zero-weighted terms are left out.
pub fn total_loss(
    g: &mut Graph,
    mtl: Var,
    tae: Option<Var>,
    akg: Option<Var>,
    lambda_tae: f64,
    lambda_akg: f64,
) -> Var {
    let mut total = mtl;
    for (term, lambda) in [(tae, lambda_tae), (akg, lambda_akg)] {
        if let Some(x) = term {
            if lambda != 0.0 {
                let w = g.scale(x, lambda);
                total = g.add(total, w);
            }
        }
    }
    total
}

pub struct LossTerms {
    pub total: Var,
    pub mtl: Var,
    /// Reconstruction plus codebook auxiliary loss.
    pub tae: Option<Var>,
    pub tke: Option<Var>,
    pub tc: Option<Var>,
    pub akg: Option<Var>,
    pub tke_skipped: bool,
}

pub fn compute_losses(
    model: &MultiTaskModel,
    pass: &mut ForwardPass,
    batch: &PartialLabelBatch,
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    let mtl = supervised_loss(&mut pass.ctx.graph, &pass.predictions, batch, &model.tasks)?;
    let tae = pass.vq.as_ref().map(|v| v.loss);
    let mut tke = None;
    let mut tke_skipped = false;
    if cfg.use_tke {
        if let Some(a) = pass.affinity {
            let targets: Vec<Option<usize>> = (0..model.task_count())
                .flat_map(|t| batch.mask.iter().map(move |m| m[t].then_some(t)))
                .collect();
            let l = tke_loss(&mut pass.ctx.graph, a, &targets)?;
            tke_skipped = l.skipped;
            tke = Some(l.value);
        }
    }
    let mut tc = None;
    if cfg.use_tc {
        if let Some(tokens) = pass.tokens {
            let per_task: Vec<Var> = (0..model.task_count())
                .map(|t| pass.task_slice(tokens, t))
                .collect();
            tc = Some(tc_loss(&mut pass.ctx.graph, &per_task, cfg.margin, cfg.tc_literal_sign)?);
        }
    }
    let g = &mut pass.ctx.graph;
    let akg = match (tke, tc) {
        (Some(a), Some(b)) => Some(akg_loss(g, a, b)),
        (a, b) => a.or(b),
    };
    let total = total_loss(g, mtl, tae, akg, cfg.lambda_tae, cfg.lambda_akg);
    Ok(LossTerms {
        total,
        mtl,
        tae,
        tke,
        tc,
        akg,
        tke_skipped,
    })
}

/// Adam moments for every stored tensor (buffers keep zero moments).
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every weight that has a gradient and is not in `skip`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], skip: &[usize]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = &grads[i] else { continue };
            if store.entry(id).kind != ParamKind::Weight || skip.contains(&i) {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepLog {
    pub total: f64,
    pub mtl: f64,
    pub tae: f64,
    pub tke: f64,
    pub tc: f64,
    pub akg: f64,
    pub max_grad: f64,
    pub dead_slots: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Step-averaged losses; `dead_slots` is from the last step.
    pub losses: StepLog,
    pub eval: Option<MetricReport>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: MultiTaskModel,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, tasks: &[TaskSpec], image_hw: (usize, usize)) -> Result<Trainer> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = MultiTaskModel::new(cfg, tasks, image_hw, &mut rng)?;
        let adam = Adam::new(&model.store, cfg);
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            adam,
            rng,
            epoch: 0,
        })
    }

    pub fn for_manifest(cfg: &TrainConfig, manifest: &DatasetManifest) -> Result<Trainer> {
        Trainer::new(cfg, &manifest.tasks, (manifest.height, manifest.width))
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint, tasks: &[TaskSpec], image_hw: (usize, usize)) -> Result<Trainer> {
        let cfg = TrainConfig::parse(Path::new("<checkpoint>"), &ckpt.config_text)?;
        let mut t = Trainer::new(&cfg, tasks, image_hw)?;
        let store = &mut t.model.store;
        ensure!(
            ckpt.params.len() == store.len(),
            "checkpoint has {} tensors, model has {}",
            ckpt.params.len(),
            store.len()
        );
        for (i, p) in ckpt.params.iter().enumerate() {
            let id = store.find(&p.name).ok_or_else(|| {
                Error::Validation(format!("checkpoint tensor '{}' not in model", p.name))
            })?;
            ensure!(id.index() == i, "checkpoint tensor '{}' out of order", p.name);
            let e = store.entry(id);
            ensure!(
                e.kind == p.kind && e.value.shape() == p.value.shape(),
                "checkpoint tensor '{}' does not match the model",
                p.name
            );
            *store.get_mut(id) = p.value.clone();
            t.adam.m[i] = p.m.clone();
            t.adam.v[i] = p.v.clone();
        }
        t.adam.step = ckpt.adam_step;
        t.epoch = ckpt.epoch as usize;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        t.rng = rng;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params = self
            .model
            .store
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| NamedTensor {
                name: e.name.clone(),
                kind: e.kind,
                value: e.value.clone(),
                m: self.adam.m[i].clone(),
                v: self.adam.v[i].clone(),
            })
            .collect();
        Checkpoint {
            config_text: self.cfg.to_text(),
            epoch: self.epoch as u64,
            adam_step: self.adam.step,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            params,
        }
    }

    /// Forward, backward and one optimizer update on `batch`.
    pub fn step(&mut self, batch: &PartialLabelBatch) -> Result<StepLog> {
        let (log, grads, stats) = {
            let mut pass = self.model.forward(&batch.images, true)?;
            let terms = compute_losses(&self.model, &mut pass, batch, &self.cfg)?;
            let g = &pass.ctx.graph;
            let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
            let mut log = StepLog {
                total: g.value(terms.total).item(),
                mtl: g.value(terms.mtl).item(),
                tae: val(terms.tae),
                tke: val(terms.tke),
                tc: val(terms.tc),
                akg: val(terms.akg),
                max_grad: 0.0,
                dead_slots: pass.vq.as_ref().map_or(0, |v| v.dead_slots),
            };
            let mut raw = g.backward(terms.total);
            let grads = pass.ctx.param_grads(&mut raw);
            let finite = grads.iter().flatten().all(Tensor::is_finite);
            log.max_grad = grads.iter().flatten().map(Tensor::max_abs).fold(0.0, f64::max);
            if !log.total.is_finite() || !finite {
                return Err(Error::NonFinite {
                    step: self.adam.step as usize + 1,
                    detail: format!(
                        "total={} mtl={} tae={} tke={} tc={} max|grad|={}",
                        log.total, log.mtl, log.tae, log.tke, log.tc, log.max_grad
                    ),
                });
            }
            (log, grads, std::mem::take(&mut pass.ctx.norm_stats))
        };
        let skip: Vec<usize> = match &self.model.prototype {
            Some(p) if p.frozen => vec![p.slots.index()],
            _ => Vec::new(),
        };
        self.adam.update(&mut self.model.store, &grads, &skip);
        update_running_stats(&mut self.model.store, &stats, self.cfg.bn_momentum);
        Ok(log)
    }

    /// One pass over `data` in a fresh random order; the last batch may be short.
    pub fn run_epoch(&mut self, data: &PartialLabelBatch) -> Result<EpochLog> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = StepLog::default();
        let mut steps = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let log = self.step(&data.select(chunk))?;
            sum.total += log.total;
            sum.mtl += log.mtl;
            sum.tae += log.tae;
            sum.tke += log.tke;
            sum.tc += log.tc;
            sum.akg += log.akg;
            sum.max_grad = sum.max_grad.max(log.max_grad);
            sum.dead_slots = log.dead_slots;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        for v in [
            &mut sum.total,
            &mut sum.mtl,
            &mut sum.tae,
            &mut sum.tke,
            &mut sum.tc,
            &mut sum.akg,
        ] {
            *v /= n;
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            losses: sum,
            eval: None,
        })
    }

    /// Evaluation on a frozen view of the model.
    pub fn evaluate(&self, data: &PartialLabelBatch, protocol: &str) -> Result<MetricReport> {
        let mut model = self.model.clone();
        if let Some(p) = model.prototype.as_mut() {
            p.frozen = self.cfg.freeze_prototype_at_eval;
        }
        evaluate(&model, data, self.cfg.batch_size.max(16), protocol)
    }
}

pub fn metrics_csv(log: &[EpochLog]) -> String {
    let metric_cols: Vec<String> = log
        .iter()
        .find_map(|e| e.eval.as_ref())
        .map(|r| {
            r.entries
                .iter()
                .map(|e| format!("{}_{}", e.task, e.metric))
                .collect()
        })
        .unwrap_or_default();
    let mut s = String::from("epoch,total,mtl,tae,akg,tke,tc,max_grad,dead_slots");
    for c in &metric_cols {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for e in log {
        let l = &e.losses;
        s.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{}",
            e.epoch, l.total, l.mtl, l.tae, l.akg, l.tke, l.tc, l.max_grad, l.dead_slots
        ));
        for i in 0..metric_cols.len() {
            s.push(',');
            if let Some(r) = &e.eval {
                s.push_str(&format!("{:?}", r.entries[i].value));
            }
        }
        s.push('\n');
    }
    s
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<EpochLog>,
    pub report: MetricReport,
    pub checkpoint_path: PathBuf,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.csv";

/// A dataset directory loaded into memory.
pub struct LoadedData {
    pub manifest: DatasetManifest,
    pub train: PartialLabelBatch,
    pub test: PartialLabelBatch,
}

impl LoadedData {
    pub fn load(dir: &Path) -> Result<LoadedData> {
        let manifest = read_manifest(dir)?;
        Ok(LoadedData {
            train: load_split(dir, &manifest, Split::Train)?,
            test: load_split(dir, &manifest, Split::Test)?,
            manifest,
        })
    }
}

/// Trains on `data_dir` to `cfg.epochs`, optionally resuming from a
/// checkpoint, and writes the checkpoint, metrics log and final report to `out_dir`.
pub fn train(cfg: &TrainConfig, data_dir: &Path, out_dir: &Path, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    train_loaded(cfg, &LoadedData::load(data_dir)?, out_dir, resume)
}

pub fn train_loaded(cfg: &TrainConfig, data: &LoadedData, out_dir: &Path, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = &data.manifest;
    if let Some(p) = cfg.protocol {
        ensure!(
            p == manifest.protocol,
            "config expects protocol {p}, dataset uses {}",
            manifest.protocol
        );
    }
    let protocol = manifest.protocol.to_string();
    let mut trainer = match resume {
        Some(c) => {
            let mut t = Trainer::from_checkpoint(c, &manifest.tasks, (manifest.height, manifest.width))?;
            // the schedule length may be extended on resume
            t.cfg.epochs = cfg.epochs;
            t
        }
        None => Trainer::for_manifest(cfg, manifest)?,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut log = Vec::new();
    while trainer.epoch < trainer.cfg.epochs {
        let mut e = trainer.run_epoch(&data.train)?;
        let every = trainer.cfg.eval_every;
        if every > 0 && e.epoch % every == 0 && !data.test.is_empty() {
            e.eval = Some(trainer.evaluate(&data.test, &protocol)?);
        }
        log.push(e);
    }
    let report = if data.test.is_empty() {
        MetricReport {
            protocol: protocol.clone(),
            entries: Vec::new(),
        }
    } else {
        trainer.evaluate(&data.test, &protocol)?
    };
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&trainer.checkpoint(), &checkpoint_path)?;
    let metrics = out_dir.join(METRICS_FILE);
    fs::write(&metrics, metrics_csv(&log)).map_err(|e| Error::io(&metrics, e))?;
    let rp = out_dir.join(REPORT_FILE);
    fs::write(&rp, report.to_csv()).map_err(|e| Error::io(&rp, e))?;
    Ok(TrainOutcome {
        trainer,
        log,
        report,
        checkpoint_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::standard_tasks;

    fn batch_with(mask: Vec<Vec<bool>>, tasks: &[TaskSpec]) -> PartialLabelBatch {
        let b = mask.len();
        let hw = 4;
        let labels = tasks
            .iter()
            .enumerate()
            .map(|(t, spec)| {
                (0..b)
                    .map(|i| {
                        mask[i][t].then(|| match spec.kind {
                            TaskKind::Categorical => Label::Classes(vec![1; hw]),
                            TaskKind::Regression => Label::Values(Tensor::full(&[spec.channels, 2, 2], 0.5)),
                        })
                    })
                    .collect()
            })
            .collect();
        PartialLabelBatch {
            images: Tensor::zeros(&[b, 3, 2, 2]),
            labels,
            mask,
        }
    }

    #[test]
    fn supervised_examples() {
        let tasks = standard_tasks(3).unwrap();
        let batch = batch_with(vec![vec![true, true, false]], &tasks);
        let mut g = Graph::new();
        // class 1 gets a huge logit, so cross-entropy underflows to 0
        let mut logits = vec![-800.0; 16];
        logits[4..8].fill(800.0);
        let seg = g.constant(Tensor::new(&[1, 4, 2, 2], logits).unwrap());
        let depth = g.constant(Tensor::full(&[1, 1, 2, 2], 0.8));
        let normal = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let l = supervised_loss(&mut g, &[seg, depth, normal], &batch, &tasks).unwrap();
        assert!((g.value(l).item() - 0.3).abs() < 1e-12);
        let exact = g.constant(Tensor::full(&[1, 1, 2, 2], 0.5));
        let l = supervised_loss(&mut g, &[seg, exact, normal], &batch, &tasks).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let none = batch_with(vec![vec![false; 3]], &tasks);
        assert!(supervised_loss(&mut g, &[seg, depth, normal], &none, &tasks).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let mut g = Graph::new();
        let (a, b, c) = (
            g.constant(Tensor::scalar(1.0)),
            g.constant(Tensor::scalar(0.2)),
            g.constant(Tensor::scalar(0.5)),
        );
        let t = total_loss(&mut g, a, Some(b), Some(c), 1.0, 1.0);
        assert!((g.value(t).item() - 1.7).abs() < 1e-15);
        let t = total_loss(&mut g, a, Some(b), Some(c), 0.0, 0.0);
        assert_eq!(t, a);
    }

    #[test]
    fn adam_skips_listed_params() {
        let mut store = ParamStore::new();
        let a = store.weight("a", Tensor::full(&[2], 1.0));
        let b = store.weight("b", Tensor::full(&[2], 1.0));
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(&store, &cfg);
        let g = Some(Tensor::full(&[2], 0.5));
        adam.update(&mut store, &[g.clone(), g], &[b.index()]);
        // the first Adam step moves each coordinate by lr against the gradient sign
        assert!((store.get(a).data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert_eq!(store.get(b).data(), &[1.0, 1.0]);
    }
}
