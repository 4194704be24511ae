use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use proto_mtl::config::{AblationRow, TrainConfig};
use proto_mtl::model::MultiTaskModel;
use proto_mtl::synthdata::{generate_dataset, GenConfig, PartialLabelBatch};
use proto_mtl::training::{compute_losses, supervised_loss, LoadedData, Trainer};
use proto_mtl::{Error, Tensor};

fn small_cfg() -> TrainConfig {
    TrainConfig {
        channels: 8,
        proto_dim: 8,
        heads: 2,
        codebook_size: 16,
        depth: 1,
        ..TrainConfig::default()
    }
}

fn data(dir: &Path, n: usize) -> LoadedData {
    let cfg = GenConfig {
        n_samples: n,
        n_test: 4,
        height: 16,
        width: 16,
        ..GenConfig::default()
    };
    generate_dataset(&cfg, dir).unwrap();
    LoadedData::load(dir).unwrap()
}

/// The batch with every label except task `keep`'s removed.
fn only_task(batch: &PartialLabelBatch, keep: usize) -> PartialLabelBatch {
    let mut b = batch.clone();
    for (t, labels) in b.labels.iter_mut().enumerate() {
        if t != keep {
            labels.iter_mut().for_each(|l| *l = None);
        }
    }
    for m in &mut b.mask {
        for (t, bit) in m.iter_mut().enumerate() {
            *bit = *bit && t == keep;
        }
    }
    b
}

#[test]
fn supervised_gradients_stay_within_the_labeled_task() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path(), 8);
    for row in [AblationRow::Baseline, AblationRow::Full] {
        let cfg = small_cfg().for_row(row);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = MultiTaskModel::new(&cfg, &d.manifest.tasks, (16, 16), &mut rng).unwrap();
        for t in 0..model.task_count() {
            // test samples carry every label
            let batch = only_task(&d.test, t);
            let mut pass = model.forward(&batch.images, true).unwrap();
            let loss = supervised_loss(&mut pass.ctx.graph, &pass.predictions, &batch, &model.tasks).unwrap();
            let mut grads = pass.ctx.graph.backward(loss);
            let pg = pass.ctx.param_grads(&mut grads);
            for (e, grad) in model.store.entries().iter().zip(&pg) {
                let other = (0..model.task_count())
                    .filter(|&o| o != t)
                    .any(|o| e.name.starts_with(&format!("decoder{o}.")) || e.name.starts_with(&format!("head{o}.")));
                if other {
                    let zero = grad.as_ref().map_or(true, |g| g.data().iter().all(|&v| v == 0.0));
                    assert!(zero, "{}: task {t} loss reached {}", row.label(), e.name);
                }
                if e.name.starts_with(&format!("head{t}.")) {
                    assert!(grad.as_ref().is_some_and(|g| g.max_abs() > 0.0), "{} got no gradient", e.name);
                }
            }
        }
    }
}

#[test]
fn lambda_switches_shape_the_objective() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path(), 8);
    let batch = d.train.select(&[0, 1, 2, 3]);

    // without the prototype losses V is trained through retrieval alone
    let cfg = TrainConfig {
        lambda_akg: 0.0,
        ..small_cfg()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = MultiTaskModel::new(&cfg, &d.manifest.tasks, (16, 16), &mut rng).unwrap();
    let v_id = model.prototype.as_ref().unwrap().slots;
    let grad_v = |total: bool| -> Tensor {
        let mut pass = model.forward(&batch.images, true).unwrap();
        let terms = compute_losses(&model, &mut pass, &batch, &cfg).unwrap();
        let target = if total { terms.total } else { terms.mtl };
        let mut g = pass.ctx.graph.backward(target);
        pass.ctx.param_grads(&mut g)[v_id.index()].clone().unwrap()
    };
    let (total, mtl) = (grad_v(true), grad_v(false));
    assert_eq!(total, mtl);
    assert!(mtl.max_abs() > 0.0);

    // the baseline row is the plain multi-task objective
    let cfg = small_cfg().for_row(AblationRow::Baseline);
    let model = MultiTaskModel::new(&cfg, &d.manifest.tasks, (16, 16), &mut rng).unwrap();
    assert!(model.vq.is_none() && model.prototype.is_none() && model.retrieval.is_none());
    assert!(model.store.entries().iter().all(|e| !e.name.starts_with("codebook") && !e.name.starts_with("retrieval")));
    let mut pass = model.forward(&batch.images, true).unwrap();
    let terms = compute_losses(&model, &mut pass, &batch, &cfg).unwrap();
    assert_eq!(terms.total, terms.mtl);
}

#[test]
fn early_training_loss_trends_down() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&GenConfig::default(), dir.path()).unwrap();
    let d = LoadedData::load(dir.path()).unwrap();
    let cfg = TrainConfig::default();
    let mut trainer = Trainer::for_manifest(&cfg, &d.manifest).unwrap();
    let mut losses = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut order: Vec<usize> = (0..d.train.len()).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
    for chunk in order.chunks(cfg.batch_size).take(50) {
        losses.push(trainer.step(&d.train.select(chunk)).unwrap().total);
    }
    let mut diffs: Vec<f64> = losses.windows(2).map(|w| w[1] - w[0]).collect();
    diffs.sort_by(f64::total_cmp);
    let median = (diffs[diffs.len() / 2 - 1] + diffs[diffs.len() / 2]) / 2.0;
    assert!(median < 0.0, "median step-to-step change {median}, losses {losses:?}");
}

#[test]
fn divergence_is_reported_with_losses() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path(), 8);
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..small_cfg()
    };
    let mut trainer = Trainer::for_manifest(&cfg, &d.manifest).unwrap();
    let batch = d.train.select(&[0, 1, 2, 3]);
    let mut err = None;
    for _ in 0..5 {
        if let Err(e) = trainer.step(&batch) {
            err = Some(e);
            break;
        }
    }
    match err {
        Some(Error::NonFinite { step, detail }) => {
            assert!(step >= 2);
            assert!(detail.contains("mtl=") && detail.contains("max|grad|="), "{detail}");
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn resume_rejects_mismatched_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path(), 8);
    let trainer = Trainer::for_manifest(&small_cfg(), &d.manifest).unwrap();
    let mut ckpt = trainer.checkpoint();
    ckpt.params[0].value = Tensor::zeros(&[1]);
    let m = &d.manifest;
    assert!(Trainer::from_checkpoint(&ckpt, &m.tasks, (m.height, m.width)).is_err());
    let back = Trainer::from_checkpoint(&trainer.checkpoint(), &m.tasks, (m.height, m.width)).unwrap();
    assert_eq!(back.model.store.checksum(), trainer.model.store.checksum());
}
