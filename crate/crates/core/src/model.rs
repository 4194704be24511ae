//! Full model: encoder, optional codebook enhancement, per-task decoders,
//! prototype bank, retrieval transformer and heads.

use rand::Rng;

use crate::autograd::Var;
use crate::config::TrainConfig;
use crate::error::{ensure, Result};
use crate::network::{Network, DOWNSAMPLE};
use crate::nn::{Ctx, ParamStore};
use crate::prototype::{task_affinity, task_similarity, TaskPrototype, TokenProjection};
use crate::retrieval::{affinity_feature, BlockTrace, KnowledgeRetrieval};
use crate::synthdata::TaskSpec;
use crate::tensor::Tensor;
use crate::vq::{VqEnhance, VqOutput};

#[derive(Clone, Debug)]
pub struct MultiTaskModel {
    pub store: ParamStore,
    pub tasks: Vec<TaskSpec>,
    pub image_hw: (usize, usize),
    pub network: Network,
    pub vq: Option<VqEnhance>,
    pub projection: Option<TokenProjection>,
    pub prototype: Option<TaskPrototype>,
    pub retrieval: Option<KnowledgeRetrieval>,
    pub temperature: f64,
}

/// One forward pass with every intermediate the losses need.
pub struct ForwardPass<'a> {
    pub ctx: Ctx<'a>,
    pub batch: usize,
    pub image: Var,
    /// NCHW prediction per task.
    pub predictions: Vec<Var>,
    pub vq: Option<VqOutput>,
    /// Task-specific features `[B,h,w,c]`, one per task.
    pub task_features: Vec<Var>,
    /// Tokens of all tasks stacked task-major: `[T·B, hw, d]`.
    pub tokens: Option<Var>,
    pub similarity: Option<Var>,
    pub affinity: Option<Var>,
    pub prototype: Option<Var>,
    pub traces: Vec<BlockTrace>,
}

impl ForwardPass<'_> {
    /// Rows `[t·B, (t+1)·B)` of a task-major stacked tensor.
    pub fn task_slice(&mut self, stacked: Var, task: usize) -> Var {
        self.ctx.graph.slice0(stacked, task * self.batch, self.batch)
    }
}

impl MultiTaskModel {
    pub fn new<R: Rng + ?Sized>(
        cfg: &TrainConfig,
        tasks: &[TaskSpec],
        image_hw: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        ensure!(tasks.len() >= 2, "need at least two tasks");
        ensure!(
            cfg.tasks == 0 || cfg.tasks == tasks.len(),
            "config expects {} tasks, dataset has {}",
            cfg.tasks,
            tasks.len()
        );
        ensure!(
            image_hw.0 % DOWNSAMPLE == 0 && image_hw.1 % DOWNSAMPLE == 0,
            "image size {image_hw:?} is not divisible by {DOWNSAMPLE}"
        );
        let mut store = ParamStore::new();
        let head_in = if cfg.use_retrieval { cfg.proto_dim } else { cfg.channels };
        let network = Network::new(&mut store, tasks, cfg.channels, head_in, image_hw, rng);
        let vq = cfg
            .use_vq
            .then(|| VqEnhance::new(&mut store, cfg.codebook_size, cfg.channels, DOWNSAMPLE, rng));
        let (projection, prototype) = if cfg.uses_prototype() {
            (
                Some(TokenProjection::new(&mut store, cfg.channels, cfg.proto_dim, rng)),
                Some(TaskPrototype::new(&mut store, tasks.len(), cfg.proto_dim, rng)),
            )
        } else {
            (None, None)
        };
        let retrieval = cfg
            .use_retrieval
            .then(|| KnowledgeRetrieval::new(&mut store, cfg.depth, cfg.proto_dim, cfg.heads, rng));
        Ok(Self {
            store,
            tasks: tasks.to_vec(),
            image_hw,
            network,
            vq,
            projection,
            prototype,
            retrieval,
            temperature: cfg.temperature,
        })
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn forward(&self, images: &Tensor, train: bool) -> Result<ForwardPass<'_>> {
        let s = images.shape();
        ensure!(
            s.len() == 4 && s[1] == 3 && (s[2], s[3]) == self.image_hw,
            "images must be [B,3,{},{}], got {s:?}",
            self.image_hw.0,
            self.image_hw.1
        );
        let b = s[0];
        ensure!(b >= 1, "empty batch");
        let mut ctx = Ctx::new(&self.store, train);
        let image = ctx.graph.constant(images.clone());
        let fe = self.network.encode(&mut ctx, image)?;
        let (fi, vq) = match &self.vq {
            Some(vq) => {
                let out = vq.forward(&mut ctx, fe, image)?;
                (out.fi, Some(out))
            }
            None => (fe, None),
        };
        let task_features = (0..self.task_count())
            .map(|t| self.network.decode_task(&mut ctx, fi, t))
            .collect::<Result<Vec<_>>>()?;

        let mut pass = ForwardPass {
            ctx,
            batch: b,
            image,
            predictions: Vec::new(),
            vq,
            task_features,
            tokens: None,
            similarity: None,
            affinity: None,
            prototype: None,
            traces: Vec::new(),
        };
        let mut head_inputs = pass.task_features.clone();
        if let (Some(proj), Some(proto)) = (&self.projection, &self.prototype) {
            let ctx = &mut pass.ctx;
            let stacked = ctx.graph.concat0(&pass.task_features);
            let tokens = proj.forward(ctx, stacked);
            let v = ctx.p(proto.slots);
            let sim = task_similarity(&mut ctx.graph, tokens, v)?;
            let aff = task_affinity(&mut ctx.graph, sim, self.temperature)?;
            if let Some(kr) = &self.retrieval {
                let fta = affinity_feature(&mut ctx.graph, aff, v)?;
                let (refined, traces) = kr.forward(ctx, tokens, fta)?;
                let fs = ctx.graph.shape(pass.task_features[0]).to_vec();
                let d = ctx.graph.shape(refined)[2];
                let refined = ctx.graph.reshape(refined, &[self.task_count() * b, fs[1], fs[2], d]);
                pass.traces = traces;
                head_inputs = (0..self.task_count())
                    .map(|t| pass.ctx.graph.slice0(refined, t * b, b))
                    .collect();
            }
            pass.tokens = Some(tokens);
            pass.similarity = Some(sim);
            pass.affinity = Some(aff);
            pass.prototype = Some(v);
        }
        for (t, &f) in head_inputs.iter().enumerate() {
            let p = self.network.predict_head(&mut pass.ctx, f, t)?;
            pass.predictions.push(p);
        }
        Ok(pass)
    }

    /// Eval-mode predictions as plain tensors.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let pass = self.forward(images, false)?;
        Ok(pass
            .predictions
            .iter()
            .map(|&p| pass.ctx.graph.value(p).clone())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AblationRow;
    use crate::synthdata::standard_tasks;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            channels: 8,
            proto_dim: 8,
            heads: 2,
            codebook_size: 8,
            depth: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn forward_shapes_all_rows() {
        let tasks = standard_tasks(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let images = Tensor::uniform(&[2, 3, 16, 16], 1.0, &mut rng).map(|v| v.abs());
        for row in AblationRow::ALL {
            let cfg = small_cfg().for_row(row);
            let m = MultiTaskModel::new(&cfg, &tasks, (16, 16), &mut rng).unwrap();
            let preds = m.predict(&images).unwrap();
            assert_eq!(preds[0].shape(), &[2, 4, 16, 16]);
            assert_eq!(preds[1].shape(), &[2, 1, 16, 16]);
            assert_eq!(preds[2].shape(), &[2, 3, 16, 16]);
            assert!(preds.iter().all(|p| p.is_finite()));
            let pass = m.forward(&images, true).unwrap();
            assert_eq!(pass.vq.is_some(), cfg.use_vq);
            assert_eq!(pass.tokens.is_some(), cfg.uses_prototype());
            if let Some(a) = pass.affinity {
                assert_eq!(pass.ctx.graph.shape(a), &[6, 16, 3]);
            }
        }
    }

    #[test]
    fn rejects_wrong_image_size() {
        let tasks = standard_tasks(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MultiTaskModel::new(&small_cfg(), &tasks, (16, 16), &mut rng).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 3, 32, 32])).is_err());
        let cfg = TrainConfig {
            tasks: 5,
            ..small_cfg()
        };
        assert!(MultiTaskModel::new(&cfg, &tasks, (16, 16), &mut rng).is_err());
    }
}
