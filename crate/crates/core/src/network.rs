//! Shared encoder, per-task residual decoders and 1×1 prediction heads.
//!
//! Features are NHWC `[B, h, w, c]`; images and predictions are NCHW.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{ensure, Result};
use crate::nn::{BatchNorm, Conv2d, Ctx, ParamStore};
use crate::synthdata::TaskSpec;
use crate::tensor::Tensor;

/// Strides of the three encoder blocks.
pub const ENCODER_STRIDES: [usize; 3] = [2, 2, 1];
/// Overall downsample factor `s`.
pub const DOWNSAMPLE: usize = 4;
const STEM_WIDTH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Encoded,
    Quantized,
    Integrated,
    TaskSpecific,
    TaskRefined,
}

/// A materialized activation tagged with the stage that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stage: Stage,
}

impl FeatureMap {
    pub fn new(data: Tensor, stage: Stage) -> Result<Self> {
        ensure!(
            data.shape().len() == 4,
            "feature maps are [B,h,w,c], got {:?}",
            data.shape()
        );
        ensure!(data.is_finite(), "{stage:?} feature map has non-finite values");
        Ok(Self { data, stage })
    }

    /// `[B, h, w]`.
    pub fn spatial(&self) -> &[usize] {
        &self.data.shape()[..3]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<(Conv2d, BatchNorm)>,
    /// Linear 1×1 output layer with bias.
    pub out: Conv2d,
    pub channels: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, rng: &mut R) -> Self {
        let widths = [STEM_WIDTH, channels, channels];
        let mut in_c = 3;
        let mut blocks = Vec::new();
        for (i, (&w, &s)) in widths.iter().zip(&ENCODER_STRIDES).enumerate() {
            let conv = Conv2d::new(store, &format!("encoder.block{i}.conv"), in_c, w, 3, s, false, rng);
            let bn = BatchNorm::new(store, &format!("encoder.block{i}.bn"), w);
            blocks.push((conv, bn));
            in_c = w;
        }
        let out = Conv2d::new(store, "encoder.out", in_c, channels, 1, 1, true, rng);
        Self {
            blocks,
            out,
            channels,
        }
    }

    /// `[B,3,H,W] -> [B,H/s,W/s,c]`.
    pub fn forward(&self, ctx: &mut Ctx, image: Var) -> Result<Var> {
        let s = ctx.graph.shape(image).to_vec();
        ensure!(
            s.len() == 4 && s[1] == 3,
            "encoder expects [B,3,H,W], got {s:?}"
        );
        ensure!(
            s[2] % DOWNSAMPLE == 0 && s[3] % DOWNSAMPLE == 0,
            "H and W must be divisible by {DOWNSAMPLE}, got {}x{}",
            s[2],
            s[3]
        );
        let mut x = ctx.graph.permute(image, &[0, 2, 3, 1]);
        for (conv, bn) in &self.blocks {
            let y = conv.forward(ctx, x);
            let y = bn.forward(ctx, y);
            x = ctx.graph.relu(y);
        }
        Ok(self.out.forward(ctx, x))
    }
}

/// `x + conv(relu(conv(x)))`; zeroing the second conv yields the identity.
#[derive(Clone, Debug)]
pub struct TaskDecoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl TaskDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, task: usize, channels: usize, rng: &mut R) -> Self {
        let p = format!("decoder{task}");
        Self {
            conv1: Conv2d::new(store, &format!("{p}.conv1"), channels, channels, 3, 1, true, rng),
            conv2: Conv2d::new(store, &format!("{p}.conv2"), channels, channels, 3, 1, true, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.conv1.forward(ctx, x);
        let h = ctx.graph.relu(h);
        let h = self.conv2.forward(ctx, h);
        ctx.graph.add(x, h)
    }

    pub fn set_identity(&self, store: &mut ParamStore) {
        store.get_mut(self.conv2.weight).data_mut().fill(0.0);
        if let Some(b) = self.conv2.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskHead {
    pub conv: Conv2d,
    pub out_h: usize,
    pub out_w: usize,
}

impl TaskHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        task: &TaskSpec,
        in_c: usize,
        out_h: usize,
        out_w: usize,
        rng: &mut R,
    ) -> Self {
        let name = format!("head{}", task.id);
        Self {
            conv: Conv2d::new(store, &name, in_c, task.output_channels(), 1, 1, true, rng),
            out_h,
            out_w,
        }
    }

    /// Head logits at feature resolution, NHWC.
    pub fn logits(&self, ctx: &mut Ctx, x: Var) -> Var {
        self.conv.forward(ctx, x)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let y = self.logits(ctx, x);
        ctx.graph.upsample_bilinear_to_nchw(y, self.out_h, self.out_w)
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub encoder: Encoder,
    pub decoders: Vec<TaskDecoder>,
    pub heads: Vec<TaskHead>,
    pub channels: usize,
    /// Width of the features the heads read.
    pub head_in: usize,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        tasks: &[TaskSpec],
        channels: usize,
        head_in: usize,
        image_hw: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let encoder = Encoder::new(store, channels, rng);
        let decoders = tasks
            .iter()
            .map(|t| TaskDecoder::new(store, t.id, channels, rng))
            .collect();
        let heads = tasks
            .iter()
            .map(|t| TaskHead::new(store, t, head_in, image_hw.0, image_hw.1, rng))
            .collect();
        Self {
            encoder,
            decoders,
            heads,
            channels,
            head_in,
        }
    }

    pub fn task_count(&self) -> usize {
        self.decoders.len()
    }

    pub fn encode(&self, ctx: &mut Ctx, image: Var) -> Result<Var> {
        self.encoder.forward(ctx, image)
    }

    pub fn decode_task(&self, ctx: &mut Ctx, fi: Var, task: usize) -> Result<Var> {
        ensure!(task < self.task_count(), "unknown task id {task}");
        let s = ctx.graph.shape(fi);
        ensure!(
            s.len() == 4 && s[3] == self.channels,
            "decoder expects [B,h,w,{}], got {s:?}",
            self.channels
        );
        Ok(self.decoders[task].forward(ctx, fi))
    }

    pub fn predict_head(&self, ctx: &mut Ctx, f: Var, task: usize) -> Result<Var> {
        ensure!(task < self.task_count(), "unknown task id {task}");
        let s = ctx.graph.shape(f);
        let head = &self.heads[task];
        ensure!(
            s.len() == 4 && s[3] == self.head_in,
            "head expects [B,h,w,{}], got {s:?}",
            self.head_in
        );
        ensure!(
            s[1] * DOWNSAMPLE == head.out_h && s[2] * DOWNSAMPLE == head.out_w,
            "features {}x{} do not upsample to labels {}x{}",
            s[1],
            s[2],
            head.out_h,
            head.out_w
        );
        Ok(head.forward(ctx, f))
    }
}
