//! Codebook quantization of encoded features, feature integration, image
//! reconstruction and the reconstruction (TAE) loss.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{ensure, Result};
use crate::nn::{Conv2d, Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Weight of the encoder-commitment half of the auxiliary loss.
pub const COMMITMENT_BETA: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct Codebook {
    pub slots: ParamId,
    pub size: usize,
    pub dim: usize,
}

impl Codebook {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, size: usize, dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / size as f64;
        let slots = store.weight("codebook.slots", Tensor::uniform(&[size, dim], bound, rng));
        Self { slots, size, dim }
    }
}

/// Nearest slot of `codebook[K, c]` for each row of `x[N, c]`; ties go to the lower index.
pub fn nearest_slots(x: &[f64], codebook: &Tensor) -> Result<Vec<usize>> {
    ensure!(codebook.shape().len() == 2, "codebook must be [K, c]");
    let (k, c) = (codebook.shape()[0], codebook.shape()[1]);
    ensure!(k >= 1, "empty codebook");
    ensure!(c >= 1 && x.len() % c == 0, "feature width does not match slot dimension {c}");
    let z = codebook.data();
    let out = x
        .chunks(c)
        .map(|xr| {
            let mut best = (f64::INFINITY, 0);
            for (j, slot) in z.chunks(c).enumerate() {
                let d: f64 = xr.iter().zip(slot).map(|(a, b)| (a - b) * (a - b)).sum();
                // strict comparison keeps the lowest index on ties
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect();
    Ok(out)
}

/// `f^e[B,h,w,c]` → (`f^q`, indices `[B,h,w]` flattened row-major).
pub fn quantize(fe: &Tensor, codebook: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let c = *fe.shape().last().unwrap_or(&0);
    ensure!(
        codebook.shape().len() == 2 && codebook.shape()[1] == c,
        "codebook {:?} does not match feature channels {c}",
        codebook.shape()
    );
    let idx = nearest_slots(fe.data(), codebook)?;
    let z = codebook.data();
    let mut q = Vec::with_capacity(fe.numel());
    for &i in &idx {
        q.extend_from_slice(&z[i * c..(i + 1) * c]);
    }
    Ok((Tensor::new(fe.shape(), q)?, idx))
}

/// `f^e + f^q`, with `f^q` carried straight-through so the gradient reaches `f^e` twice.
pub fn integrate(g: &mut Graph, fe: Var, fq: &Tensor) -> Result<Var> {
    ensure!(
        g.shape(fe) == fq.shape(),
        "integrate shapes differ: {:?} vs {:?}",
        g.shape(fe),
        fq.shape()
    );
    let st = g.straight_through(fe, fq.clone());
    Ok(g.add(fe, st))
}

/// Elementwise smooth-L1, mean-reduced.
pub fn tae_loss(g: &mut Graph, recon: Var, image: Var) -> Result<Var> {
    ensure!(
        g.shape(recon) == g.shape(image),
        "reconstruction {:?} vs image {:?}",
        g.shape(recon),
        g.shape(image)
    );
    Ok(g.smooth_l1_mean(recon, image))
}

/// Codebook loss plus commitment: `mean(z_q − sg f^e)² + β mean(f^e − sg z_q)²`.
pub fn quantization_aux_loss(g: &mut Graph, fe: Var, slots: Var, idx: &[usize], beta: f64) -> Var {
    let c = *g.shape(fe).last().unwrap();
    let rows = idx.len();
    let flat = g.reshape(fe, &[rows, c]);
    let picked = g.gather_rows(slots, idx.to_vec());
    let fe_sg = g.detach(flat);
    let d1 = g.sub(picked, fe_sg);
    let sq1 = g.mul(d1, d1);
    let codebook_term = g.mean_all(sq1);
    let q_sg = g.detach(picked);
    let d2 = g.sub(flat, q_sg);
    let sq2 = g.mul(d2, d2);
    let commit = g.mean_all(sq2);
    let commit = g.scale(commit, beta);
    g.add(codebook_term, commit)
}

/// Slots never selected by `indices`.
pub fn dead_slot_count(indices: &[usize], size: usize) -> usize {
    let mut used = vec![false; size];
    for &i in indices {
        used[i] = true;
    }
    used.iter().filter(|&&u| !u).count()
}

/// Conv decoder from `f^i[B,h,w,c]` to an image `[B,3,h·s,w·s]`.
#[derive(Clone, Debug)]
pub struct Reconstructor {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub factor: usize,
}

impl Reconstructor {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, factor: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(store, "recon.conv1", channels, channels, 3, 1, true, rng),
            conv2: Conv2d::new(store, "recon.conv2", channels, 3 * factor * factor, 1, 1, true, rng),
            factor,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, fi: Var) -> Var {
        let s = ctx.graph.shape(fi).to_vec();
        let (b, h, w, f) = (s[0], s[1], s[2], self.factor);
        let x = self.conv1.forward(ctx, fi);
        let x = ctx.graph.relu(x);
        let x = self.conv2.forward(ctx, x);
        // depth-to-space: channel (sy, sx, rgb) → pixel (y·f + sy, x·f + sx)
        let x = ctx.graph.reshape(x, &[b, h, w, f, f, 3]);
        let x = ctx.graph.permute(x, &[0, 5, 1, 3, 2, 4]);
        ctx.graph.reshape(x, &[b, 3, h * f, w * f])
    }
}

#[derive(Clone, Debug)]
pub struct VqEnhance {
    pub codebook: Codebook,
    pub recon: Reconstructor,
    pub beta: f64,
}

/// Graph handles and diagnostics from one enhancement pass.
pub struct VqOutput {
    pub fi: Var,
    pub indices: Vec<usize>,
    /// TAE plus the quantization auxiliary loss.
    pub loss: Var,
    pub tae: Var,
    pub dead_slots: usize,
}

impl VqEnhance {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        size: usize,
        channels: usize,
        factor: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            codebook: Codebook::new(store, size, channels, rng),
            recon: Reconstructor::new(store, channels, factor, rng),
            beta: COMMITMENT_BETA,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, fe: Var, image: Var) -> Result<VqOutput> {
        let (fq, indices) = quantize(ctx.graph.value(fe), ctx.store().get(self.codebook.slots))?;
        let fi = integrate(&mut ctx.graph, fe, &fq)?;
        let recon = self.recon.forward(ctx, fi);
        let tae = tae_loss(&mut ctx.graph, recon, image)?;
        let slots = ctx.p(self.codebook.slots);
        let aux = quantization_aux_loss(&mut ctx.graph, fe, slots, &indices, self.beta);
        let loss = ctx.graph.add(tae, aux);
        Ok(VqOutput {
            fi,
            dead_slots: dead_slot_count(&indices, self.codebook.size),
            indices,
            loss,
            tae,
        })
    }
}
