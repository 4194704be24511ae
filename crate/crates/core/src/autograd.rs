//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! tracked (parameters or inputs under test) or constants; every op records
//! what its backward rule needs, and [`Graph::backward`] walks the tape in
//! reverse. Shape errors inside the tape are programmer errors and panic;
//! the model-level APIs validate user-facing shapes before building ops.

use crate::tensor::{gemm, inverse_perm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> ConvGeom {
        assert_eq!(input.len(), 4, "conv input must be NHWC");
        let (batch, in_h, in_w, in_c) = (input[0], input[1], input[2], input[3]);
        let out_h = (in_h + 2 * pad - kernel) / stride + 1;
        let out_w = (in_w + 2 * pad - kernel) / stride + 1;
        ConvGeom {
            batch,
            in_h,
            in_w,
            in_c,
            out_h,
            out_w,
            out_c,
            kernel,
            stride,
            pad,
        }
    }

    fn col_width(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Source pixel for output `(oy, ox)` and tap `(ky, kx)`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.in_h as isize || ix >= self.in_w as isize {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let cw = self.col_width();
        let mut cols = vec![0.0; self.rows() * cw];
        let c = self.in_c;
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = (b * self.out_h + oy) * self.out_w + ox;
                    let dst = &mut cols[row * cw..(row + 1) * cw];
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            if let Some((iy, ix)) = self.source(oy, ox, ky, kx) {
                                let s = ((b * self.in_h + iy) * self.in_w + ix) * c;
                                let d = (ky * self.kernel + kx) * c;
                                dst[d..d + c].copy_from_slice(&x[s..s + c]);
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let cw = self.col_width();
        let c = self.in_c;
        let mut x = vec![0.0; self.batch * self.in_h * self.in_w * c];
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = (b * self.out_h + oy) * self.out_w + ox;
                    let src = &cols[row * cw..(row + 1) * cw];
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            if let Some((iy, ix)) = self.source(oy, ox, ky, kx) {
                                let d = ((b * self.in_h + iy) * self.in_w + ix) * c;
                                let s = (ky * self.kernel + kx) * c;
                                for ch in 0..c {
                                    x[d + ch] += src[s + ch];
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Two-tap linear interpolation weights along one axis (half-pixel centers).
#[derive(Clone, Debug)]
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl Taps {
    fn new(input: usize, output: usize) -> Taps {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(src - i0 as f64);
        }
        Taps { lo, hi, frac }
    }
}

#[derive(Clone, Debug)]
struct UpsampleGeom {
    batch: usize,
    in_h: usize,
    in_w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
    rows: Taps,
    cols: Taps,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    /// Keeps `σ(2u)` from the forward pass.
    Gelu(Var, Vec<f64>),
    Abs(Var),
    Ln(Var),
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        n: usize,
        k: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        n: usize,
        k: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat0(Vec<Var>),
    Slice0 {
        x: Var,
        start: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        cols: Vec<f64>,
        geom: ConvGeom,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        kind: NormKind,
    },
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    MeanAxis0(Var),
    SumAll(Var),
    MeanAll(Var),
    WeightedSum {
        x: Var,
        w: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    SmoothL1Mean(Var, Var),
    StraightThrough(Var),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    GatherFlat {
        x: Var,
        idx: Vec<usize>,
    },
    Upsample {
        x: Var,
        geom: Box<UpsampleGeom>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormKind {
    /// Statistics over rows, per column; `xhat`/`inv_std` from the batch.
    Batch,
    /// Precomputed statistics; backward treats them as constants.
    Frozen,
    /// Statistics over the last axis of each row.
    Layer,
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`]. Only
/// leaves keep theirs; intermediate buffers are reused on the way down.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Stop-gradient copy.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let t = self.zip(a, b, |p, q| p + q);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(t, Op::Add(a, b), tr)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let t = self.zip(a, b, |p, q| p - q);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(t, Op::Sub(a, b), tr)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let t = self.zip(a, b, |p, q| p * q);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(t, Op::Mul(a, b), tr)
    }

    /// `x[..., C] + bias[C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let c = *self.shape(bias).last().expect("bias rank");
        assert_eq!(self.shape(bias).len(), 1, "bias must be rank 1");
        assert_eq!(*self.shape(x).last().unwrap(), c, "bias width");
        let mut t = self.value(x).clone();
        let bv = self.value(bias).data().to_vec();
        for row in t.data_mut().chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&bv) {
                *v += b;
            }
        }
        let tr = self.tracked(x) || self.tracked(bias);
        self.push(t, Op::AddBias(x, bias), tr)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        let tr = self.tracked(x);
        self.push(t, Op::Scale(x, s), tr)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v + s);
        let tr = self.tracked(x);
        self.push(t, Op::Shift(x), tr)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let tr = self.tracked(x);
        self.push(t, Op::Relu(x), tr)
    }

    /// Tanh-approximated GELU, evaluated as `v·σ(2u)` since `½(1 + tanh u) = σ(2u)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let sig: Vec<f64> = xv
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-2.0 * GELU_C * (v + GELU_A * v * v * v)).exp()))
            .collect();
        let out = xv.data().iter().zip(&sig).map(|(v, s)| v * s).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let tr = self.tracked(x);
        self.push(t, Op::Gelu(x, sig), tr)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::abs);
        let tr = self.tracked(x);
        self.push(t, Op::Abs(x), tr)
    }

    /// Natural log; inputs must be positive.
    pub fn ln(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::ln);
        let tr = self.tracked(x);
        self.push(t, Op::Ln(x), tr)
    }

    /// 2-D product `op(a) · op(b)`; `ta`/`tb` read the stored matrix transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul needs rank-2 operands");
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(ka, kb, "matmul inner dims {sa:?} x {sb:?}");
        let mut out = vec![0.0; m * n];
        gemm(ta, tb, m, n, ka, self.value(a).data(), self.value(b).data(), &mut out, false);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::Matmul {
                a,
                b,
                ta,
                tb,
                m,
                n,
                k: ka,
            },
            tr,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product over rank-3 operands `[G, ., .]`.
    pub fn bmm_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3, "bmm needs rank-3 operands");
        assert_eq!(sa[0], sb[0], "bmm batch dims");
        let batch = sa[0];
        let (m, ka) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(ka, kb, "bmm inner dims {sa:?} x {sb:?}");
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for g in 0..batch {
                gemm(
                    ta,
                    tb,
                    m,
                    n,
                    ka,
                    &av[g * m * ka..(g + 1) * m * ka],
                    &bv[g * ka * n..(g + 1) * ka * n],
                    &mut out[g * m * n..(g + 1) * m * n],
                    false,
                );
            }
        }
        let tr = self.tracked(a) || self.tracked(b);
        self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::Bmm {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                n,
                k: ka,
            },
            tr,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let tr = self.tracked(x);
        self.push(t, Op::Reshape(x), tr)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let t = self.value(x).permute(perm);
        let tr = self.tracked(x);
        self.push(t, Op::Permute(x, perm.to_vec()), tr)
    }

    /// Concatenation along the leading axis.
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat0 of nothing");
        let rest = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(&self.shape(p)[1..], &rest[..], "concat0 trailing dims");
            lead += self.shape(p)[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&rest);
        let tr = parts.iter().any(|&p| self.tracked(p));
        self.push(Tensor::from_parts(shape, data), Op::Concat0(parts.to_vec()), tr)
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice0(&mut self, x: Var, start: usize, len: usize) -> Var {
        let mut shape = self.shape(x).to_vec();
        assert!(start + len <= shape[0], "slice0 out of range");
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        shape[0] = len;
        let tr = self.tracked(x);
        self.push(Tensor::from_parts(shape, data), Op::Slice0 { x, start }, tr)
    }

    /// Convolution over NHWC input with weight `[k, k, c_in, c_out]` (no bias).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [k,k,cin,cout]");
        assert_eq!(ws[0], ws[1], "square kernels only");
        let geom = ConvGeom::new(self.shape(x), ws[3], ws[0], stride, pad);
        assert_eq!(geom.in_c, ws[2], "conv input channels");
        let cols = if geom.kernel == 1 && geom.stride == 1 && geom.pad == 0 {
            self.value(x).data().to_vec()
        } else {
            geom.im2col(self.value(x).data())
        };
        let mut out = vec![0.0; geom.rows() * geom.out_c];
        gemm(
            false,
            false,
            geom.rows(),
            geom.out_c,
            geom.col_width(),
            &cols,
            self.value(w).data(),
            &mut out,
            false,
        );
        let shape = vec![geom.batch, geom.out_h, geom.out_w, geom.out_c];
        let tr = self.tracked(x) || self.tracked(w);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d { x, w, cols, geom },
            tr,
        )
    }

    /// Per-column normalization over all rows of `x[..., C]` using batch statistics.
    /// Returns the output and the biased batch mean/variance per channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let c = *self.shape(x).last().unwrap();
        let xs = self.value(x).data();
        let rows = xs.len() / c;
        let mut mean = vec![0.0; c];
        for row in xs.chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for row in xs.chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.affine_norm(x, gamma, beta, &mean, inv_std, NormKind::Batch);
        (out, mean, var)
    }

    /// Per-column affine normalization with fixed statistics.
    pub fn frozen_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.affine_norm(x, gamma, beta, mean, inv_std, NormKind::Frozen)
    }

    fn affine_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        kind: NormKind,
    ) -> Var {
        let c = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xs = self.value(x);
        let mut xhat = Vec::with_capacity(xs.numel());
        let mut out = Vec::with_capacity(xs.numel());
        for row in xs.data().chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = xs.shape().to_vec();
        let tr = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind,
            },
            tr,
        )
    }

    /// Normalization over the last axis of each row.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let c = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xs = self.value(x);
        let mut xhat = Vec::with_capacity(xs.numel());
        let mut out = Vec::with_capacity(xs.numel());
        let mut inv_std = Vec::with_capacity(xs.numel() / c);
        for row in xs.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = xs.shape().to_vec();
        let tr = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind: NormKind::Layer,
            },
            tr,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let c = *self.shape(x).last().unwrap();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let tr = self.tracked(x);
        self.push(t, Op::Softmax(x), tr)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let c = *self.shape(x).last().unwrap();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let tr = self.tracked(x);
        self.push(t, Op::LogSoftmax(x), tr)
    }

    /// Row-wise `x / max(‖x‖, eps)` over the last axis.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let c = *self.shape(x).last().unwrap();
        let mut t = self.value(x).clone();
        let mut norms = Vec::with_capacity(t.numel() / c.max(1));
        for row in t.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norms.push(n);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let tr = self.tracked(x);
        self.push(t, Op::L2Normalize { x, norms, eps }, tr)
    }

    /// Mean over the leading axis: `[B, ...] -> [...]`.
    pub fn mean_axis0(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let b = shape[0];
        let inner: usize = shape[1..].iter().product();
        let mut out = vec![0.0; inner];
        for row in self.value(x).data().chunks(inner) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= b as f64);
        let tr = self.tracked(x);
        self.push(Tensor::from_parts(shape[1..].to_vec(), out), Op::MeanAxis0(x), tr)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tr = self.tracked(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), tr)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let tr = self.tracked(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), tr)
    }

    /// `Σ w ⊙ x` with constant weights of the same element count.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<f64>) -> Var {
        assert_eq!(self.value(x).numel(), w.len(), "weighted_sum length");
        let s = self.value(x).data().iter().zip(&w).map(|(a, b)| a * b).sum();
        let tr = self.tracked(x);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, w }, tr)
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[t_i])` over rows of `logits[N, C]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    ) -> Var {
        let c = *self.shape(logits).last().unwrap();
        let rows = self.value(logits).numel() / c;
        assert_eq!(targets.len(), rows, "one target per row");
        assert_eq!(weights.len(), rows, "one weight per row");
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            if weights[i] != 0.0 {
                loss += weights[i] * (lse - row[targets[i]]);
            }
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let tr = self.tracked(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
                weights,
            },
            tr,
        )
    }

    /// Mean elementwise smooth-L1 between `a` and the target `b`.
    pub fn smooth_l1_mean(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "smooth_l1");
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(p, q)| smooth_l1(p - q))
            .sum();
        let tr = self.tracked(a) || self.tracked(b);
        self.push(Tensor::scalar(s / n), Op::SmoothL1Mean(a, b), tr)
    }

    /// Forward value `replacement`, backward identity into `x`.
    pub fn straight_through(&mut self, x: Var, replacement: Tensor) -> Var {
        assert_eq!(self.shape(x), replacement.shape(), "straight_through shape");
        let tr = self.tracked(x);
        self.push(replacement, Op::StraightThrough(x), tr)
    }

    /// Rows of `table[K, C]` selected by `idx`, giving `[idx.len(), C]`.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let s = self.shape(table).to_vec();
        assert_eq!(s.len(), 2);
        let c = s[1];
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let tr = self.tracked(table);
        let n = idx.len();
        self.push(
            Tensor::from_parts(vec![n, c], out),
            Op::GatherRows { table, idx },
            tr,
        )
    }

    /// Flat elements of `x` selected by `idx`, giving `[idx.len()]`.
    pub fn gather_flat(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x).data();
        let out: Vec<f64> = idx.iter().map(|&i| xv[i]).collect();
        let tr = self.tracked(x);
        let n = idx.len();
        self.push(Tensor::from_parts(vec![n], out), Op::GatherFlat { x, idx }, tr)
    }

    /// Bilinear resize of NHWC `[B,h,w,C]` to NCHW `[B,C,H,W]`.
    pub fn upsample_bilinear_to_nchw(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "upsample input must be NHWC");
        let geom = UpsampleGeom {
            batch: s[0],
            in_h: s[1],
            in_w: s[2],
            channels: s[3],
            out_h,
            out_w,
            rows: Taps::new(s[1], out_h),
            cols: Taps::new(s[2], out_w),
        };
        let out = upsample_forward(&geom, self.value(x).data());
        let tr = self.tracked(x);
        self.push(
            Tensor::from_parts(vec![geom.batch, geom.channels, out_h, out_w], out),
            Op::Upsample {
                x,
                geom: Box::new(geom),
            },
            tr,
        )
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.propagate(node, dy, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, mut dy: Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        // pass-through ops hand `dy` itself down
        match &node.op {
            Op::Add(a, b) => {
                if self.tracked(*b) {
                    self.accumulate(grads, *b, dy.clone());
                }
                return self.accumulate(grads, *a, dy);
            }
            Op::Sub(a, b) => {
                if self.tracked(*b) {
                    self.accumulate(grads, *b, dy.map(|v| -v));
                }
                return self.accumulate(grads, *a, dy);
            }
            Op::Scale(x, s) => {
                dy.data_mut().iter_mut().for_each(|v| *v *= s);
                return self.accumulate(grads, *x, dy);
            }
            Op::Shift(x) | Op::StraightThrough(x) => return self.accumulate(grads, *x, dy),
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                return self.accumulate(grads, *x, dy.reshape(&shape).expect("reshape grad"));
            }
            Op::Gelu(x, sig) => {
                let xv = self.value(*x).data();
                for ((g, &v), &s) in dy.data_mut().iter_mut().zip(xv).zip(sig) {
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *g *= s + 2.0 * v * s * (1.0 - s) * du;
                }
                return self.accumulate(grads, *x, dy);
            }
            Op::Softmax(x) => {
                let c = *y.shape().last().unwrap();
                for (yr, dr) in y.data().chunks(c).zip(dy.data_mut().chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(dr.iter()).map(|(p, q)| p * q).sum();
                    for (g, p) in dr.iter_mut().zip(yr) {
                        *g = p * (*g - dot);
                    }
                }
                return self.accumulate(grads, *x, dy);
            }
            _ => {}
        }
        let dy = &dy;
        let d = dy.data();
        match &node.op {
            Op::Leaf
            | Op::Add(..)
            | Op::Sub(..)
            | Op::Scale(..)
            | Op::Shift(_)
            | Op::StraightThrough(_)
            | Op::Reshape(_)
            | Op::Gelu(..)
            | Op::Softmax(_) => {}
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    let g = zip_with(dy, self.value(*b), |p, q| p * q);
                    self.accumulate(grads, *a, g);
                }
                if self.tracked(*b) {
                    let g = zip_with(dy, self.value(*a), |p, q| p * q);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, dy.clone());
                if self.tracked(*bias) {
                    let c = self.value(*bias).numel();
                    let mut gb = vec![0.0; c];
                    for row in d.chunks(c) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![c], gb));
                }
            }
            Op::Relu(x) => {
                let g = zip_with(dy, self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *x, g);
            }
            Op::Abs(x) => {
                let g = zip_with(dy, self.value(*x), |g, v| {
                    if v > 0.0 {
                        g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, g);
            }
            Op::Ln(x) => {
                let g = zip_with(dy, self.value(*x), |g, v| g / v);
                self.accumulate(grads, *x, g);
            }
            Op::Matmul {
                a,
                b,
                ta,
                tb,
                m,
                n,
                k,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    let mut ga = vec![0.0; m * k];
                    if !ta {
                        gemm(false, !tb, *m, *k, *n, d, bv.data(), &mut ga, false);
                    } else {
                        gemm(*tb, true, *k, *m, *n, bv.data(), d, &mut ga, false);
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                }
                if self.tracked(*b) {
                    let mut gb = vec![0.0; k * n];
                    if !tb {
                        gemm(!ta, false, *k, *n, *m, av.data(), d, &mut gb, false);
                    } else {
                        gemm(true, *ta, *n, *k, *m, d, av.data(), &mut gb, false);
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
                }
            }
            Op::Bmm {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                n,
                k,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (sa, sb, sc) = (m * k, k * n, m * n);
                if self.tracked(*a) {
                    let mut ga = vec![0.0; batch * sa];
                    for g in 0..*batch {
                        let dc = &d[g * sc..(g + 1) * sc];
                        let bm = &bv.data()[g * sb..(g + 1) * sb];
                        let out = &mut ga[g * sa..(g + 1) * sa];
                        if !ta {
                            gemm(false, !tb, *m, *k, *n, dc, bm, out, false);
                        } else {
                            gemm(*tb, true, *k, *m, *n, bm, dc, out, false);
                        }
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                }
                if self.tracked(*b) {
                    let mut gb = vec![0.0; batch * sb];
                    for g in 0..*batch {
                        let dc = &d[g * sc..(g + 1) * sc];
                        let am = &av.data()[g * sa..(g + 1) * sa];
                        let out = &mut gb[g * sb..(g + 1) * sb];
                        if !tb {
                            gemm(!ta, false, *k, *n, *m, am, dc, out, false);
                        } else {
                            gemm(true, *ta, *n, *k, *m, dc, am, out, false);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
                }
            }
            Op::Permute(x, perm) => {
                self.accumulate(grads, *x, dy.permute(&inverse_perm(perm)));
            }
            Op::Concat0(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let shape = self.shape(p).to_vec();
                    let g = Tensor::from_parts(shape, d[offset..offset + n].to_vec());
                    self.accumulate(grads, p, g);
                    offset += n;
                }
            }
            Op::Slice0 { x, start } => {
                let shape = self.shape(*x).to_vec();
                let inner: usize = shape[1..].iter().product();
                let mut g = vec![0.0; self.value(*x).numel()];
                g[start * inner..start * inner + d.len()].copy_from_slice(d);
                self.accumulate(grads, *x, Tensor::from_parts(shape, g));
            }
            Op::Conv2d { x, w, cols, geom } => {
                let (rows, cw, oc) = (geom.rows(), geom.col_width(), geom.out_c);
                if self.tracked(*w) {
                    let mut gw = vec![0.0; cw * oc];
                    gemm(true, false, cw, oc, rows, cols, d, &mut gw, false);
                    let shape = self.shape(*w).to_vec();
                    self.accumulate(grads, *w, Tensor::from_parts(shape, gw));
                }
                if self.tracked(*x) {
                    let mut gcols = vec![0.0; rows * cw];
                    gemm(false, true, rows, cw, oc, d, self.value(*w).data(), &mut gcols, false);
                    let gx = if geom.kernel == 1 && geom.stride == 1 && geom.pad == 0 {
                        gcols
                    } else {
                        geom.col2im(&gcols)
                    };
                    let shape = self.shape(*x).to_vec();
                    self.accumulate(grads, *x, Tensor::from_parts(shape, gx));
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                kind,
            } => {
                let c = self.value(*gamma).numel();
                let gv = self.value(*gamma).data();
                if self.tracked(*gamma) || self.tracked(*beta) {
                    let mut gg = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    for (drow, hrow) in d.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += drow[j] * hrow[j];
                            gbeta[j] += drow[j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::from_parts(vec![c], gg));
                    self.accumulate(grads, *beta, Tensor::from_parts(vec![c], gbeta));
                }
                if self.tracked(*x) {
                    let gx = match kind {
                        NormKind::Frozen => {
                            let mut gx = vec![0.0; d.len()];
                            for (orow, drow) in gx.chunks_mut(c).zip(d.chunks(c)) {
                                for j in 0..c {
                                    orow[j] = drow[j] * gv[j] * inv_std[j];
                                }
                            }
                            gx
                        }
                        NormKind::Batch => batch_norm_backward(d, xhat, inv_std, gv),
                        NormKind::Layer => layer_norm_backward(d, xhat, inv_std, gv),
                    };
                    let shape = self.shape(*x).to_vec();
                    self.accumulate(grads, *x, Tensor::from_parts(shape, gx));
                }
            }
            Op::LogSoftmax(x) => {
                let c = *y.shape().last().unwrap();
                let mut gx = vec![0.0; d.len()];
                for ((o, yr), dr) in gx.chunks_mut(c).zip(y.data().chunks(c)).zip(d.chunks(c)) {
                    let s: f64 = dr.iter().sum();
                    for j in 0..c {
                        o[j] = dr[j] - yr[j].exp() * s;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::L2Normalize { x, norms, eps } => {
                let c = *y.shape().last().unwrap();
                let mut gx = vec![0.0; d.len()];
                for (r, ((o, yr), dr)) in gx
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(d.chunks(c))
                    .enumerate()
                {
                    let n = norms[r];
                    if n > *eps {
                        let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            o[j] = (dr[j] - yr[j] * dot) / n;
                        }
                    } else {
                        for j in 0..c {
                            o[j] = dr[j] / n;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::MeanAxis0(x) => {
                let shape = self.shape(*x).to_vec();
                let b = shape[0] as f64;
                let mut gx = Vec::with_capacity(shape.iter().product());
                for _ in 0..shape[0] {
                    gx.extend(d.iter().map(|v| v / b));
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, gx));
            }
            Op::SumAll(x) => {
                let g = Tensor::full(self.shape(*x), d[0]);
                self.accumulate(grads, *x, g);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel() as f64;
                let g = Tensor::full(self.shape(*x), d[0] / n);
                self.accumulate(grads, *x, g);
            }
            Op::WeightedSum { x, w } => {
                let g: Vec<f64> = w.iter().map(|v| v * d[0]).collect();
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, g));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
                weights,
            } => {
                let c = *self.shape(*logits).last().unwrap();
                let mut g = vec![0.0; probs.len()];
                for (i, (o, p)) in g.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                    let w = weights[i] * d[0];
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        o[j] = w * p[j];
                    }
                    o[targets[i]] -= w;
                }
                let shape = self.shape(*logits).to_vec();
                self.accumulate(grads, *logits, Tensor::from_parts(shape, g));
            }
            Op::SmoothL1Mean(a, b) => {
                let n = self.value(*a).numel() as f64;
                let ga = zip_with(self.value(*a), self.value(*b), |p, q| {
                    let r = p - q;
                    d[0] * if r.abs() < 1.0 { r } else { r.signum() } / n
                });
                if self.tracked(*b) {
                    self.accumulate(grads, *b, ga.map(|v| -v));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows { table, idx } => {
                let shape = self.shape(*table).to_vec();
                let c = shape[1];
                let mut g = vec![0.0; shape[0] * c];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        g[i * c + j] += d[r * c + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::from_parts(shape, g));
            }
            Op::GatherFlat { x, idx } => {
                let shape = self.shape(*x).to_vec();
                let mut g = vec![0.0; self.value(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    g[i] += d[r];
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, g));
            }
            Op::Upsample { x, geom } => {
                let g = upsample_backward(geom, d);
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, g));
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

/// Elementwise smooth-L1 (Huber with unit threshold).
pub fn smooth_l1(r: f64) -> f64 {
    let a = r.abs();
    if a < 1.0 {
        0.5 * a * a
    } else {
        a - 0.5
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn batch_norm_backward(d: &[f64], xhat: &[f64], inv_std: &[f64], gamma: &[f64]) -> Vec<f64> {
    let c = gamma.len();
    let rows = d.len() / c;
    let mut sum_d = vec![0.0; c];
    let mut sum_dh = vec![0.0; c];
    for (dr, hr) in d.chunks(c).zip(xhat.chunks(c)) {
        for j in 0..c {
            sum_d[j] += dr[j];
            sum_dh[j] += dr[j] * hr[j];
        }
    }
    let n = rows as f64;
    let mut gx = vec![0.0; d.len()];
    for ((o, dr), hr) in gx.chunks_mut(c).zip(d.chunks(c)).zip(xhat.chunks(c)) {
        for j in 0..c {
            o[j] = gamma[j] * inv_std[j] / n * (n * dr[j] - sum_d[j] - hr[j] * sum_dh[j]);
        }
    }
    gx
}

fn layer_norm_backward(d: &[f64], xhat: &[f64], inv_std: &[f64], gamma: &[f64]) -> Vec<f64> {
    let c = gamma.len();
    let n = c as f64;
    let mut gx = vec![0.0; d.len()];
    let mut dh = vec![0.0; c];
    for (r, ((o, dr), hr)) in gx
        .chunks_mut(c)
        .zip(d.chunks(c))
        .zip(xhat.chunks(c))
        .enumerate()
    {
        for j in 0..c {
            dh[j] = dr[j] * gamma[j];
        }
        let s: f64 = dh.iter().sum();
        let sh: f64 = dh.iter().zip(hr).map(|(p, q)| p * q).sum();
        for j in 0..c {
            o[j] = inv_std[r] / n * (n * dh[j] - s - hr[j] * sh);
        }
    }
    gx
}

fn upsample_forward(g: &UpsampleGeom, x: &[f64]) -> Vec<f64> {
    let (h, w, c) = (g.in_h, g.in_w, g.channels);
    let mut out = vec![0.0; g.batch * c * g.out_h * g.out_w];
    for b in 0..g.batch {
        let xb = &x[b * h * w * c..(b + 1) * h * w * c];
        for oy in 0..g.out_h {
            let (y0, y1, fy) = (g.rows.lo[oy], g.rows.hi[oy], g.rows.frac[oy]);
            for ox in 0..g.out_w {
                let (x0, x1, fx) = (g.cols.lo[ox], g.cols.hi[ox], g.cols.frac[ox]);
                let w00 = (1.0 - fy) * (1.0 - fx);
                let w01 = (1.0 - fy) * fx;
                let w10 = fy * (1.0 - fx);
                let w11 = fy * fx;
                let p00 = (y0 * w + x0) * c;
                let p01 = (y0 * w + x1) * c;
                let p10 = (y1 * w + x0) * c;
                let p11 = (y1 * w + x1) * c;
                for ch in 0..c {
                    let v = w00 * xb[p00 + ch]
                        + w01 * xb[p01 + ch]
                        + w10 * xb[p10 + ch]
                        + w11 * xb[p11 + ch];
                    out[((b * c + ch) * g.out_h + oy) * g.out_w + ox] = v;
                }
            }
        }
    }
    out
}

fn upsample_backward(g: &UpsampleGeom, d: &[f64]) -> Vec<f64> {
    let (h, w, c) = (g.in_h, g.in_w, g.channels);
    let mut gx = vec![0.0; g.batch * h * w * c];
    for b in 0..g.batch {
        let gb = &mut gx[b * h * w * c..(b + 1) * h * w * c];
        for oy in 0..g.out_h {
            let (y0, y1, fy) = (g.rows.lo[oy], g.rows.hi[oy], g.rows.frac[oy]);
            for ox in 0..g.out_w {
                let (x0, x1, fx) = (g.cols.lo[ox], g.cols.hi[ox], g.cols.frac[ox]);
                let w00 = (1.0 - fy) * (1.0 - fx);
                let w01 = (1.0 - fy) * fx;
                let w10 = fy * (1.0 - fx);
                let w11 = fy * fx;
                for ch in 0..c {
                    let v = d[((b * c + ch) * g.out_h + oy) * g.out_w + ox];
                    gb[(y0 * w + x0) * c + ch] += w00 * v;
                    gb[(y0 * w + x1) * c + ch] += w01 * v;
                    gb[(y1 * w + x0) * c + ch] += w10 * v;
                    gb[(y1 * w + x1) * c + ch] += w11 * v;
                }
            }
        }
    }
    gx
}
