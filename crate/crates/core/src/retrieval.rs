//! Task-affinity features and the knowledge-retrieval transformer blocks
//! (self-attention, cross-attention onto the affinity feature, feed-forward).

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{ensure, Result};
use crate::nn::{Ctx, LayerNorm, Linear, ParamStore};

/// `f^ta[b,p,·] = Σ_τ A[b,p,τ] v_τ`, `[B,hw,T] × [T,d] -> [B,hw,d]`.
pub fn affinity_feature(g: &mut Graph, affinity: Var, slots: Var) -> Result<Var> {
    let a = g.shape(affinity).to_vec();
    let v = g.shape(slots).to_vec();
    ensure!(a.len() == 3, "affinity must be [B,hw,T], got {a:?}");
    ensure!(
        v.len() == 2 && v[0] == a[2],
        "prototype {v:?} does not match {} affinity columns",
        a[2]
    );
    let flat = g.reshape(affinity, &[a[0] * a[1], a[2]]);
    let f = g.matmul(flat, slots);
    Ok(g.reshape(f, &[a[0], a[1], v[1]]))
}

/// Multi-head scaled dot-product attention without positional terms.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            // a key bias only shifts each query's scores, which softmax ignores
            key: Linear::without_bias(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
            heads,
            dim,
        }
    }

    fn split(&self, g: &mut Graph, x: Var, n: usize, len: usize) -> Var {
        let dh = self.dim / self.heads;
        let x = g.reshape(x, &[n, len, self.heads, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[n * self.heads, len, dh])
    }

    /// `queries[N,n,d]` attend over `context[N,m,d]`; returns output and weights `[N·heads, n, m]`.
    pub fn forward(&self, ctx: &mut Ctx, queries: Var, context: Var) -> (Var, Var) {
        let qs = ctx.graph.shape(queries).to_vec();
        let cs = ctx.graph.shape(context).to_vec();
        let (n, len_q, len_k, d) = (qs[0], qs[1], cs[1], self.dim);
        let q_in = ctx.graph.reshape(queries, &[n * len_q, d]);
        let c_in = ctx.graph.reshape(context, &[n * len_k, d]);
        let q = self.query.forward(ctx, q_in);
        let k = self.key.forward(ctx, c_in);
        let v = self.value.forward(ctx, c_in);
        let g = &mut ctx.graph;
        // scaling queries costs a factor len_k less than scaling scores
        let q = g.scale(q, 1.0 / ((d / self.heads) as f64).sqrt());
        let q = self.split(g, q, n, len_q);
        let k = self.split(g, k, n, len_k);
        let v = self.split(g, v, n, len_k);
        let scores = g.bmm_t(q, k, false, true);
        let weights = g.softmax(scores);
        let mixed = g.bmm_t(weights, v, false, false);
        let mixed = g.reshape(mixed, &[n, self.heads, len_q, d / self.heads]);
        let mixed = g.permute(mixed, &[0, 2, 1, 3]);
        let mixed = g.reshape(mixed, &[n * len_q, d]);
        let out = self.output.forward(ctx, mixed);
        (ctx.graph.reshape(out, &[n, len_q, d]), weights)
    }
}

/// Attention weights recorded by one block.
pub struct BlockTrace {
    pub self_weights: Var,
    pub cross_weights: Var,
}

/// Pre-norm residual block: self-attention, cross-attention, feed-forward.
#[derive(Clone, Debug)]
pub struct RetrievalBlock {
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub norm_cross: LayerNorm,
    pub norm_context: LayerNorm,
    pub cross_attn: Attention,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub dim: usize,
}

impl RetrievalBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), dim),
            self_attn: Attention::new(store, &format!("{name}.self"), dim, heads, rng),
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), dim),
            norm_context: LayerNorm::new(store, &format!("{name}.norm_context"), dim),
            cross_attn: Attention::new(store, &format!("{name}.cross"), dim, heads, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dim),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), dim, 4 * dim, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), 4 * dim, dim, rng),
            dim,
        }
    }

    /// `tokens[N,n,d]` refined against `context[N,m,d]`.
    pub fn forward(&self, ctx: &mut Ctx, tokens: Var, context: Var) -> Result<(Var, BlockTrace)> {
        let ts = ctx.graph.shape(tokens).to_vec();
        let cs = ctx.graph.shape(context).to_vec();
        ensure!(
            ts.len() == 3 && ts[2] == self.dim,
            "block tokens must be [N,n,{}], got {ts:?}",
            self.dim
        );
        ensure!(
            cs.len() == 3 && cs[0] == ts[0] && cs[2] == self.dim,
            "block context {cs:?} does not match tokens {ts:?}"
        );
        let h = self.norm_self.forward(ctx, tokens);
        let (sa, self_weights) = self.self_attn.forward(ctx, h, h);
        let x = ctx.graph.add(tokens, sa);

        let h = self.norm_cross.forward(ctx, x);
        let kv = self.norm_context.forward(ctx, context);
        let (ca, cross_weights) = self.cross_attn.forward(ctx, h, kv);
        let x = ctx.graph.add(x, ca);

        let h = self.norm_ff.forward(ctx, x);
        let rows = ts[0] * ts[1];
        let h = ctx.graph.reshape(h, &[rows, self.dim]);
        let h = self.ff_in.forward(ctx, h);
        let h = ctx.graph.gelu(h);
        let h = self.ff_out.forward(ctx, h);
        let h = ctx.graph.reshape(h, &ts);
        let x = ctx.graph.add(x, h);
        Ok((
            x,
            BlockTrace {
                self_weights,
                cross_weights,
            },
        ))
    }
}

#[derive(Clone, Debug)]
pub struct KnowledgeRetrieval {
    pub blocks: Vec<RetrievalBlock>,
}

impl KnowledgeRetrieval {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, depth: usize, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(depth >= 1, "retrieval depth must be at least 1");
        Self {
            blocks: (0..depth)
                .map(|i| RetrievalBlock::new(store, &format!("retrieval.block{i}"), dim, heads, rng))
                .collect(),
        }
    }

    /// Applies every block in turn against the same context.
    pub fn forward(&self, ctx: &mut Ctx, tokens: Var, context: Var) -> Result<(Var, Vec<BlockTrace>)> {
        let mut x = tokens;
        let mut traces = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, tr) = b.forward(ctx, x, context)?;
            traces.push(tr);
            x = y;
        }
        Ok((x, traces))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn affinity_feature_matches_loops() {
        let mut r = rng(1);
        let a = Tensor::uniform(&[2, 5, 3], 1.0, &mut r);
        let v = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let mut g = Graph::new();
        let (av, vv) = (g.constant(a.clone()), g.constant(v.clone()));
        let f = affinity_feature(&mut g, av, vv).unwrap();
        let out = g.value(f).data();
        for b in 0..2 {
            for p in 0..5 {
                for k in 0..4 {
                    let mut s = 0.0;
                    for t in 0..3 {
                        s += a.data()[(b * 5 + p) * 3 + t] * v.data()[t * 4 + k];
                    }
                    assert!((out[(b * 5 + p) * 4 + k] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn one_hot_and_uniform_affinity() {
        let v = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 5.0, -1.0, 0.5]).unwrap();
        let mut onehot = vec![0.0; 4 * 3];
        for p in 0..4 {
            onehot[p * 3 + 1] = 1.0;
        }
        let mut g = Graph::new();
        let vv = g.constant(v);
        let a = g.constant(Tensor::new(&[1, 4, 3], onehot).unwrap());
        let f = affinity_feature(&mut g, a, vv).unwrap();
        for row in g.value(f).data().chunks(2) {
            assert_eq!(row, &[3.0, 5.0]);
        }
        let a = g.constant(Tensor::full(&[1, 2, 3], 1.0 / 3.0));
        let f = affinity_feature(&mut g, a, vv).unwrap();
        for row in g.value(f).data().chunks(2) {
            assert!((row[0] - 1.0).abs() < 1e-12 && (row[1] - 2.5).abs() < 1e-12);
        }
    }

    fn set_identity(store: &mut ParamStore, l: &Linear) {
        let w = store.get_mut(l.weight).data_mut();
        w.fill(0.0);
        for i in 0..l.in_dim {
            w[i * l.out_dim + i] = 1.0;
        }
    }

    #[test]
    fn cross_attention_over_identical_rows() {
        let mut r = rng(2);
        let mut store = ParamStore::new();
        let att = Attention::new(&mut store, "a", 8, 2, &mut r);
        set_identity(&mut store, &att.value);
        set_identity(&mut store, &att.output);
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 - 1.0).collect();
        let ctx_rows: Vec<f64> = (0..6).flat_map(|_| row.clone()).collect();
        let mut ctx = Ctx::new(&store, false);
        let q = ctx.graph.constant(Tensor::uniform(&[1, 4, 8], 1.0, &mut r));
        let kv = ctx.graph.constant(Tensor::new(&[1, 6, 8], ctx_rows).unwrap());
        let (out, w) = att.forward(&mut ctx, q, kv);
        for o in ctx.graph.value(out).data().chunks(8) {
            for (a, b) in o.iter().zip(&row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for wr in ctx.graph.value(w).data().chunks(6) {
            assert!((wr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_token_self_attention_is_value_path() {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let att = Attention::new(&mut store, "a", 8, 2, &mut r);
        let x = Tensor::uniform(&[2, 1, 8], 1.0, &mut r);
        let mut ctx = Ctx::new(&store, false);
        let xv = ctx.graph.constant(x.clone());
        let (out, _) = att.forward(&mut ctx, xv, xv);
        // with one key the softmax is 1, so out = W_o (W_v x + b_v) + b_o
        let flat = ctx.graph.reshape(xv, &[2, 8]);
        let v = att.value.forward(&mut ctx, flat);
        let o = att.output.forward(&mut ctx, v);
        let want = ctx.graph.value(o).data().to_vec();
        for (a, b) in ctx.graph.value(out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let mut r = rng(4);
        let mut store = ParamStore::new();
        let block = RetrievalBlock::new(&mut store, "b", 8, 2, &mut r);
        let x = Tensor::uniform(&[1, 5, 8], 1.0, &mut r);
        let c = Tensor::uniform(&[1, 5, 8], 1.0, &mut r);
        let perm = [3usize, 0, 4, 1, 2];
        let permute_rows = |t: &Tensor| {
            let mut out = Vec::new();
            for &p in &perm {
                out.extend_from_slice(&t.data()[p * 8..(p + 1) * 8]);
            }
            Tensor::new(&[1, 5, 8], out).unwrap()
        };
        let mut ctx = Ctx::new(&store, false);
        let (xv, cv) = (ctx.graph.constant(x.clone()), ctx.graph.constant(c.clone()));
        let (y, _) = block.forward(&mut ctx, xv, cv).unwrap();
        let y = ctx.graph.value(y).clone();
        let xp = ctx.graph.constant(permute_rows(&x));
        let cp = ctx.graph.constant(permute_rows(&c));
        let (yp, _) = block.forward(&mut ctx, xp, cp).unwrap();
        for (a, b) in ctx.graph.value(yp).data().iter().zip(permute_rows(&y).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn depth_one_equals_single_block() {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let kr = KnowledgeRetrieval::new(&mut store, 1, 8, 2, &mut r);
        let x = Tensor::uniform(&[2, 4, 8], 1.0, &mut r);
        let c = Tensor::uniform(&[2, 4, 8], 1.0, &mut r);
        let mut ctx = Ctx::new(&store, false);
        let (xv, cv) = (ctx.graph.constant(x), ctx.graph.constant(c));
        let (a, _) = kr.forward(&mut ctx, xv, cv).unwrap();
        let (b, _) = kr.blocks[0].forward(&mut ctx, xv, cv).unwrap();
        assert_eq!(ctx.graph.value(a), ctx.graph.value(b));
    }
}
