//! Task prototype bank, cosine task-similarity, softmax task-affinity and the
//! prototype losses (TKE, TC and their sum).

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{ensure, Result};
use crate::nn::{Conv2d, Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Norm floor used by every cosine in this module.
pub const COSINE_EPS: f64 = 1e-8;
pub const PROTOTYPE_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct TaskPrototype {
    pub slots: ParamId,
    pub tasks: usize,
    pub dim: usize,
    /// When set the optimizer leaves the slots untouched.
    pub frozen: bool,
}

impl TaskPrototype {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, tasks: usize, dim: usize, rng: &mut R) -> Self {
        let slots = store.weight(
            "prototype.slots",
            Tensor::normal(&[tasks, dim], PROTOTYPE_INIT_STD, rng),
        );
        Self {
            slots,
            tasks,
            dim,
            frozen: false,
        }
    }
}

/// 1×1 convolution `c → d` followed by flattening of `(h, w)`.
#[derive(Clone, Debug)]
pub struct TokenProjection {
    pub conv: Conv2d,
}

impl TokenProjection {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, in_c: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(store, "tokens", in_c, dim, 1, 1, true, rng),
        }
    }

    /// `[B,h,w,c] -> [B,hw,d]`.
    pub fn forward(&self, ctx: &mut Ctx, ft: Var) -> Var {
        let s = ctx.graph.shape(ft).to_vec();
        let y = self.conv.forward(ctx, ft);
        ctx.graph.reshape(y, &[s[0], s[1] * s[2], self.conv.out_c])
    }
}

/// Cosine of every token `[B,hw,d]` with every slot `[T,d]`, giving `[B,hw,T]`.
pub fn task_similarity(g: &mut Graph, tokens: Var, slots: Var) -> Result<Var> {
    let ts = g.shape(tokens).to_vec();
    let vs = g.shape(slots).to_vec();
    ensure!(ts.len() == 3, "tokens must be [B,hw,d], got {ts:?}");
    ensure!(
        vs.len() == 2 && vs[1] == ts[2],
        "prototype {vs:?} does not match token width {}",
        ts[2]
    );
    let flat = g.reshape(tokens, &[ts[0] * ts[1], ts[2]]);
    let tn = g.l2_normalize(flat, COSINE_EPS);
    let vn = g.l2_normalize(slots, COSINE_EPS);
    let s = g.matmul_t(tn, vn, false, true);
    Ok(g.reshape(s, &[ts[0], ts[1], vs[0]]))
}

/// Softmax of `S / temperature` over the task axis.
pub fn task_affinity(g: &mut Graph, sim: Var, temperature: f64) -> Result<Var> {
    ensure!(
        temperature > 0.0 && temperature.is_finite(),
        "temperature must be positive, got {temperature}"
    );
    let scaled = g.scale(sim, 1.0 / temperature);
    Ok(g.softmax(scaled))
}

pub struct TkeLoss {
    pub value: Var,
    /// No labeled (sample, task) pair contributed; `value` is a constant 0.
    pub skipped: bool,
    pub rows: usize,
}

/// Mean of `−log A[n,p,t_n]` over rows `n` with a target and all positions.
///
/// `targets[n]` is the labeled task whose slot row `n` should select, or
/// `None` for rows that do not contribute.
pub fn tke_loss(g: &mut Graph, affinity: Var, targets: &[Option<usize>]) -> Result<TkeLoss> {
    let s = g.shape(affinity).to_vec();
    ensure!(s.len() == 3, "affinity must be [N,hw,T], got {s:?}");
    let (n, hw, t) = (s[0], s[1], s[2]);
    ensure!(targets.len() == n, "{} targets for {n} rows", targets.len());
    let rows = targets.iter().filter(|x| x.is_some()).count();
    if rows == 0 {
        return Ok(TkeLoss {
            value: g.constant(Tensor::scalar(0.0)),
            skipped: true,
            rows: 0,
        });
    }
    let scale = 1.0 / (rows * hw) as f64;
    let mut idx = Vec::with_capacity(rows * hw);
    for (b, tgt) in targets.iter().enumerate() {
        if let Some(task) = *tgt {
            ensure!(task < t, "target task {task} out of range for {t} slots");
            idx.extend((0..hw).map(|p| (b * hw + p) * t + task));
        }
    }
    let picked = g.gather_flat(affinity, idx);
    let logs = g.ln(picked);
    let sum = g.sum_all(logs);
    Ok(TkeLoss {
        value: g.scale(sum, -scale),
        skipped: false,
        rows,
    })
}

/// Triplet-style consistency over per-task tokens `tokens[τ] = [B,hw,d]`.
///
/// Each task's batch-mean token map is the anchor; sample `i`'s own-task
/// tokens are the positive and its other-task tokens the negatives. The hinge
/// is `max(S_neg − S_pos + α, 0)`, or `max(S_pos − S_neg + α, 0)` when
/// `literal_sign` is set, averaged over all `T·B·(T−1)` triples.
pub fn tc_loss(g: &mut Graph, tokens: &[Var], margin: f64, literal_sign: bool) -> Result<Var> {
    ensure!(tokens.len() >= 2, "consistency needs at least two tasks");
    let s0 = g.shape(tokens[0]).to_vec();
    ensure!(s0.len() == 3, "tokens must be [B,hw,d], got {s0:?}");
    let b = s0[0];
    ensure!(b >= 1, "consistency needs a non-empty batch");
    for &x in tokens {
        ensure!(g.shape(x) == &s0[..], "token shapes differ across tasks");
    }
    let t = tokens.len();
    let width = s0[1] * s0[2];
    let flat: Vec<Var> = tokens.iter().map(|&x| g.reshape(x, &[b, width])).collect();
    let normed: Vec<Var> = flat.iter().map(|&x| g.l2_normalize(x, COSINE_EPS)).collect();
    let all = g.concat0(&normed);
    let mut hinges = Vec::with_capacity(t);
    for anchor_task in 0..t {
        let mean = g.mean_axis0(flat[anchor_task]);
        let mean = g.reshape(mean, &[1, width]);
        let anchor = g.l2_normalize(mean, COSINE_EPS);
        // cosines of every (task, sample) row with this anchor: [T·B, 1]
        let sims = g.matmul_t(all, anchor, false, true);
        let mut pos = Vec::with_capacity(b * (t - 1));
        let mut neg = Vec::with_capacity(b * (t - 1));
        for i in 0..b {
            for other in (0..t).filter(|&o| o != anchor_task) {
                pos.push(anchor_task * b + i);
                neg.push(other * b + i);
            }
        }
        let sp = g.gather_flat(sims, pos);
        let sn = g.gather_flat(sims, neg);
        let diff = if literal_sign { g.sub(sp, sn) } else { g.sub(sn, sp) };
        let shifted = g.add_scalar(diff, margin);
        hinges.push(g.relu(shifted));
    }
    let all_hinges = g.concat0(&hinges);
    Ok(g.mean_all(all_hinges))
}

pub fn akg_loss(g: &mut Graph, tke: Var, tc: Var) -> Var {
    g.add(tke, tc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let mut g = Graph::new();
        let slots = g.constant(t(&[3, 2], vec![1.0, 1.0, 0.0, 1.0, 2.0, -1.0]));
        let tokens = g.constant(t(&[1, 2, 2], vec![1.0, 0.0, 4.0, -2.0]));
        let s = task_similarity(&mut g, tokens, slots).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 0.707_106_78).abs() < 1e-8);
        assert_eq!(v[1], 0.0);
        // second token is a positive multiple of slot 2
        assert!((v[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[2, 4, 5], 1.0, &mut rng);
        let v = Tensor::uniform(&[3, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let vs = g.constant(v);
        let a = g.constant(x.clone());
        let b = g.constant(x.map(|e| e * 37.5));
        let sa = task_similarity(&mut g, a, vs).unwrap();
        let sb = task_similarity(&mut g, b, vs).unwrap();
        for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn affinity_examples() {
        let mut g = Graph::new();
        let s = g.constant(t(&[1, 1, 2], vec![1.0, 0.0]));
        let a = task_affinity(&mut g, s, 1.0).unwrap();
        let v = g.value(a).data();
        assert!((v[0] - 0.731_058_58).abs() < 1e-8 && (v[1] - 0.268_941_42).abs() < 1e-8);
        let s = g.constant(Tensor::full(&[1, 3, 5], 0.4));
        let a = task_affinity(&mut g, s, 1.0).unwrap();
        assert!(g.value(a).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
        assert!(task_affinity(&mut g, s, 0.0).is_err());
    }

    #[test]
    fn tke_examples() {
        let mut g = Graph::new();
        let mut onehot = vec![0.0; 4 * 3];
        for p in 0..4 {
            onehot[p * 3 + 1] = 1.0;
        }
        let a = g.constant(t(&[1, 4, 3], onehot));
        let l = tke_loss(&mut g, a, &[Some(1)]).unwrap();
        assert_eq!(g.value(l.value).item(), 0.0);
        let a = g.constant(Tensor::full(&[2, 4, 5], 0.2));
        let l = tke_loss(&mut g, a, &[Some(0), Some(4)]).unwrap();
        assert!((g.value(l.value).item() - 1.609_437_91).abs() < 1e-8);
        let a = g.constant(Tensor::full(&[1, 4, 2], 0.5));
        let l = tke_loss(&mut g, a, &[Some(1)]).unwrap();
        assert!((g.value(l.value).item() - 0.693_147_18).abs() < 1e-8);
        let l = tke_loss(&mut g, a, &[None]).unwrap();
        assert!(l.skipped && g.value(l.value).item() == 0.0);
    }

    #[test]
    fn tke_ignores_unlabeled_rows() {
        let mut g = Graph::new();
        let mut data = vec![0.5; 2 * 2 * 2];
        data[4..].copy_from_slice(&[0.9, 0.1, 0.9, 0.1]);
        let a = g.param(t(&[2, 2, 2], data));
        let l = tke_loss(&mut g, a, &[Some(0), None]).unwrap();
        let want = -(0.5f64.ln());
        assert!((g.value(l.value).item() - want).abs() < 1e-12);
        let grads = g.backward(l.value);
        assert!(grads.get(a).unwrap().data()[4..].iter().all(|&x| x == 0.0));
    }

    fn token_pair(g: &mut Graph, a: Vec<f64>, b: Vec<f64>) -> Vec<Var> {
        vec![g.constant(t(&[1, 1, 2], a)), g.constant(t(&[1, 1, 2], b))]
    }

    #[test]
    fn tc_margin_satisfied_is_zero() {
        let mut g = Graph::new();
        let toks = token_pair(&mut g, vec![1.0, 0.0], vec![0.0, 1.0]);
        let l = tc_loss(&mut g, &toks, 0.2, false).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn tc_hinge_value() {
        // B = 1 so each anchor is its own task's token: S_pos = 1 and S_neg = cos θ
        let cos: f64 = 0.95;
        let sin = (1.0 - cos * cos).sqrt();
        let mut g = Graph::new();
        let toks = token_pair(&mut g, vec![1.0, 0.0], vec![cos, sin]);
        let l = tc_loss(&mut g, &toks, 0.1, false).unwrap();
        assert!((g.value(l).item() - 0.05).abs() < 1e-12);
        // printed sign: max(1 − 0.95 + 0.1, 0) = 0.15
        let l = tc_loss(&mut g, &toks, 0.1, true).unwrap();
        assert!((g.value(l).item() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn tc_identical_tokens_give_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[3, 4, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let v = g.constant(x);
        let l = tc_loss(&mut g, &[v, v, v], 0.2, false).unwrap();
        assert!((g.value(l).item() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn tc_rejects_empty_batch() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::zeros(&[0, 4, 5]));
        assert!(tc_loss(&mut g, &[v, v], 0.2, false).is_err());
    }

    #[test]
    fn akg_adds() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.6094));
        let b = g.constant(Tensor::scalar(0.05));
        let s = akg_loss(&mut g, a, b);
        assert!((g.value(s).item() - 1.6594).abs() < 1e-12);
    }

    #[test]
    fn projection_shapes_and_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = TokenProjection::new(&mut store, 4, 4, &mut rng);
        let w = store.get_mut(p.conv.weight).data_mut();
        w.fill(0.0);
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        let x = Tensor::uniform(&[2, 3, 3, 4], 1.0, &mut rng);
        let mut ctx = Ctx::new(&store, false);
        let xv = ctx.graph.constant(x.clone());
        let y = p.forward(&mut ctx, xv);
        assert_eq!(ctx.graph.shape(y), &[2, 9, 4]);
        assert_eq!(ctx.graph.value(y).data(), x.data());
    }
}
