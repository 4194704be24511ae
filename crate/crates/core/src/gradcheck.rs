//! Central finite-difference gradient verification.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every backward rule on the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::nn::{Ctx, ParamId, ParamKind, ParamStore};
use crate::prototype::{task_affinity, task_similarity, tc_loss, tke_loss};
use crate::retrieval::{affinity_feature, RetrievalBlock};
use crate::tensor::Tensor;
use crate::vq::{tae_loss, Reconstructor};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Magnitude below which errors are measured against this floor instead
    /// of the gradient itself.
    pub floor: f64,
    /// Upper bound on probed elements per input; larger inputs are strided.
    pub max_probes: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_probes: 512,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub probes: usize,
    /// (input, element) of the worst probe.
    pub worst: (usize, usize),
    /// Largest analytic gradient magnitude; zero means the check was vacuous.
    pub max_abs_grad: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol && self.max_abs_grad > 0.0
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `build`'s scalar output w.r.t. every input
/// against central differences.
pub fn check<F>(name: &str, inputs: &[Tensor], cfg: &GradCheckConfig, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |probe: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };

    let mut worst = (0, 0);
    let mut max_rel = 0.0f64;
    let mut probes = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = n.div_ceil(cfg.max_probes).max(1);
        for e in (0..n).step_by(stride) {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + cfg.step;
            let up = eval(&work);
            work[i].data_mut()[e] = orig - cfg.step;
            let down = eval(&work);
            work[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let rel = relative_error(analytic[i].data()[e], numeric, cfg.floor);
            probes += 1;
            if !(rel <= max_rel) {
                max_rel = rel;
                worst = (i, e);
            }
        }
    }
    GradCheckReport {
        name: name.to_string(),
        max_rel_error: max_rel,
        probes,
        worst,
        max_abs_grad: analytic.iter().map(Tensor::max_abs).fold(0.0, f64::max),
    }
}

/// Tolerance every suite check must meet.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Random linear functional, so every output element reaches the gradient.
fn probe_functional(g: &mut Graph, v: Var, seed: u64) -> Var {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(g.shape(v), 1.0, &mut r).into_data();
    g.weighted_sum(v, w)
}

/// Checks a stored module: `inputs` come first, then every weight of `store`.
fn check_module<F>(name: &str, store: &ParamStore, inputs: &[Tensor], cfg: &GradCheckConfig, build: F) -> GradCheckReport
where
    F: Fn(&mut Ctx, &[Var]) -> Var,
{
    let ids: Vec<ParamId> = store
        .ids()
        .filter(|&id| store.entry(id).kind == ParamKind::Weight)
        .collect();
    let mut all = inputs.to_vec();
    all.extend(ids.iter().map(|&id| store.get(id).clone()));
    let n = inputs.len();
    check(name, &all, cfg, |g, vars| {
        let mut ctx = Ctx::with_graph(store, std::mem::take(g), true);
        for (&id, &v) in ids.iter().zip(&vars[n..]) {
            ctx.bind(id, v);
        }
        let out = build(&mut ctx, &vars[..n]);
        *g = ctx.graph;
        out
    })
}

/// The full finite-difference suite over the loss and retrieval building
/// blocks, at B=2, T=3, d=8, two heads.
pub fn standard_suite(seed: u64) -> Vec<GradCheckReport> {
    let cfg = GradCheckConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, t, hw, d) = (2usize, 3usize, 16usize, 8usize);
    let mut out = Vec::new();

    let recon = Tensor::uniform(&[b, 3, 4, 4], 2.0, &mut rng);
    let image = Tensor::uniform(&[b, 3, 4, 4], 2.0, &mut rng);
    out.push(check("tae_loss", &[recon, image], &cfg, |g, v| {
        tae_loss(g, v[0], v[1]).expect("shapes match")
    }));

    // straight-through and stop-gradient terms are surrogate gradients by
    // design, so the reconstruction path is checked on its own
    let mut store = ParamStore::new();
    let rec = Reconstructor::new(&mut store, d, 2, &mut rng);
    let fi = Tensor::uniform(&[b, 2, 2, d], 1.0, &mut rng);
    let img = Tensor::uniform(&[b, 3, 4, 4], 1.0, &mut rng).map(f64::abs);
    out.push(check_module("tae_reconstruction", &store, &[fi], &cfg, |ctx, v| {
        let image = ctx.graph.constant(img.clone());
        let r = rec.forward(ctx, v[0]);
        tae_loss(&mut ctx.graph, r, image).expect("shapes match")
    }));

    let tokens = Tensor::uniform(&[t * b, hw, d], 1.0, &mut rng);
    let slots = Tensor::normal(&[t, d], 0.5, &mut rng);
    // one-label style: each sample supervises a single task
    let targets: Vec<Option<usize>> = (0..t)
        .flat_map(|task| (0..b).map(move |i| (i % t == task || i + 1 == task).then_some(task)))
        .collect();
    out.push(check("tke_loss", &[tokens.clone(), slots.clone()], &cfg, |g, v| {
        let s = task_similarity(g, v[0], v[1]).expect("shapes match");
        let a = task_affinity(g, s, 0.7).expect("positive temperature");
        tke_loss(g, a, &targets).expect("valid targets").value
    }));

    // a shared component keeps positives and negatives within the margin,
    // so the hinge is active for most triples
    let shared = Tensor::uniform(&[b, hw, d], 1.0, &mut rng);
    let per_task: Vec<Tensor> = (0..t)
        .map(|_| {
            let mut x = Tensor::uniform(&[b, hw, d], 0.3, &mut rng);
            x.add_assign(&shared);
            x
        })
        .collect();
    for (name, literal) in [("tc_loss", false), ("tc_loss_literal_sign", true)] {
        out.push(check(name, &per_task, &cfg, |g, v| {
            tc_loss(g, v, 0.2, literal).expect("at least two tasks")
        }));
    }

    let logits = Tensor::uniform(&[b, hw, t], 2.0, &mut rng);
    out.push(check("affinity_feature", &[logits, slots.clone()], &cfg, |g, v| {
        let a = g.softmax(v[0]);
        let f = affinity_feature(g, a, v[1]).expect("shapes match");
        probe_functional(g, f, seed + 1)
    }));

    let mut store = ParamStore::new();
    let block = RetrievalBlock::new(&mut store, "block", d, 2, &mut rng);
    let x = Tensor::uniform(&[b, 9, d], 1.0, &mut rng);
    let ctxt = Tensor::uniform(&[b, 9, d], 1.0, &mut rng);
    out.push(check_module("retrieval_block", &store, &[x, ctxt], &cfg, |ctx, v| {
        let (y, _) = block.forward(ctx, v[0], v[1]).expect("shapes match");
        probe_functional(&mut ctx.graph, y, seed + 2)
    }));
    out
}
