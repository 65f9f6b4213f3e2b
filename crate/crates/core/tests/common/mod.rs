//! Independent oracles shared by the integration tests and the acceptance
//! suite. Reference values are computed here from first principles; the
//! library is called only to produce the value under test.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use taxonnet::autograd::Graph;
use taxonnet::model::{Architecture, ModelVars};
use taxonnet::objective::{build_loss, gaussian_noise, LossBatch, LossConfig, LossVars};
use taxonnet::evaluation::{prob_dendrogram_purity, prob_leaf_purity};
use taxonnet::taxonomy::{kl_diag_gaussians, moment_match, TreeVars};
use taxonnet::{AssignmentTable, Likelihood, Model, ModelSpec, NodeParams, TaxonomyTree, Tensor, VarianceMode};

// ---- finite differences over the full loss ---------------------------------

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-3;

pub const TERMS: [&str; 8] = [
    "recon",
    "kl_cluster",
    "kl_assign",
    "r_ent",
    "r_dkl",
    "ntxent_embed",
    "ntxent_cluster",
    "total",
];

/// A fixed batch, noise and parameter set on which every loss term is a
/// deterministic function of the parameters.
pub struct FdInstance {
    pub model: Model,
    pub tree: TaxonomyTree,
    pub x: Tensor,
    pub eps: Tensor,
    pub x2: Tensor,
    pub eps2: Tensor,
    pub cfg: LossConfig,
}

fn pick(l: &LossVars, term: &str) -> taxonnet::autograd::Var {
    match term {
        "recon" => l.recon,
        "kl_cluster" => l.kl_cluster,
        "kl_assign" => l.kl_assign,
        "r_ent" => l.r_ent,
        "r_dkl" => l.r_dkl,
        "ntxent_embed" => l.ntxent_embed,
        "ntxent_cluster" => l.ntxent_cluster,
        "total" => l.total,
        other => panic!("unknown term {other}"),
    }
}

impl FdInstance {
    fn graph(&self, model: &Model, tree: &TaxonomyTree) -> (Graph, LossVars, ModelVars, TreeVars) {
        let mut g = Graph::new();
        let mv = ModelVars::register(&mut g, model);
        let tv = TreeVars::register(&mut g, tree);
        let batch = LossBatch {
            x: &self.x,
            eps: &self.eps,
            contrast: Some((&self.x2, &self.eps2)),
        };
        let l = build_loss(&mut g, model, &mv, tree, tv, batch, &self.cfg).expect("loss builds");
        (g, l, mv, tv)
    }

    pub fn value(&self, model: &Model, tree: &TaxonomyTree, term: &str) -> f64 {
        let (g, l, _, _) = self.graph(model, tree);
        g.value(pick(&l, term)).item()
    }

    /// Parameter arrays in a fixed order, named by group.
    fn arrays(model: &Model, tree: &TaxonomyTree) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = model
            .param_names()
            .iter()
            .cloned()
            .zip(model.params().iter().cloned())
            .collect();
        out.push(("tree.leaf_means".into(), tree.leaf_means.clone()));
        out.push(("tree.leaf_log_vars".into(), tree.leaf_log_vars.clone()));
        out.push(("tree.branch_logits".into(), tree.branch_logits.clone()));
        out
    }

    fn with_array(&self, k: usize, value: Tensor) -> (Model, TaxonomyTree) {
        let mut model = self.model.clone();
        let mut tree = self.tree.clone();
        let np = model.params().len();
        match k {
            k if k < np => model.params_mut()[k] = value,
            k if k == np => tree.leaf_means = value,
            k if k == np + 1 => tree.leaf_log_vars = value,
            _ => tree.branch_logits = value,
        }
        (model, tree)
    }

    /// Largest elementwise relative error between the analytic gradient of
    /// `term` and central differences, per parameter array. Arrays longer
    /// than `per_array` are probed at evenly strided entries.
    pub fn check(&self, term: &str, h: f64, per_array: usize) -> Vec<(String, f64)> {
        let (g, l, mv, tv) = self.graph(&self.model, &self.tree);
        let grads = g.backward(pick(&l, term));
        let mut vars: Vec<_> = mv.vars().to_vec();
        vars.extend([tv.leaf_means, tv.leaf_log_vars, tv.branch_logits]);
        let arrays = Self::arrays(&self.model, &self.tree);
        let mut out = Vec::new();
        for (k, (name, base)) in arrays.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], base.shape());
            let mut worst: f64 = 0.0;
            let stride = base.len().div_ceil(per_array).max(1);
            for i in (0..base.len()).step_by(stride) {
                let mut plus = base.clone();
                plus.data_mut()[i] += h;
                let mut minus = base.clone();
                minus.data_mut()[i] -= h;
                let (mp, tp) = self.with_array(k, plus);
                let (mm, tm) = self.with_array(k, minus);
                let fd = (self.value(&mp, &tp, term) - self.value(&mm, &tm, term)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5);
                worst = worst.max(err);
            }
            out.push((name.clone(), worst));
        }
        out
    }
}

/// Depth-2 tree, two latent dimensions, an `(8, 8)` mlp and a batch of four,
/// with projection heads so the contrastive terms are live.
///
/// Central differences are meaningless across a rectifier kink, so draws
/// with any rectifier input within `5·FD_STEP` of zero are rejected.
pub fn fd_instance(likelihood: Likelihood, mode: VarianceMode, seed: u64) -> FdInstance {
    for attempt in 0..1000 {
        let inst = draw_fd_instance(likelihood, mode, seed * 1000 + attempt);
        if min_kink_distance(&inst) >= 5.0 * FD_STEP {
            return inst;
        }
    }
    panic!("no kink-free instance for seed {seed}");
}

fn dense(h: &Tensor, model: &Model, name: &str) -> Tensor {
    let w = model.param(&format!("{name}.w")).expect("weight");
    let b = model.param(&format!("{name}.b")).expect("bias");
    let mut out = Tensor::zeros(h.rows(), w.cols());
    for r in 0..h.rows() {
        for c in 0..w.cols() {
            let s: f64 = (0..h.cols()).map(|k| h.get(r, k) * w.get(k, c)).sum();
            out.set(r, c, s + b.get(0, c));
        }
    }
    out
}

/// Smallest absolute rectifier input anywhere in the forward pass of the
/// instance's loss, recomputed by hand from the raw parameters.
pub fn min_kink_distance(inst: &FdInstance) -> f64 {
    let spec = inst.model.spec();
    let mut closest = f64::INFINITY;
    let mut through_relu = |a: Tensor| {
        closest = a.data().iter().fold(closest, |m, v| m.min(v.abs()));
        a.map(|v| v.max(0.0))
    };
    for (x, eps) in [(&inst.x, &inst.eps), (&inst.x2, &inst.eps2)] {
        let mut h = x.clone();
        for k in 0..spec.hidden.len() {
            h = through_relu(dense(&h, &inst.model, &format!("enc.{k}")));
        }
        through_relu(dense(&h, &inst.model, "proj.embed.0"));
        let mean = dense(&h, &inst.model, "enc.mean");
        let lv = dense(&h, &inst.model, "enc.log_var");
        let mut z = mean.clone();
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            *v += (0.5 * lv.data()[i].clamp(-10.0, 10.0)).exp() * eps.data()[i];
        }
        for k in 0..spec.hidden.len() {
            z = through_relu(dense(&z, &inst.model, &format!("dec.{k}")));
        }
    }
    closest
}

fn draw_fd_instance(likelihood: Likelihood, mode: VarianceMode, seed: u64) -> FdInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = 2;
    let spec = ModelSpec {
        input_shape: [1, 1, 5],
        latent_dim: 2,
        architecture: Architecture::Mlp,
        hidden: vec![8, 8],
        likelihood,
        projection_nodes: taxonnet::taxonomy::node_count(depth),
    };
    let model = Model::new(spec, &mut rng).unwrap();
    let mut tree = TaxonomyTree::new(depth, 2, mode, &mut rng);
    // move away from the symmetric start so every gradient is generic
    for v in tree.leaf_means.data_mut() {
        *v = rng.random_range(-1.5..1.5);
    }
    for v in tree.leaf_log_vars.data_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    for v in tree.branch_logits.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let draw = |rng: &mut ChaCha8Rng| {
        let data = (0..4 * 5)
            .map(|_| match likelihood {
                Likelihood::Bernoulli => rng.random_range(0.05..0.95),
                Likelihood::GaussianUnitVariance => rng.random_range(-1.0..1.0),
            })
            .collect();
        Tensor::from_vec(4, 5, data)
    };
    let x = draw(&mut rng);
    let x2 = draw(&mut rng);
    let mut cfg = LossConfig::default();
    // keep every sibling hinge strictly active, away from its kink
    cfg.weights.margin = 100.0;
    cfg.weights.lambda_dkl = 1.0;
    FdInstance {
        model,
        tree,
        x,
        eps: gaussian_noise(4, 2, seed + 1),
        x2,
        eps2: gaussian_noise(4, 2, seed + 2),
        cfg,
    }
}

// ---- Gaussian algebra -------------------------------------------------------

fn var_at(p: &NodeParams, k: usize) -> f64 {
    if p.log_var.len() == 1 {
        p.log_var[0].exp()
    } else {
        p.log_var[k].exp()
    }
}

fn log_density(z: &[f64], p: &NodeParams) -> f64 {
    z.iter()
        .enumerate()
        .map(|(k, &zk)| {
            let v = var_at(p, k);
            -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (zk - p.mean[k]).powi(2) / v)
        })
        .sum()
}

/// Monte-Carlo estimate of `E_q[log q − log p]` and its standard error.
pub fn mc_kl(q: &NodeParams, p: &NodeParams, n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = q.mean.len();
    let (mut s, mut s2) = (0.0, 0.0);
    let mut z = vec![0.0; d];
    for _ in 0..n {
        for (k, zk) in z.iter_mut().enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *zk = q.mean[k] + var_at(q, k).sqrt() * e;
        }
        let v = log_density(&z, q) - log_density(&z, p);
        s += v;
        s2 += v * v;
    }
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean).max(0.0);
    (mean, (var / n as f64).sqrt())
}

/// Empirical mean and isotropic variance `(1/D)·Σ_k Var[z_k]` of the
/// two-component mixture `α·left + (1−α)·right`.
pub fn mc_mixture_moments(left: &NodeParams, right: &NodeParams, alpha: f64, n: usize, seed: u64) -> (Vec<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = left.mean.len();
    let mut s = vec![0.0; d];
    let mut s2 = vec![0.0; d];
    for _ in 0..n {
        let c = if rng.random::<f64>() < alpha { left } else { right };
        for k in 0..d {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = c.mean[k] + var_at(c, k).sqrt() * e;
            s[k] += z;
            s2[k] += z * z;
        }
    }
    let nf = n as f64;
    let mean: Vec<f64> = s.iter().map(|v| v / nf).collect();
    let var = (0..d).map(|k| s2[k] / nf - mean[k] * mean[k]).sum::<f64>() / d as f64;
    (mean, var)
}

pub fn random_node(rng: &mut impl Rng, d: usize, isotropic: bool) -> NodeParams {
    let lv = if isotropic { 1 } else { d };
    NodeParams {
        mean: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
        log_var: (0..lv).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

// ---- clustering metrics, written out straight from their definitions -------

/// Probabilistic dendrogram purity over every same-class pair.
pub fn brute_dendrogram_purity(p: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = p.len();
    let t = p[0].len();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] != labels[j] {
                continue;
            }
            let k = labels[i];
            let mut num = 0.0;
            let mut den = 0.0;
            for c in 0..t {
                let shared = p[i][c] * p[j][c];
                let mut in_class = 0.0;
                let mut all = 0.0;
                for l in 0..n {
                    all += p[l][c];
                    if labels[l] == k {
                        in_class += p[l][c];
                    }
                }
                let purity = if all > 0.0 { in_class / all } else { 0.0 };
                num += shared * purity;
                den += shared;
            }
            total += if den > 0.0 { num / den } else { 0.0 };
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Probabilistic leaf purity: majority mass per leaf over total leaf mass.
pub fn brute_leaf_purity(p: &[Vec<f64>], labels: &[usize], depth: usize) -> f64 {
    let first = (1usize << depth) - 1;
    let t = p[0].len();
    let y = labels.iter().max().unwrap() + 1;
    let mut majority = 0.0;
    let mut total = 0.0;
    for leaf in first..t {
        let mut mass = vec![0.0; y];
        for (i, row) in p.iter().enumerate() {
            mass[labels[i]] += row[leaf];
            total += row[leaf];
        }
        // lowest class index wins ties
        let mut best = 0;
        for k in 1..y {
            if mass[k] > mass[best] {
                best = k;
            }
        }
        majority += mass[best];
    }
    majority / total
}

/// Classical leaf purity of a hard clustering: Σ_leaf max_class count / N.
pub fn classical_purity(assign: &[usize], labels: &[usize]) -> f64 {
    let mut counts = std::collections::BTreeMap::<(usize, usize), usize>::new();
    for (&a, &l) in assign.iter().zip(labels) {
        *counts.entry((a, l)).or_default() += 1;
    }
    let mut best = std::collections::BTreeMap::<usize, usize>::new();
    for (&(a, _), &c) in &counts {
        let e = best.entry(a).or_default();
        *e = (*e).max(c);
    }
    best.values().sum::<usize>() as f64 / assign.len() as f64
}

/// Random soft table with strictly positive rows summing to one.
pub fn random_soft_rows(rng: &mut impl Rng, n: usize, t: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..t).map(|_| rng.random::<f64>().powi(2) + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows)
}

// ---- oracle sweeps, shared with the acceptance suite -----------------------

pub const KL_SAMPLES: usize = 100_000;
pub const MIXTURE_SAMPLES: usize = 1_000_000;

/// Worst `|closed form − Monte Carlo| / standard error` over `draws` random
/// pairs of diagonal or isotropic Gaussians.
pub fn kl_sweep(draws: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for draw in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + draw);
        let d = rng.random_range(1..=4);
        let iso = draw % 2 == 0;
        let q = random_node(&mut rng, d, iso);
        let p = random_node(&mut rng, d, iso);
        let exact = kl_diag_gaussians(&q, &p);
        let (mc, se) = mc_kl(&q, &p, KL_SAMPLES, 7 + draw);
        worst = worst.max((exact - mc).abs() / se);
    }
    worst
}

/// Worst relative error of moment-matched parents against sampled
/// isotropic two-component mixtures.
pub fn moment_sweep(draws: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for draw in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + draw);
        let d = rng.random_range(1..=4);
        let left = random_node(&mut rng, d, true);
        let right = random_node(&mut rng, d, true);
        let alpha = rng.random_range(0.05..0.95);
        let parent = moment_match(&left, &right, alpha);
        let (mean, var) = mc_mixture_moments(&left, &right, alpha, MIXTURE_SAMPLES, 31 + draw);
        let exact_var = parent.log_var[0].exp();
        let scale = exact_var.sqrt();
        for k in 0..d {
            // a mean near zero has no meaningful relative error; measure it in units of spread
            worst = worst.max((parent.mean[k] - mean[k]).abs() / parent.mean[k].abs().max(scale));
        }
        worst = worst.max((exact_var - var).abs() / exact_var);
    }
    worst
}

fn soft_instance(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=3);
    let t = (1 << (depth + 1)) - 1;
    let y = rng.random_range(1..=4);
    // more samples than classes guarantees a same-class pair
    let n = rng.random_range(y + 1..=20);
    let rows = random_soft_rows(&mut rng, n, t);
    let labels = (0..n).map(|_| rng.random_range(0..y)).collect();
    (rows, labels, depth)
}

fn labelled(rows: &[Vec<f64>], labels: &[usize]) -> AssignmentTable {
    AssignmentTable::new(to_tensor(rows), Some(labels.to_vec())).expect("valid table")
}

/// Worst absolute gaps `(dendrogram, leaf)` between the library metrics and
/// the brute-force definitions over random soft tables.
pub fn metric_sweep(instances: u64) -> (f64, f64) {
    let (mut dp, mut lp): (f64, f64) = (0.0, 0.0);
    for seed in 0..instances {
        let (rows, labels, depth) = soft_instance(seed);
        let table = labelled(&rows, &labels);
        let got = prob_dendrogram_purity(&table, 0, 0).expect("dendrogram purity");
        dp = dp.max((got - brute_dendrogram_purity(&rows, &labels)).abs());
        let got = prob_leaf_purity(&table, depth).expect("leaf purity");
        lp = lp.max((got - brute_leaf_purity(&rows, &labels, depth)).abs());
    }
    (dp, lp)
}

/// Number of one-hot leaf tables whose leaf purity differs in any bit
/// from the classical count.
pub fn hard_reduction_mismatches(instances: u64) -> usize {
    let mut bad = 0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let depth = rng.random_range(1..=3);
        let first = (1 << depth) - 1;
        let t = 2 * first + 1;
        let n = rng.random_range(1..=20);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let leaves: Vec<usize> = (0..n).map(|_| rng.random_range(first..t)).collect();
        let rows: Vec<Vec<f64>> = leaves
            .iter()
            .map(|&l| (0..t).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
            .collect();
        let got = prob_leaf_purity(&labelled(&rows, &labels), depth).expect("leaf purity");
        if got != classical_purity(&leaves, &labels) {
            bad += 1;
        }
    }
    bad
}

/// Soft table `i` of the metric sweep, for tests that need the raw input.
pub fn metric_instance(seed: u64) -> (AssignmentTable, usize) {
    let (rows, labels, depth) = soft_instance(seed);
    (labelled(&rows, &labels), depth)
}
