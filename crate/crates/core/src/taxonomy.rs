//! Complete-binary-tree mixture-of-Gaussians prior.
//!
//! Only the leaves own Gaussian parameters. Every internal node is the
//! moment-matched Gaussian of the two-component mixture
//! `α·N(left) + (1−α)·N(right)`, computed bottom-up, with `α = logistic(logit)`.
//!
//! Nodes are stored in heap order: the root is 0, the children of `i` are
//! `2i+1` and `2i+2`, and the `2^depth` leaves occupy the tail of the array.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json_atomic};
use crate::tensor::Tensor;

/// Stored log-variances are clamped to this range before exponentiation.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

pub const TREE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMode {
    /// One variance per node; parent variance uses `(1/D)‖μ_child − μ_parent‖²`.
    #[default]
    Isotropic,
    /// One variance per node and dimension, moment-matched per coordinate.
    Diagonal,
}

impl VarianceMode {
    pub fn width(self, latent_dim: usize) -> usize {
        match self {
            VarianceMode::Isotropic => 1,
            VarianceMode::Diagonal => latent_dim,
        }
    }
}

// ---- heap indexing ---------------------------------------------------------

pub fn node_count(depth: usize) -> usize {
    (1 << (depth + 1)) - 1
}

pub fn leaf_count(depth: usize) -> usize {
    1 << depth
}

pub fn internal_count(depth: usize) -> usize {
    (1 << depth) - 1
}

pub fn first_leaf(depth: usize) -> usize {
    internal_count(depth)
}

pub fn parent(i: usize) -> Option<usize> {
    (i > 0).then(|| (i - 1) / 2)
}

pub fn children(i: usize) -> (usize, usize) {
    (2 * i + 1, 2 * i + 2)
}

/// Edge distance from the root.
pub fn node_depth(i: usize) -> usize {
    (usize::BITS - 1 - (i + 1).leading_zeros()) as usize
}

pub fn is_leaf(i: usize, depth: usize) -> bool {
    i >= first_leaf(depth) && i < node_count(depth)
}

/// Heap indices listed leaves first (left to right), then each level above
/// (left to right), ending with the root.
pub fn leaves_first_order(depth: usize) -> Vec<usize> {
    (0..=depth)
        .rev()
        .flat_map(|level| (1 << level) - 1..(1 << (level + 1)) - 1)
        .collect()
}

/// Inverse of [`leaves_first_order`]: heap index → flattened position.
pub fn leaves_first_position(depth: usize) -> Vec<usize> {
    let order = leaves_first_order(depth);
    let mut pos = vec![0; order.len()];
    for (p, &h) in order.iter().enumerate() {
        pos[h] = p;
    }
    pos
}

// ---- node parameters -------------------------------------------------------

/// Mean and log-variance of one node's Gaussian. `log_var` has length 1 in
/// isotropic mode, otherwise `D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeParams {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl NodeParams {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Self {
        assert!(
            log_var.len() == 1 || log_var.len() == mean.len(),
            "log_var must be scalar or match the mean"
        );
        Self { mean, log_var }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    pub fn log_var_at(&self, d: usize) -> f64 {
        if self.log_var.len() == 1 {
            self.log_var[0]
        } else {
            self.log_var[d]
        }
    }

    #[inline]
    pub fn var_at(&self, d: usize) -> f64 {
        self.log_var_at(d).exp()
    }

    pub fn std_at(&self, d: usize) -> f64 {
        (0.5 * self.log_var_at(d)).exp()
    }
}

/// Derived parameters of every node as two tables in heap order.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeTable {
    /// `|T| × D`
    pub means: Tensor,
    /// `|T| × 1` (isotropic) or `|T| × D`
    pub log_vars: Tensor,
}

impl NodeTable {
    pub fn len(&self) -> usize {
        self.means.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.means.rows() == 0
    }

    pub fn node(&self, i: usize) -> NodeParams {
        NodeParams::new(self.means.row(i).to_vec(), self.log_vars.row(i).to_vec())
    }

    pub fn nodes(&self) -> Vec<NodeParams> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    pub fn from_nodes(nodes: &[NodeParams]) -> Self {
        let means: Vec<Vec<f64>> = nodes.iter().map(|n| n.mean.clone()).collect();
        let lvs: Vec<Vec<f64>> = nodes.iter().map(|n| n.log_var.clone()).collect();
        Self {
            means: Tensor::from_rows(&means),
            log_vars: Tensor::from_rows(&lvs),
        }
    }
}

/// Moment-match one parent from its two children.
pub fn moment_match(left: &NodeParams, right: &NodeParams, alpha: f64) -> NodeParams {
    let d = left.dim();
    let mean: Vec<f64> = (0..d)
        .map(|k| alpha * left.mean[k] + (1.0 - alpha) * right.mean[k])
        .collect();
    let sq = |child: &NodeParams, k: usize| (child.mean[k] - mean[k]).powi(2);
    let log_var = if left.log_var.len() == 1 {
        let dl: f64 = (0..d).map(|k| sq(left, k)).sum::<f64>() / d as f64;
        let dr: f64 = (0..d).map(|k| sq(right, k)).sum::<f64>() / d as f64;
        let v = alpha * (left.var_at(0) + dl) + (1.0 - alpha) * (right.var_at(0) + dr);
        vec![v.ln()]
    } else {
        (0..d)
            .map(|k| {
                let v = alpha * (left.var_at(k) + sq(left, k))
                    + (1.0 - alpha) * (right.var_at(k) + sq(right, k));
                v.ln()
            })
            .collect()
    };
    NodeParams { mean, log_var }
}

// ---- the tree --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TaxonomyTree {
    depth: usize,
    latent_dim: usize,
    mode: VarianceMode,
    /// `2^depth × D`
    pub leaf_means: Tensor,
    /// `2^depth × 1` or `2^depth × D`
    pub leaf_log_vars: Tensor,
    /// `(2^depth − 1) × 1`, heap order over internal nodes.
    pub branch_logits: Tensor,
}

impl TaxonomyTree {
    /// Leaf means i.i.d. `N(0, 0.1²)`, leaf log-variances 0, logits 0 (α = ½).
    pub fn new(depth: usize, latent_dim: usize, mode: VarianceMode, rng: &mut impl Rng) -> Self {
        assert!(depth >= 1, "tree depth must be at least 1");
        assert!(latent_dim >= 1, "latent dimension must be at least 1");
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let l = leaf_count(depth);
        let means = (0..l * latent_dim).map(|_| normal.sample(rng)).collect();
        Self {
            depth,
            latent_dim,
            mode,
            leaf_means: Tensor::from_vec(l, latent_dim, means),
            leaf_log_vars: Tensor::zeros(l, mode.width(latent_dim)),
            branch_logits: Tensor::zeros(internal_count(depth), 1),
        }
    }

    pub fn from_parts(
        depth: usize,
        mode: VarianceMode,
        leaf_means: Tensor,
        leaf_log_vars: Tensor,
        branch_logits: Tensor,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Domain("tree depth must be at least 1".into()));
        }
        let l = leaf_count(depth);
        let d = leaf_means.cols();
        if leaf_means.rows() != l || d == 0 {
            return Err(Error::Shape(format!(
                "leaf means are {:?}, expected {l} rows",
                leaf_means.shape()
            )));
        }
        if leaf_log_vars.shape() != (l, mode.width(d)) {
            return Err(Error::Shape(format!(
                "leaf log-variances are {:?}, expected {:?}",
                leaf_log_vars.shape(),
                (l, mode.width(d))
            )));
        }
        if branch_logits.shape() != (internal_count(depth), 1) {
            return Err(Error::Shape(format!(
                "branch logits are {:?}, expected {:?}",
                branch_logits.shape(),
                (internal_count(depth), 1)
            )));
        }
        Ok(Self {
            depth,
            latent_dim: d,
            mode,
            leaf_means,
            leaf_log_vars,
            branch_logits,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn mode(&self) -> VarianceMode {
        self.mode
    }

    pub fn node_count(&self) -> usize {
        node_count(self.depth)
    }

    /// Convex weight of each internal node, heap order.
    pub fn alphas(&self) -> Vec<f64> {
        self.branch_logits.data().iter().map(|&l| sigmoid(l)).collect()
    }

    /// Derived parameters of all `|T|` nodes.
    pub fn derive_all_node_params(&self) -> Vec<NodeParams> {
        self.derive_with_alphas(&self.alphas())
    }

    /// Same as [`Self::derive_all_node_params`] with explicit convex weights,
    /// which may include the closed endpoints 0 and 1.
    pub fn derive_with_alphas(&self, alphas: &[f64]) -> Vec<NodeParams> {
        assert_eq!(alphas.len(), internal_count(self.depth));
        let n = self.node_count();
        let first = first_leaf(self.depth);
        let mut nodes: Vec<Option<NodeParams>> = vec![None; n];
        for (j, slot) in nodes[first..].iter_mut().enumerate() {
            let lv = self
                .leaf_log_vars
                .row(j)
                .iter()
                .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
                .collect();
            *slot = Some(NodeParams::new(self.leaf_means.row(j).to_vec(), lv));
        }
        for i in (0..first).rev() {
            let (l, r) = children(i);
            let p = moment_match(
                nodes[l].as_ref().expect("child derived"),
                nodes[r].as_ref().expect("child derived"),
                alphas[i],
            );
            nodes[i] = Some(p);
        }
        nodes.into_iter().map(|n| n.expect("all nodes derived")).collect()
    }

    pub fn node_table(&self) -> NodeTable {
        NodeTable::from_nodes(&self.derive_all_node_params())
    }

    pub fn uniform_prior(&self) -> Vec<f64> {
        uniform_prior(self.node_count())
    }

    // ---- checkpoint ----

    pub fn to_checkpoint(&self) -> TreeCheckpoint {
        TreeCheckpoint {
            format_version: TREE_FORMAT_VERSION,
            depth: self.depth,
            latent_dim: self.latent_dim,
            variance_mode: self.mode,
            leaf_means: self.leaf_means.clone(),
            leaf_log_vars: self.leaf_log_vars.clone(),
            branch_logits: self.branch_logits.clone(),
        }
    }

    pub fn from_checkpoint(ck: TreeCheckpoint) -> Result<Self> {
        if ck.format_version != TREE_FORMAT_VERSION {
            return Err(Error::Version {
                found: ck.format_version,
                expected: TREE_FORMAT_VERSION,
            });
        }
        let tree = Self::from_parts(
            ck.depth,
            ck.variance_mode,
            ck.leaf_means,
            ck.leaf_log_vars,
            ck.branch_logits,
        )?;
        if tree.latent_dim != ck.latent_dim {
            return Err(Error::Shape(format!(
                "latent_dim {} disagrees with leaf means width {}",
                ck.latent_dim, tree.latent_dim
            )));
        }
        Ok(tree)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(read_json(path)?)
    }
}

/// Versioned on-disk form of a [`TaxonomyTree`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeCheckpoint {
    pub format_version: u32,
    pub depth: usize,
    pub latent_dim: usize,
    pub variance_mode: VarianceMode,
    pub leaf_means: Tensor,
    pub leaf_log_vars: Tensor,
    pub branch_logits: Tensor,
}

/// Tape handles for a tree's trainable parameters.
#[derive(Clone, Copy, Debug)]
pub struct TreeVars {
    pub leaf_means: Var,
    pub leaf_log_vars: Var,
    pub branch_logits: Var,
}

impl TreeVars {
    pub fn register(g: &mut Graph, tree: &TaxonomyTree) -> Self {
        Self {
            leaf_means: g.param(tree.leaf_means.clone()),
            leaf_log_vars: g.param(tree.leaf_log_vars.clone()),
            branch_logits: g.param(tree.branch_logits.clone()),
        }
    }
}

/// Derived node parameters on the tape, heap order.
#[derive(Clone, Copy, Debug)]
pub struct NodeVars {
    pub means: Var,
    pub log_vars: Var,
    /// `(2^depth − 1) × 1`
    pub alphas: Var,
}

/// Differentiable moment matching, one tree level at a time.
pub fn derive_on_graph(g: &mut Graph, tree: &TaxonomyTree, vars: TreeVars) -> NodeVars {
    let depth = tree.depth;
    let d = tree.latent_dim as f64;
    let iso = tree.mode == VarianceMode::Isotropic;

    let alphas = g.sigmoid(vars.branch_logits);
    let mut level_means = vars.leaf_means;
    let mut level_lvs = g.clamp(vars.leaf_log_vars, LOG_VAR_MIN, LOG_VAR_MAX);
    let mut levels = vec![(level_means, level_lvs)];

    for level in (0..depth).rev() {
        let k = 1usize << level;
        let left: Vec<usize> = (0..k).map(|j| 2 * j).collect();
        let right: Vec<usize> = (0..k).map(|j| 2 * j + 1).collect();
        let heap: Vec<usize> = (k - 1..2 * k - 1).collect();

        let a = g.gather_rows(alphas, heap);
        let one_minus_a = g.rsub_scalar(1.0, a);
        let ml = g.gather_rows(level_means, left.clone());
        let mr = g.gather_rows(level_means, right.clone());
        let wl = g.mul_broadcast(ml, a);
        let wr = g.mul_broadcast(mr, one_minus_a);
        let mp = g.add(wl, wr);

        let spread = |g: &mut Graph, child: Var| {
            let diff = g.sub(child, mp);
            let sq = g.square(diff);
            if iso {
                let s = g.row_sums(sq);
                g.scale(s, 1.0 / d)
            } else {
                sq
            }
        };
        let dl = spread(g, ml);
        let dr = spread(g, mr);
        let lvl = g.gather_rows(level_lvs, left);
        let lvr = g.gather_rows(level_lvs, right);
        let vl = g.exp(lvl);
        let vr = g.exp(lvr);
        let tl = g.add(vl, dl);
        let tr = g.add(vr, dr);
        let tl = g.mul_broadcast(tl, a);
        let tr = g.mul_broadcast(tr, one_minus_a);
        let vp = g.add(tl, tr);
        let lvp = g.ln(vp);

        level_means = mp;
        level_lvs = lvp;
        levels.push((mp, lvp));
    }

    levels.reverse();
    let means = g.concat_rows(levels.iter().map(|l| l.0).collect());
    let log_vars = g.concat_rows(levels.iter().map(|l| l.1).collect());
    NodeVars {
        means,
        log_vars,
        alphas,
    }
}

// ---- Gaussian algebra ------------------------------------------------------

/// `log N(z | μ, diag σ²)`.
pub fn log_gaussian_pdf(z: &[f64], node: &NodeParams) -> f64 {
    let d = z.len();
    assert_eq!(d, node.dim(), "dimension mismatch");
    let mut s = 0.0;
    for (k, &zk) in z.iter().enumerate() {
        let lv = node.log_var_at(k);
        s += lv + (zk - node.mean[k]).powi(2) * (-lv).exp();
    }
    -0.5 * d as f64 * (2.0 * PI).ln() - 0.5 * s
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_diag_gaussians(q: &NodeParams, p: &NodeParams) -> f64 {
    assert_eq!(q.dim(), p.dim(), "dimension mismatch");
    let mut s = 0.0;
    for k in 0..q.dim() {
        let (lq, lp) = (q.log_var_at(k), p.log_var_at(k));
        s += lp - lq + (lq.exp() + (q.mean[k] - p.mean[k]).powi(2)) * (-lp).exp() - 1.0;
    }
    (0.5 * s).max(0.0)
}

pub fn uniform_prior(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// `p(c | z)` over every node of the tree.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterPosterior {
    pub probs: Vec<f64>,
}

impl ClusterPosterior {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `log p(c) + log p(z|c)` across all nodes, log-sum-exp stabilised.
pub fn cluster_posterior(z: &[f64], nodes: &[NodeParams], prior: &[f64]) -> ClusterPosterior {
    assert_eq!(nodes.len(), prior.len(), "prior length must equal node count");
    let logits: Vec<f64> = nodes
        .iter()
        .zip(prior)
        .map(|(n, &p)| p.ln() + log_gaussian_pdf(z, n))
        .collect();
    let lse = log_sum_exp(&logits);
    ClusterPosterior {
        probs: logits.iter().map(|&l| (l - lse).exp()).collect(),
    }
}

/// Row-wise [`cluster_posterior`] for a batch of latents `N × D`.
pub fn cluster_posterior_batch(z: &Tensor, table: &NodeTable, prior: &[f64]) -> Tensor {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let m = g.constant(table.means.clone());
    let lv = g.constant(table.log_vars.clone());
    let lp = g.constant(Tensor::from_vec(1, prior.len(), prior.iter().map(|p| p.ln()).collect()));
    let logits = g.gauss_log_pdf_table(zv, m, lv);
    let logits = g.add_broadcast(logits, lp);
    let logw = g.log_softmax_rows(logits);
    g.value(logw).map(f64::exp)
}

/// One draw of the generative process: node from `prior`, then `z ~ N(μ_c, σ_c²)`.
pub fn sample_generative(tree: &TaxonomyTree, prior: &[f64], seed: u64) -> (usize, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = tree.derive_all_node_params();
    sample_from_nodes(&nodes, prior, &mut rng)
}

pub fn sample_from_nodes(nodes: &[NodeParams], prior: &[f64], rng: &mut impl Rng) -> (usize, Vec<f64>) {
    let c = sample_categorical(prior, rng);
    (c, sample_node(&nodes[c], rng))
}

pub fn sample_node(node: &NodeParams, rng: &mut impl Rng) -> Vec<f64> {
    (0..node.dim())
        .map(|k| {
            let e: f64 = StandardNormal.sample(rng);
            node.mean[k] + node.std_at(k) * e
        })
        .collect()
}

pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed on the rounding gap at the top; return the last positive entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::tests::random_tensor;

    fn tree_with(depth: usize, d: usize, mode: VarianceMode, seed: u64) -> TaxonomyTree {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = TaxonomyTree::new(depth, d, mode, &mut rng);
        t.leaf_means = random_tensor(&mut rng, leaf_count(depth), d, 2.0);
        t.leaf_log_vars = random_tensor(&mut rng, leaf_count(depth), mode.width(d), 0.5);
        t.branch_logits = random_tensor(&mut rng, internal_count(depth), 1, 1.5);
        t
    }

    #[test]
    fn heap_index_round_trip() {
        for i in 0..internal_count(6) {
            let (l, r) = children(i);
            assert_eq!(parent(l), Some(i));
            assert_eq!(parent(r), Some(i));
        }
        assert_eq!(parent(0), None);
        assert_eq!(node_count(10), 2047);
        assert_eq!(node_depth(0), 0);
        assert_eq!(node_depth(2), 1);
        assert_eq!(node_depth(3), 2);
        assert_eq!(node_depth(6), 2);
        assert_eq!(node_depth(7), 3);
        assert!(is_leaf(3, 2) && is_leaf(6, 2) && !is_leaf(2, 2) && !is_leaf(7, 2));
    }

    #[test]
    fn leaves_first_permutation_inverts() {
        let order = leaves_first_order(2);
        assert_eq!(order, vec![3, 4, 5, 6, 1, 2, 0]);
        let pos = leaves_first_position(2);
        for (p, &h) in order.iter().enumerate() {
            assert_eq!(pos[h], p);
        }
    }

    #[test]
    fn alpha_one_copies_left_child() {
        let t = tree_with(1, 3, VarianceMode::Isotropic, 1);
        let close = |a: &NodeParams, b: &NodeParams| {
            a.mean == b.mean && a.log_var.iter().zip(&b.log_var).all(|(x, y)| (x - y).abs() < 1e-14)
        };
        let nodes = t.derive_with_alphas(&[1.0]);
        assert!(close(&nodes[0], &nodes[1]));
        let nodes = t.derive_with_alphas(&[0.0]);
        assert!(close(&nodes[0], &nodes[2]));
    }

    #[test]
    fn half_mixture_of_unit_gaussians() {
        let left = NodeParams::new(vec![0.0], vec![0.0]);
        let right = NodeParams::new(vec![2.0], vec![0.0]);
        let p = moment_match(&left, &right, 0.5);
        assert!((p.mean[0] - 1.0).abs() < 1e-15);
        assert!((p.var_at(0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_children_give_identical_parent() {
        let c = NodeParams::new(vec![0.3, -1.2], vec![0.4, -0.2]);
        for a in [0.0, 0.2, 0.5, 0.9, 1.0] {
            let p = moment_match(&c, &c, a);
            for k in 0..2 {
                assert!((p.mean[k] - c.mean[k]).abs() < 1e-14);
                assert!((p.log_var[k] - c.log_var[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn derived_variances_positive_and_finite() {
        for mode in [VarianceMode::Isotropic, VarianceMode::Diagonal] {
            let t = tree_with(4, 3, mode, 7);
            for n in t.derive_all_node_params() {
                assert!(n.log_var.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn graph_derivation_matches_plain() {
        for mode in [VarianceMode::Isotropic, VarianceMode::Diagonal] {
            let t = tree_with(3, 2, mode, 11);
            let plain = t.node_table();
            let mut g = Graph::new();
            let vars = TreeVars::register(&mut g, &t);
            let nv = derive_on_graph(&mut g, &t, vars);
            for (a, b) in g.value(nv.means).data().iter().zip(plain.means.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in g.value(nv.log_vars).data().iter().zip(plain.log_vars.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_pdf_closed_form_values() {
        let n = NodeParams::new(vec![0.0, 0.0], vec![0.0]);
        assert!((log_gaussian_pdf(&[0.0, 0.0], &n) + (2.0 * PI).ln()).abs() < 1e-12);
        assert!((log_gaussian_pdf(&[0.0, 0.0], &n) - (-1.837877)).abs() < 1e-6);
        let n1 = NodeParams::new(vec![0.0], vec![0.0]);
        assert!((log_gaussian_pdf(&[0.0], &n1) - (-0.918939)).abs() < 1e-6);

        let a = NodeParams::new(vec![0.5, -1.0], vec![0.3, -0.4]);
        let b = NodeParams::new(vec![0.5 + 7.0, -1.0 + 7.0], vec![0.3, -0.4]);
        let la = log_gaussian_pdf(&[1.0, 2.0], &a);
        let lb = log_gaussian_pdf(&[8.0, 9.0], &b);
        assert!((la - lb).abs() < 1e-12);
    }

    /// Riemann sum of the density over a wide 1-D grid is 1.
    #[test]
    fn density_integrates_to_one() {
        let n = NodeParams::new(vec![0.7], vec![0.5]);
        let h = 1e-3;
        let total: f64 = (-20_000..20_000)
            .map(|i| log_gaussian_pdf(&[i as f64 * h], &n).exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kl_identity_and_unit_shift() {
        let q = NodeParams::new(vec![0.0], vec![0.0]);
        let p = NodeParams::new(vec![1.0], vec![0.0]);
        assert_eq!(kl_diag_gaussians(&q, &q), 0.0);
        assert!((kl_diag_gaussians(&q, &p) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn posterior_symmetry_and_concentration() {
        let same = NodeParams::new(vec![0.1, 0.2], vec![0.0]);
        let nodes = vec![same.clone(), same.clone(), same];
        let post = cluster_posterior(&[3.0, -1.0], &nodes, &uniform_prior(3));
        for p in &post.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }

        let nodes = vec![
            NodeParams::new(vec![10.0], vec![0.0]),
            NodeParams::new(vec![-10.0], vec![0.0]),
            NodeParams::new(vec![0.0], vec![0.0]),
        ];
        let post = cluster_posterior(&[0.0], &nodes, &uniform_prior(3));
        // likelihood ratio e^{-50} per distant node
        let oracle = 1.0 / (1.0 + 2.0 * (-50.0f64).exp());
        assert!((post.probs[2] - oracle).abs() < 1e-15);
        assert!(post.probs[2] > 0.999);
    }

    #[test]
    fn posterior_batch_matches_single() {
        let t = tree_with(2, 2, VarianceMode::Diagonal, 5);
        let nodes = t.derive_all_node_params();
        let table = t.node_table();
        let z = Tensor::from_rows(&[vec![0.5, -0.5], vec![400.0, -900.0]]);
        let batch = cluster_posterior_batch(&z, &table, &t.uniform_prior());
        for i in 0..2 {
            let single = cluster_posterior(z.row(i), &nodes, &t.uniform_prior());
            for (a, b) in batch.row(i).iter().zip(&single.probs) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generative_sampling_is_seeded_and_respects_one_hot_prior() {
        let t = tree_with(2, 2, VarianceMode::Isotropic, 3);
        let mut prior = vec![0.0; 7];
        prior[4] = 1.0;
        for seed in 0..50 {
            assert_eq!(sample_generative(&t, &prior, seed).0, 4);
        }
        assert_eq!(sample_generative(&t, &t.uniform_prior(), 9), sample_generative(&t, &t.uniform_prior(), 9));
    }

    #[test]
    fn checkpoint_rejects_wrong_shapes_and_versions() {
        let t = tree_with(2, 3, VarianceMode::Isotropic, 2);
        let mut ck = t.to_checkpoint();
        ck.format_version = 99;
        assert!(matches!(TaxonomyTree::from_checkpoint(ck), Err(Error::Version { .. })));
        let mut ck = t.to_checkpoint();
        ck.branch_logits = Tensor::zeros(2, 1);
        assert!(matches!(TaxonomyTree::from_checkpoint(ck), Err(Error::Shape(_))));
    }
}
