//! Training loss: ELBO terms, tree regularizers, NT-Xent, and the
//! category-utility diagnostic.
//!
//! Sign conventions for [`LossBreakdown`]:
//! - `recon` is a log-likelihood (higher is better),
//! - `kl_cluster`, `kl_assign` are KL divergences (≥ 0),
//! - `r_ent` is a reward (higher means more balanced splits),
//! - `r_dkl`, `ntxent_*` are penalties,
//! - `total` is the minimized quantity
//!   `−(w_rec·recon − w_kl·(kl_cluster + kl_assign)) − r_ent + r_dkl + w_con·(ntxent_embed + ntxent_cluster)`.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{recon_log_likelihood_on_graph, reparameterize_on_graph, Model, ModelVars};
use crate::taxonomy::{self, derive_on_graph, NodeVars, TaxonomyTree, TreeVars};
use crate::tensor::Tensor;

/// Stand-in for `−∞` on masked logits; keeps `0 × masked` finite.
const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub recon_weight: f64,
    pub kl_weight: f64,
    pub contrastive_weight: f64,
    pub lambda_ent: f64,
    pub lambda_dkl: f64,
    pub margin: f64,
    pub tau_embed: f64,
    pub tau_cluster: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon_weight: 5.0,
            kl_weight: 1.0,
            contrastive_weight: 100.0,
            lambda_ent: 0.01,
            lambda_dkl: 0.01,
            margin: 1.2,
            tau_embed: 0.5,
            tau_cluster: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.recon_weight,
            self.kl_weight,
            self.contrastive_weight,
            self.lambda_ent,
            self.lambda_dkl,
            self.margin,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(self.tau_embed > 0.0 && self.tau_cluster > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }
}

/// Which depth sets the margin exponent `N − depth` of a sibling pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginDepth {
    #[default]
    Child,
    Parent,
}

/// Switches for the optional parts of the loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub use_r_ent: bool,
    pub use_r_dkl: bool,
    pub margin_depth: MarginDepth,
    /// Penalize only sibling pairs whose children are leaves.
    pub dkl_leaf_pairs_only: bool,
    /// Treat `p(c|z)` as a constant where it weights the cluster KLs.
    pub stop_gradient_assign: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            use_r_ent: true,
            use_r_dkl: true,
            margin_depth: MarginDepth::Child,
            dkl_leaf_pairs_only: false,
            stop_gradient_assign: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_cluster: f64,
    pub kl_assign: f64,
    pub r_ent: f64,
    pub r_dkl: f64,
    pub ntxent_embed: f64,
    pub ntxent_cluster: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [
            self.recon,
            self.kl_cluster,
            self.kl_assign,
            self.r_ent,
            self.r_dkl,
            self.ntxent_embed,
            self.ntxent_cluster,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub terms: LossBreakdown,
}

/// Tape handles for every loss term; see the module docs for signs.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub recon: Var,
    pub kl_cluster: Var,
    pub kl_assign: Var,
    pub r_ent: Var,
    pub r_dkl: Var,
    pub ntxent_embed: Var,
    pub ntxent_cluster: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            recon: g.value(self.recon).item(),
            kl_cluster: g.value(self.kl_cluster).item(),
            kl_assign: g.value(self.kl_assign).item(),
            r_ent: g.value(self.r_ent).item(),
            r_dkl: g.value(self.r_dkl).item(),
            ntxent_embed: g.value(self.ntxent_embed).item(),
            ntxent_cluster: g.value(self.ntxent_cluster).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// One minibatch: the first view drives the ELBO; the optional second view
/// turns on the contrastive terms. `eps*` are the reparameterization draws.
#[derive(Clone, Copy, Debug)]
pub struct LossBatch<'a> {
    pub x: &'a Tensor,
    pub eps: &'a Tensor,
    pub contrast: Option<(&'a Tensor, &'a Tensor)>,
}

struct ElboVars {
    recon: Var,
    kl_cluster: Var,
    kl_assign: Var,
    features: Var,
    assign: Var,
}

fn elbo_on_graph(
    g: &mut Graph,
    model: &Model,
    mvars: &ModelVars,
    nodes: &NodeVars,
    x: &Tensor,
    eps: &Tensor,
    stop_gradient_assign: bool,
) -> ElboVars {
    let n = x.rows() as f64;
    let t = g.value(nodes.means).rows() as f64;
    let xv = g.constant(x.clone());
    let enc = model.encode_on_graph(g, mvars, xv);
    let z = reparameterize_on_graph(g, enc.mean, enc.log_var, eps);
    let x_hat = model.decode_on_graph(g, mvars, z);
    let rec = recon_log_likelihood_on_graph(g, xv, x_hat, model.spec().likelihood);
    let recon = g.mean_all(rec);

    // uniform prior: the log p(c) shift cancels in the softmax
    let logits = g.gauss_log_pdf_table(z, nodes.means, nodes.log_vars);
    let log_w = g.log_softmax_rows(logits);
    let w = g.exp(log_w);

    let kl = g.gauss_kl_table(enc.mean, enc.log_var, nodes.means, nodes.log_vars);
    let w_kl = if stop_gradient_assign { g.detach(w) } else { w };
    let weighted = g.mul(w_kl, kl);
    let s = g.sum_all(weighted);
    let kl_cluster = g.scale(s, 1.0 / n);

    let log_ratio = g.offset(log_w, t.ln());
    let ent = g.mul(w, log_ratio);
    let s = g.sum_all(ent);
    let kl_assign = g.scale(s, 1.0 / n);

    ElboVars {
        recon,
        kl_cluster,
        kl_assign,
        features: enc.features,
        assign: w,
    }
}

/// Balanced-split reward `Σ_internal λ^depth(c) · H(α_c)` on the tape.
pub fn r_ent_on_graph(g: &mut Graph, alphas: Var, lambda: f64) -> Var {
    let k = g.value(alphas).rows();
    let weights = Tensor::from_vec(k, 1, (0..k).map(|c| lambda.powi(taxonomy::node_depth(c) as i32)).collect());
    let a = g.clamp(alphas, 1e-300, 1.0);
    let b = g.rsub_scalar(1.0, alphas);
    let b = g.clamp(b, 1e-300, 1.0);
    let la = g.ln(a);
    let lb = g.ln(b);
    let ta = g.mul(alphas, la);
    let one_minus = g.rsub_scalar(1.0, alphas);
    let tb = g.mul(one_minus, lb);
    let h = g.add(ta, tb);
    let h = g.neg(h);
    let w = g.constant(weights);
    let wh = g.mul(h, w);
    g.sum_all(wh)
}

/// Sibling pairs `(left, right)` and their margins `m·λ^(N − depth)`.
pub fn sibling_pairs(depth: usize, cfg: &LossConfig) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let (mut left, mut right, mut margins) = (Vec::new(), Vec::new(), Vec::new());
    for p in 0..taxonomy::internal_count(depth) {
        let pd = taxonomy::node_depth(p);
        if cfg.dkl_leaf_pairs_only && pd + 1 != depth {
            continue;
        }
        let (l, r) = taxonomy::children(p);
        let ref_depth = match cfg.margin_depth {
            MarginDepth::Child => pd + 1,
            MarginDepth::Parent => pd,
        };
        left.push(l);
        right.push(r);
        margins.push(cfg.weights.margin * cfg.weights.lambda_dkl.powi((depth - ref_depth) as i32));
    }
    (left, right, margins)
}

/// Sibling-separation penalty `Σ max{0, margin − symKL}` on the tape.
pub fn r_dkl_on_graph(g: &mut Graph, nodes: &NodeVars, depth: usize, cfg: &LossConfig) -> Var {
    let (left, right, margins) = sibling_pairs(depth, cfg);
    if left.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    let p = left.len();
    let dim = g.value(nodes.means).cols();
    let ml = g.gather_rows(nodes.means, left.clone());
    let mr = g.gather_rows(nodes.means, right.clone());
    let lvl = g.gather_rows(nodes.log_vars, left);
    let lvr = g.gather_rows(nodes.log_vars, right);
    let widen = |g: &mut Graph, v: Var| {
        if g.value(v).cols() == dim {
            v
        } else {
            let ones = g.constant(Tensor::filled(p, dim, 1.0));
            g.mul_broadcast(ones, v)
        }
    };
    let lvl = widen(g, lvl);
    let lvr = widen(g, lvr);
    let diff = g.sub(ml, mr);
    let d2 = g.square(diff);
    let vl = g.exp(lvl);
    let vr = g.exp(lvr);
    let nl = g.neg(lvl);
    let nr = g.neg(lvr);
    let inv_l = g.exp(nl);
    let inv_r = g.exp(nr);
    let a = g.add(vl, d2);
    let a = g.mul(a, inv_r);
    let b = g.add(vr, d2);
    let b = g.mul(b, inv_l);
    let s = g.add(a, b);
    let s = g.offset(s, -2.0);
    let s = g.row_sums(s);
    let sym = g.scale(s, 0.5);
    let m = g.constant(Tensor::from_vec(p, 1, margins));
    let gap = g.sub(m, sym);
    let hinge = g.relu(gap);
    g.sum_all(hinge)
}

/// NT-Xent over `2N` rows with view pairs at `(i, i+N)`.
pub fn ntxent_on_graph(g: &mut Graph, proj: Var, tau: f64) -> Result<Var> {
    let (rows, _) = g.value(proj).shape();
    if rows % 2 != 0 || rows == 0 {
        return Err(Error::Shape(format!("ntxent needs an even, nonzero row count, got {rows}")));
    }
    if let Some(i) = zero_norm_row(g.value(proj)) {
        return Err(Error::ZeroNormProjection(i));
    }
    let n = rows / 2;
    let h = g.normalize_rows(proj);
    let sim = g.matmul_bt(h, h);
    let sim = g.scale(sim, 1.0 / tau);
    let mut mask = Tensor::zeros(rows, rows);
    let mut pos = Tensor::zeros(rows, rows);
    for i in 0..rows {
        mask.set(i, i, MASKED_LOGIT);
        pos.set(i, (i + n) % rows, 1.0);
    }
    let mask = g.constant(mask);
    let logits = g.add(sim, mask);
    let log_p = g.log_softmax_rows(logits);
    let pos = g.constant(pos);
    let picked = g.mul(log_p, pos);
    let s = g.sum_all(picked);
    Ok(g.scale(s, -1.0 / rows as f64))
}

fn zero_norm_row(t: &Tensor) -> Option<usize> {
    (0..t.rows()).find(|&i| t.row(i).iter().all(|&v| v == 0.0))
}

/// Builds every loss term for one batch on `g`.
pub fn build_loss(
    g: &mut Graph,
    model: &Model,
    mvars: &ModelVars,
    tree: &TaxonomyTree,
    tvars: TreeVars,
    batch: LossBatch<'_>,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let w = &cfg.weights;
    let nodes = derive_on_graph(g, tree, tvars);
    let e1 = elbo_on_graph(g, model, mvars, &nodes, batch.x, batch.eps, cfg.stop_gradient_assign);

    let r_ent = if cfg.use_r_ent {
        r_ent_on_graph(g, nodes.alphas, w.lambda_ent)
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let r_dkl = if cfg.use_r_dkl {
        r_dkl_on_graph(g, &nodes, tree.depth(), cfg)
    } else {
        g.constant(Tensor::scalar(0.0))
    };

    let (ntxent_embed, ntxent_cluster) = match batch.contrast {
        Some((x2, eps2)) => {
            if !model.spec().has_projection() {
                return Err(Error::Config("contrastive loss needs a model with projection heads".into()));
            }
            let e2 = elbo_on_graph(g, model, mvars, &nodes, x2, eps2, cfg.stop_gradient_assign);
            let h1 = model.embed_projection_on_graph(g, mvars, e1.features);
            let h2 = model.embed_projection_on_graph(g, mvars, e2.features);
            let h = g.concat_rows(vec![h1, h2]);
            let c1 = model.cluster_projection_on_graph(g, mvars, e1.assign);
            let c2 = model.cluster_projection_on_graph(g, mvars, e2.assign);
            let c = g.concat_rows(vec![c1, c2]);
            (ntxent_on_graph(g, h, w.tau_embed)?, ntxent_on_graph(g, c, w.tau_cluster)?)
        }
        None => (g.constant(Tensor::scalar(0.0)), g.constant(Tensor::scalar(0.0))),
    };

    let kl = g.add(e1.kl_cluster, e1.kl_assign);
    let kl = g.scale(kl, w.kl_weight);
    let rec = g.scale(e1.recon, w.recon_weight);
    let neg_elbo = g.sub(kl, rec);
    let t = g.sub(neg_elbo, r_ent);
    let t = g.add(t, r_dkl);
    let con = g.add(ntxent_embed, ntxent_cluster);
    let con = g.scale(con, w.contrastive_weight);
    let total = g.add(t, con);

    Ok(LossVars {
        recon: e1.recon,
        kl_cluster: e1.kl_cluster,
        kl_assign: e1.kl_assign,
        r_ent,
        r_dkl,
        ntxent_embed,
        ntxent_cluster,
        total,
    })
}

/// Standard-normal draws `rows × cols` from `seed`.
pub fn gaussian_noise(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
}

// ---- plain evaluation ------------------------------------------------------

/// Batch means of the three ELBO terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl_cluster: f64,
    pub kl_assign: f64,
}

impl ElboTerms {
    /// Unweighted ELBO `recon − kl_cluster − kl_assign`.
    pub fn elbo(&self) -> f64 {
        self.recon - self.kl_cluster - self.kl_assign
    }
}

pub fn elbo_terms(x: &Tensor, model: &Model, tree: &TaxonomyTree, seed: u64) -> Result<ElboTerms> {
    let eps = gaussian_noise(x.rows(), model.spec().latent_dim, seed);
    elbo_terms_with_noise(x, model, tree, &eps)
}

pub fn elbo_terms_with_noise(x: &Tensor, model: &Model, tree: &TaxonomyTree, eps: &Tensor) -> Result<ElboTerms> {
    check_batch(x, model, tree)?;
    let mut g = Graph::new();
    let mvars = ModelVars::register(&mut g, model);
    let tvars = TreeVars::register(&mut g, tree);
    let nodes = derive_on_graph(&mut g, tree, tvars);
    let e = elbo_on_graph(&mut g, model, &mvars, &nodes, x, eps, false);
    Ok(ElboTerms {
        recon: g.value(e.recon).item(),
        kl_cluster: g.value(e.kl_cluster).item(),
        kl_assign: g.value(e.kl_assign).item(),
    })
}

fn check_batch(x: &Tensor, model: &Model, tree: &TaxonomyTree) -> Result<()> {
    if model.spec().latent_dim != tree.latent_dim() {
        return Err(Error::Shape(format!(
            "model latent dim {} differs from tree latent dim {}",
            model.spec().latent_dim,
            tree.latent_dim()
        )));
    }
    if x.cols() != model.spec().input_dim() {
        return Err(Error::Shape(format!(
            "batch rows have {} values, model expects {}",
            x.cols(),
            model.spec().input_dim()
        )));
    }
    Ok(())
}

pub fn r_ent(tree: &TaxonomyTree, lambda: f64) -> f64 {
    tree.alphas()
        .iter()
        .enumerate()
        .map(|(c, &a)| {
            let h = if a <= 0.0 || a >= 1.0 {
                0.0
            } else {
                -a * a.ln() - (1.0 - a) * (1.0 - a).ln()
            };
            lambda.powi(taxonomy::node_depth(c) as i32) * h
        })
        .sum()
}

pub fn r_dkl(tree: &TaxonomyTree, cfg: &LossConfig) -> f64 {
    let nodes = tree.derive_all_node_params();
    let (left, right, margins) = sibling_pairs(tree.depth(), cfg);
    left.iter()
        .zip(&right)
        .zip(&margins)
        .map(|((&l, &r), &m)| {
            let sym = taxonomy::kl_diag_gaussians(&nodes[l], &nodes[r]) + taxonomy::kl_diag_gaussians(&nodes[r], &nodes[l]);
            (m - sym).max(0.0)
        })
        .sum()
}

pub fn ntxent(proj: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(proj.clone());
    let l = ntxent_on_graph(&mut g, p, tau)?;
    Ok(g.value(l).item())
}

/// Entropy of `N(μ, diag exp(log_var))`.
pub fn gaussian_entropy(log_var: &[f64]) -> f64 {
    let d = log_var.len() as f64;
    0.5 * d * (2.0 * PI).ln() + 0.5 * d + 0.5 * log_var.iter().sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryUtility {
    /// `Ĥ(Z) − H(Z|T)`
    pub mutual_information: f64,
    /// Monte-Carlo entropy of the batch's aggregate posterior.
    pub h_z: f64,
    /// `Σ_c p(c) H(Z|T=c)` under the uniform prior.
    pub h_z_given_t: f64,
    pub h_z_given_c: Vec<f64>,
    /// Monte-Carlo `−E log q(z|x)`.
    pub h_z_given_x: f64,
    /// Batch mean of `E_{p(c|z)}[D/2 − ½ Σ_d (σ_z² + (μ_z − μ_c)²)/σ_c²]` at posterior means.
    pub g: f64,
}

/// Category-utility diagnostic. Never enters gradients.
pub fn category_utility_diagnostic(
    x: &Tensor,
    model: &Model,
    tree: &TaxonomyTree,
    n_mc: usize,
    seed: u64,
) -> Result<CategoryUtility> {
    if n_mc == 0 {
        return Err(Error::Config("n_mc must be at least 1".into()));
    }
    check_batch(x, model, tree)?;
    let d = tree.latent_dim();
    let nodes = tree.derive_all_node_params();
    let h_z_given_c: Vec<f64> = nodes
        .iter()
        .map(|n| gaussian_entropy(&(0..d).map(|k| n.log_var_at(k)).collect::<Vec<_>>()))
        .collect();
    let h_z_given_t = h_z_given_c.iter().sum::<f64>() / h_z_given_c.len() as f64;

    let enc = model.encode(x)?;
    let posts: Vec<_> = (0..x.rows()).map(|i| enc.posterior(i)).collect();
    let as_node = |p: &crate::model::LatentPosterior| taxonomy::NodeParams::new(p.mean.clone(), p.log_var.clone());
    let qs: Vec<_> = posts.iter().map(as_node).collect();
    let n = qs.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h_z = 0.0;
    let mut h_zx = 0.0;
    let mut logs = vec![0.0; n];
    for q in &qs {
        for _ in 0..n_mc {
            let z = taxonomy::sample_node(q, &mut rng);
            h_zx -= taxonomy::log_gaussian_pdf(&z, q);
            for (j, qj) in qs.iter().enumerate() {
                logs[j] = taxonomy::log_gaussian_pdf(&z, qj);
            }
            h_z -= log_sum_exp(&logs) - (n as f64).ln();
        }
    }
    let m = (n * n_mc) as f64;
    h_z /= m;
    h_zx /= m;

    let prior = tree.uniform_prior();
    let mut g_sum = 0.0;
    for q in &qs {
        let w = taxonomy::cluster_posterior(&q.mean, &nodes, &prior);
        for (c, node) in nodes.iter().enumerate() {
            let quad: f64 = (0..d)
                .map(|k| (q.var_at(k) + (q.mean[k] - node.mean[k]).powi(2)) / node.var_at(k))
                .sum();
            g_sum += w.probs[c] * (0.5 * d as f64 - 0.5 * quad);
        }
    }

    Ok(CategoryUtility {
        mutual_information: h_z - h_z_given_t,
        h_z,
        h_z_given_t,
        h_z_given_c,
        h_z_given_x: h_zx,
        g: g_sum / n as f64,
    })
}

/// Importance-weighted log-likelihood `log (1/K) Σ_k p(x, z_k)/q(z_k|x)`
/// per sample, with the same likelihood constants as the ELBO terms.
///
/// `p(z) = Σ_c p(c) N(z | μ_c, σ_c²)` under the uniform prior.
pub fn importance_weighted_log_likelihood(
    x: &Tensor,
    model: &Model,
    tree: &TaxonomyTree,
    k: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_batch(x, model, tree)?;
    let enc = model.encode(x)?;
    let nodes = tree.derive_all_node_params();
    let log_prior = -(nodes.len() as f64).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let q = enc.posterior(i);
        let qn = taxonomy::NodeParams::new(q.mean.clone(), q.log_var.clone());
        let zs: Vec<Vec<f64>> = (0..k).map(|_| q.sample(&mut rng)).collect();
        let z = Tensor::from_rows(&zs);
        let x_hat = model.decode(&z)?;
        let mut logs = Vec::with_capacity(k);
        for (s, zk) in zs.iter().enumerate() {
            let ll = crate::model::recon_log_likelihood(x.row(i), x_hat.row(s), model.spec().likelihood)?;
            let lp: Vec<f64> = nodes.iter().map(|n| log_prior + taxonomy::log_gaussian_pdf(zk, n)).collect();
            logs.push(ll + log_sum_exp(&lp) - taxonomy::log_gaussian_pdf(zk, &qn));
        }
        out.push(log_sum_exp(&logs) - (k as f64).ln());
    }
    Ok(out)
}

/// Per-sample unweighted ELBO with one reparameterized draw each.
pub fn per_sample_elbo(x: &Tensor, model: &Model, tree: &TaxonomyTree, seed: u64) -> Result<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            let xi = x.select_rows(&[i]);
            elbo_terms(&xi, model, tree, seed.wrapping_add(i as u64)).map(|t| t.elbo())
        })
        .collect()
}
