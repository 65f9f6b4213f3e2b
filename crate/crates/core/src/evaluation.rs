//! Annotation-matrix classification and clustering metrics.
//!
//! # Assignment table, binary layout (all integers little-endian)
//!
//! | offset | size  | field                                  |
//! |--------|-------|----------------------------------------|
//! | 0      | 4     | magic `b"TXNA"`                        |
//! | 4      | 4     | format version `u32` = 1               |
//! | 8      | 8     | `N` as `u64`                           |
//! | 16     | 8     | `T` (node count) as `u64`              |
//! | 24     | 1     | label flag `u8` (0 or 1)               |
//! | 25     | 8·N·T | `p(c|z)` as `f64`, row-major, heap order |
//! | …      | 8·N   | labels as `u64`, only if the flag is 1 |
//!
//! # Assignment table, CSV layout
//!
//! First record `N,T,L`; then `N` records of `T` probabilities, followed by
//! an integer label when `L = 1`. Files ending in `.csv` use this layout.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic, Reader};
use crate::model::Model;
use crate::taxonomy::{self, argmax, cluster_posterior_batch, TaxonomyTree};
use crate::tensor::Tensor;

pub const ASSIGNMENT_MAGIC: [u8; 4] = *b"TXNA";
pub const ASSIGNMENT_FORMAT_VERSION: u32 = 1;
pub const ANNOTATION_EPS: f64 = 1e-8;
pub const DEFAULT_PAIR_BUDGET: usize = 100_000;
pub const DEFAULT_PAIR_SEED: u64 = 0;
const ROW_SUM_TOL: f64 = 1e-6;
const PAIR_CHUNK: usize = 4096;

/// `p(c|z)` rows for a set of samples, with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentTable {
    probs: Tensor,
    labels: Option<Vec<usize>>,
}

impl AssignmentTable {
    pub fn new(probs: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        for i in 0..probs.rows() {
            let row = probs.row(i);
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::Domain(format!("assignment row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Domain(format!("assignment row {i} sums to {s}")));
            }
        }
        if let Some(l) = &labels {
            if l.len() != probs.rows() {
                return Err(Error::Shape(format!("{} labels for {} rows", l.len(), probs.rows())));
            }
        }
        Ok(Self { probs, labels })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn node_count(&self) -> usize {
        self.probs.cols()
    }

    /// Tree depth implied by the node count, if it is `2^(d+1) − 1`.
    pub fn tree_depth(&self) -> Option<usize> {
        let t = self.node_count() + 1;
        (t.is_power_of_two() && t >= 4).then(|| t.trailing_zeros() as usize - 1)
    }

    /// Same probabilities under a different label column.
    pub fn relabel(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.probs.clone(), Some(labels))
    }

    fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Config("assignment table has no labels".into()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (n, t) = self.probs.shape();
        if is_csv(path) {
            let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
            let err = |e: csv::Error| Error::Format(e.to_string());
            w.write_record([n.to_string(), t.to_string(), (self.labels.is_some() as u8).to_string()])
                .map_err(err)?;
            for i in 0..n {
                let mut rec: Vec<String> = self.probs.row(i).iter().map(|v| format!("{v:?}")).collect();
                if let Some(l) = &self.labels {
                    rec.push(l[i].to_string());
                }
                w.write_record(&rec).map_err(err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
            return write_atomic(path, &bytes);
        }
        let mut out = Vec::with_capacity(25 + 8 * n * (t + 1));
        out.extend_from_slice(&ASSIGNMENT_MAGIC);
        out.extend_from_slice(&ASSIGNMENT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(t as u64).to_le_bytes());
        out.push(self.labels.is_some() as u8);
        for v in self.probs.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in self.labels.as_deref().unwrap_or(&[]) {
            out.extend_from_slice(&(l as u64).to_le_bytes());
        }
        write_atomic(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if is_csv(path) {
            return Self::load_csv(path);
        }
        let bytes = read_bytes(path)?;
        let mut r = Reader::new(path, &bytes);
        let magic = r.take(4)?;
        if magic != ASSIGNMENT_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: u32::from_be_bytes(magic.try_into().expect("4 bytes")),
                expected: u32::from_be_bytes(ASSIGNMENT_MAGIC),
            });
        }
        let version = r.u32_le()?;
        if version != ASSIGNMENT_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: ASSIGNMENT_FORMAT_VERSION,
            });
        }
        let n = r.u64_le()? as usize;
        let t = r.u64_le()? as usize;
        let flag = r.u8()?;
        if flag > 1 {
            return Err(Error::Format(format!("{}: label flag must be 0 or 1", path.display())));
        }
        let expected = 25 + 8 * n * t + if flag == 1 { 8 * n } else { 0 };
        if bytes.len() < expected {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: expected as u64,
                found: bytes.len() as u64,
            });
        }
        let mut probs = Vec::with_capacity(n * t);
        for _ in 0..n * t {
            probs.push(r.f64_le()?);
        }
        let labels = if flag == 1 {
            Some((0..n).map(|_| r.u64_le().map(|v| v as usize)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        r.finish()?;
        Self::new(Tensor::from_vec(n, t, probs), labels)
    }

    fn load_csv(path: &Path) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Format(format!("{}:{line}: {msg}", path.display()));
        let cerr = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(cerr)?;
        let mut records = rdr.records();
        let header = records.next().ok_or_else(|| bad(1, "missing header"))?.map_err(cerr)?;
        let nums: Vec<usize> = header.iter().filter_map(|s| s.parse().ok()).collect();
        if header.len() != 3 || nums.len() != 3 || nums[2] > 1 {
            return Err(bad(1, "header must be N,T,L"));
        }
        let (n, t, l) = (nums[0], nums[1], nums[2]);
        let mut probs = Vec::with_capacity(n * t);
        let mut labels = Vec::new();
        let mut rows = 0;
        for (k, rec) in records.enumerate() {
            let rec = rec.map_err(cerr)?;
            let line = k + 2;
            if rec.len() != t + l {
                return Err(bad(line, &format!("expected {} fields, found {}", t + l, rec.len())));
            }
            for s in rec.iter().take(t) {
                probs.push(s.parse::<f64>().map_err(|_| bad(line, &format!("not a number: {s:?}")))?);
            }
            if l == 1 {
                labels.push(rec[t].parse::<usize>().map_err(|_| bad(line, "bad label"))?);
            }
            rows += 1;
        }
        if rows != n {
            return Err(bad(1, &format!("header declares {n} rows, file has {rows}")));
        }
        Self::new(Tensor::from_vec(n, t, probs), (l == 1).then_some(labels))
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// `p(c|z)` at the posterior mean of every row of `inputs`.
pub fn compute_assignments(model: &Model, tree: &TaxonomyTree, inputs: &Tensor) -> Result<Tensor> {
    if model.spec().latent_dim != tree.latent_dim() {
        return Err(Error::Shape("model and tree latent dims differ".into()));
    }
    let table = tree.node_table();
    let prior = tree.uniform_prior();
    let chunk = 256;
    let starts: Vec<usize> = (0..inputs.rows()).step_by(chunk).collect();
    let parts: Vec<Result<Tensor>> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + chunk).min(inputs.rows())).collect();
            let enc = model.encode(&inputs.select_rows(&idx))?;
            Ok(cluster_posterior_batch(&enc.mean, &table, &prior))
        })
        .collect();
    let mut data = Vec::with_capacity(inputs.rows() * table.len());
    for p in parts {
        data.extend_from_slice(p?.data());
    }
    Ok(Tensor::from_vec(inputs.rows(), table.len(), data))
}

// ---- annotation matrix -----------------------------------------------------

/// `|Y| × |T|` class distribution of every cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationMatrix {
    pub values: Tensor,
    pub class_labels: Vec<usize>,
    pub normalized: bool,
}

/// `A[y][c] = Σ_{i: y_i = y} p(c|z_i)`, then `+ε` and column normalization.
pub fn build_annotation_matrix(train: &AssignmentTable) -> Result<AnnotationMatrix> {
    let labels = train.require_labels()?;
    let y = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; y];
    labels.iter().for_each(|&l| counts[l] += 1);
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(k));
    }
    let t = train.node_count();
    let mut a = Tensor::zeros(y, t);
    for (i, &l) in labels.iter().enumerate() {
        for (acc, &p) in a.row_mut(l).iter_mut().zip(train.probs.row(i)) {
            *acc += p;
        }
    }
    for v in a.data_mut() {
        *v += ANNOTATION_EPS;
    }
    for c in 0..t {
        let s: f64 = (0..y).map(|k| a.get(k, c)).sum();
        for k in 0..y {
            a.set(k, c, a.get(k, c) / s);
        }
    }
    Ok(AnnotationMatrix {
        values: a,
        class_labels: (0..y).collect(),
        normalized: true,
    })
}

/// `P̂(y|z) = Σ_c p(c|z) A[y][c]`, one row per sample.
pub fn classify(test: &AssignmentTable, ann: &AnnotationMatrix) -> Result<Tensor> {
    if test.node_count() != ann.values.cols() {
        return Err(Error::Shape(format!(
            "assignments cover {} nodes, annotation matrix {}",
            test.node_count(),
            ann.values.cols()
        )));
    }
    Ok(test.probs.matmul(&ann.values.transpose()))
}

/// Argmax of every row, lowest index on ties.
pub fn hard_predictions(pred: &Tensor) -> Vec<usize> {
    (0..pred.rows()).map(|i| argmax(pred.row(i))).collect()
}

pub fn accuracy(pred: &Tensor, labels: &[usize]) -> Result<f64> {
    if pred.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.rows(), labels.len())));
    }
    let hits = hard_predictions(pred)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Normalized mutual information, arithmetic-mean normalization.
/// Two single-cluster labelings score 1.
pub fn nmi(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), labels.len())));
    }
    let n = labels.len() as f64;
    let a = pred.iter().max().unwrap() + 1;
    let b = labels.iter().max().unwrap() + 1;
    let mut joint = vec![0usize; a * b];
    let mut ra = vec![0usize; a];
    let mut rb = vec![0usize; b];
    for (&p, &l) in pred.iter().zip(labels) {
        joint[p * b + l] += 1;
        ra[p] += 1;
        rb[l] += 1;
    }
    let h = |counts: &[usize]| -> f64 {
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let (ha, hb) = (h(&ra), h(&rb));
    let mut mi = 0.0;
    for i in 0..a {
        for j in 0..b {
            let c = joint[i * b + j];
            if c > 0 {
                let pij = c as f64 / n;
                mi += pij * (pij * n * n / (ra[i] as f64 * rb[j] as f64)).ln();
            }
        }
    }
    if ha + hb == 0.0 {
        return Ok(1.0);
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

// ---- probabilistic purities --------------------------------------------------

/// `P(c, G_k)` for every class `k` (rows) and cluster `c` (columns).
/// Clusters without any mass get purity 0.
fn cluster_purity(table: &AssignmentTable, labels: &[usize], classes: usize) -> Tensor {
    let t = table.node_count();
    let mut by_class = Tensor::zeros(classes, t);
    let mut total = vec![0.0; t];
    for (i, &l) in labels.iter().enumerate() {
        for (c, &p) in table.probs.row(i).iter().enumerate() {
            by_class.set(l, c, by_class.get(l, c) + p);
            total[c] += p;
        }
    }
    for k in 0..classes {
        for (c, &tot) in total.iter().enumerate() {
            let v = if tot > 0.0 { by_class.get(k, c) / tot } else { 0.0 };
            by_class.set(k, c, v);
        }
    }
    by_class
}

/// Expected purity of one pair; a pair sharing no cluster mass scores 0.
fn pair_purity(pi: &[f64], pj: &[f64], purity: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for c in 0..pi.len() {
        let s = pi[c] * pj[c];
        num += s * purity[c];
        den += s;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Pair `k` of the `n(n−1)/2` pairs `i < j`, in row-major order.
fn decode_pair(k: usize, n: usize) -> (usize, usize) {
    // row i starts at i·(2n − i − 1)/2
    let start = |i: usize| i * (2 * n - i - 1) / 2;
    let nf = n as f64;
    let disc = ((2.0 * nf - 1.0).powi(2) - 8.0 * k as f64).max(0.0);
    let mut i = (((2.0 * nf - 1.0) - disc.sqrt()) / 2.0).floor() as usize;
    i = i.min(n - 2);
    while i > 0 && start(i) > k {
        i -= 1;
    }
    while start(i + 1) <= k {
        i += 1;
    }
    (i, i + 1 + k - start(i))
}

/// Members of each class sorted by row content, so pair subsampling does
/// not depend on the order samples arrive in.
fn canonical_members(table: &AssignmentTable, labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    for m in &mut members {
        m.sort_by(|&a, &b| {
            let (ra, rb) = (table.probs.row(a), table.probs.row(b));
            ra.iter()
                .zip(rb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
    }
    members
}

/// Probabilistic dendrogram purity.
///
/// Classes with at most `pair_budget` same-class pairs are enumerated
/// exactly; larger classes use `pair_budget` pairs drawn without
/// replacement (seeded by `seed` and the class index) and are weighted by
/// their full pair count.
pub fn prob_dendrogram_purity(table: &AssignmentTable, pair_budget: usize, seed: u64) -> Result<f64> {
    let labels = table.require_labels()?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let purity = cluster_purity(table, labels, classes);
    let members = canonical_members(table, labels, classes);

    let mut weighted = 0.0;
    let mut z = 0usize;
    for (k, m) in members.iter().enumerate() {
        let n = m.len();
        if n < 2 {
            continue;
        }
        let pairs = n * (n - 1) / 2;
        let picks: Vec<usize> = if pairs <= pair_budget || pair_budget == 0 {
            (0..pairs).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut v = rand::seq::index::sample(&mut rng, pairs, pair_budget).into_vec();
            v.sort_unstable();
            v
        };
        let pk = purity.row(k);
        let sums: Vec<f64> = picks
            .par_chunks(PAIR_CHUNK)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&p| {
                        let (a, b) = decode_pair(p, n);
                        pair_purity(table.probs.row(m[a]), table.probs.row(m[b]), pk)
                    })
                    .sum::<f64>()
            })
            .collect();
        let mean = sums.iter().sum::<f64>() / picks.len() as f64;
        weighted += mean * pairs as f64;
        z += pairs;
    }
    if z == 0 {
        return Err(Error::NoSameClassPair);
    }
    Ok(weighted / z as f64)
}

/// Probabilistic leaf purity over the `2^depth` leaf columns.
pub fn prob_leaf_purity(table: &AssignmentTable, tree_depth: usize) -> Result<f64> {
    let labels = table.require_labels()?;
    if table.node_count() != taxonomy::node_count(tree_depth) {
        return Err(Error::Shape(format!(
            "table has {} nodes, depth {tree_depth} needs {}",
            table.node_count(),
            taxonomy::node_count(tree_depth)
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let first = taxonomy::first_leaf(tree_depth);
    let leaves = taxonomy::leaf_count(tree_depth);
    let mut mass = Tensor::zeros(leaves, classes);
    for (i, &l) in labels.iter().enumerate() {
        for (leaf, &p) in table.probs.row(i)[first..].iter().enumerate() {
            mass.set(leaf, l, mass.get(leaf, l) + p);
        }
    }
    let total = mass.sum();
    if !(total > 0.0) {
        return Err(Error::ZeroLeafMass);
    }
    let majority: f64 = (0..leaves).map(|leaf| mass.get(leaf, argmax(mass.row(leaf)))).sum();
    Ok(majority / total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub nmi: f64,
    pub dp: f64,
    pub lp: f64,
    pub n: usize,
    pub tree_depth: usize,
    pub pair_budget: usize,
    pub seed: u64,
}

/// Annotates with `train`, classifies `test`, and scores `test`.
pub fn evaluate(train: &AssignmentTable, test: &AssignmentTable, pair_budget: usize, seed: u64) -> Result<MetricsReport> {
    let depth = test
        .tree_depth()
        .ok_or_else(|| Error::Shape(format!("{} nodes is not a complete binary tree", test.node_count())))?;
    let ann = build_annotation_matrix(train)?;
    let pred = classify(test, &ann)?;
    let labels = test.require_labels()?;
    Ok(MetricsReport {
        acc: accuracy(&pred, labels)?,
        nmi: nmi(&hard_predictions(&pred), labels)?,
        dp: prob_dendrogram_purity(test, pair_budget, seed)?,
        lp: prob_leaf_purity(test, depth)?,
        n: test.len(),
        tree_depth: depth,
        pair_budget,
        seed,
    })
}
