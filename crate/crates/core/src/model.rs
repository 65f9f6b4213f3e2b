//! Encoder `q(z|x)`, decoder `p(x|z)` and the contrastive projection heads.
//!
//! Parameters live in one flat list of named matrices so the optimizer and
//! the checkpoint code can treat every architecture the same way. Dense
//! weights are stored `in × out` (inputs are row vectors).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json_atomic};
use crate::taxonomy::{LOG_VAR_MAX, LOG_VAR_MIN};
use crate::tensor::Tensor;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Bernoulli probabilities are clamped to `[P_CLAMP, 1 − P_CLAMP]`.
pub const P_CLAMP: f64 = 1e-7;

pub const PROJECTION_HIDDEN: usize = 512;
pub const PROJECTION_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Dense layers with rectifiers; widths from [`ModelSpec::hidden`].
    Mlp,
    /// Three strided 3×3 convolutions (28×28 → 3×3) and a mirrored decoder.
    ConvGrayscale,
    /// One affine map each way, for precomputed feature vectors.
    LinearFeature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    Bernoulli,
    GaussianUnitVariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[channels, height, width]`; feature vectors use `[1, 1, dim]`.
    pub input_shape: [usize; 3],
    pub latent_dim: usize,
    pub architecture: Architecture,
    /// Hidden widths of the `mlp` encoder (decoder mirrors them).
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub likelihood: Likelihood,
    /// Number of tree nodes seen by the cluster projection head; zero
    /// disables both projection heads.
    #[serde(default)]
    pub projection_nodes: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![256, 128]
}

impl ModelSpec {
    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn has_projection(&self) -> bool {
        self.projection_nodes > 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.input_dim() == 0 {
            return Err(Error::Config("latent and input dimensions must be positive".into()));
        }
        match self.architecture {
            Architecture::ConvGrayscale if self.input_shape != [1, 28, 28] => Err(Error::Config(
                format!("conv_grayscale expects input shape [1, 28, 28], got {:?}", self.input_shape),
            )),
            Architecture::Mlp if self.hidden.is_empty() || self.hidden.contains(&0) => {
                Err(Error::Config("mlp needs at least one positive hidden width".into()))
            }
            _ => Ok(()),
        }
    }

    /// Width of the encoder features fed to the embedding projection head.
    pub fn feature_dim(&self) -> usize {
        match self.architecture {
            Architecture::Mlp => *self.hidden.last().expect("validated"),
            Architecture::ConvGrayscale => CONV_FEATURES,
            Architecture::LinearFeature => self.input_dim(),
        }
    }

    fn layout(&self) -> Vec<(String, usize, usize)> {
        let d = self.latent_dim;
        let n_in = self.input_dim();
        let mut l: Vec<(String, usize, usize)> = Vec::new();
        let dense = |l: &mut Vec<_>, name: &str, i: usize, o: usize| {
            l.push((format!("{name}.w"), i, o));
            l.push((format!("{name}.b"), 1, o));
        };
        match self.architecture {
            Architecture::Mlp => {
                let mut prev = n_in;
                for (k, &w) in self.hidden.iter().enumerate() {
                    dense(&mut l, &format!("enc.{k}"), prev, w);
                    prev = w;
                }
                dense(&mut l, "enc.mean", prev, d);
                dense(&mut l, "enc.log_var", prev, d);
                let mut prev = d;
                for (k, &w) in self.hidden.iter().rev().enumerate() {
                    dense(&mut l, &format!("dec.{k}"), prev, w);
                    prev = w;
                }
                dense(&mut l, "dec.out", prev, n_in);
            }
            Architecture::ConvGrayscale => {
                for (k, g) in CONV_ENCODER.iter().enumerate() {
                    l.push((format!("enc.conv{k}.w"), g.out_channels, g.in_channels * g.kernel * g.kernel));
                    l.push((format!("enc.conv{k}.b"), 1, g.out_channels));
                }
                dense(&mut l, "enc.mean", CONV_FEATURES, d);
                dense(&mut l, "enc.log_var", CONV_FEATURES, d);
                dense(&mut l, "dec.fc", d, CONV_FEATURES);
                for (k, g) in CONV_DECODER.iter().enumerate() {
                    l.push((format!("dec.deconv{k}.w"), g.in_channels, g.out_channels * g.kernel * g.kernel));
                    l.push((format!("dec.deconv{k}.b"), 1, g.out_channels));
                }
            }
            Architecture::LinearFeature => {
                dense(&mut l, "enc.mean", n_in, d);
                dense(&mut l, "enc.log_var", n_in, d);
                dense(&mut l, "dec.out", d, n_in);
            }
        }
        if self.has_projection() {
            dense(&mut l, "proj.embed.0", self.feature_dim(), PROJECTION_HIDDEN);
            dense(&mut l, "proj.embed.1", PROJECTION_HIDDEN, PROJECTION_DIM);
            dense(&mut l, "proj.cluster", self.projection_nodes, PROJECTION_DIM);
        }
        l
    }
}

const CONV_FEATURES: usize = 32 * 3 * 3;

const fn conv(in_channels: usize, in_hw: usize, out_channels: usize, padding: usize, output_padding: usize) -> ConvGeom {
    ConvGeom {
        in_channels,
        in_h: in_hw,
        in_w: in_hw,
        out_channels,
        kernel: 3,
        stride: 2,
        padding,
        output_padding,
    }
}

/// 1×28×28 → 8×14×14 → 16×7×7 → 32×3×3
const CONV_ENCODER: [ConvGeom; 3] = [conv(1, 28, 8, 1, 0), conv(8, 14, 16, 1, 0), conv(16, 7, 32, 0, 0)];
/// 32×3×3 → 16×7×7 → 8×14×14 → 1×28×28
const CONV_DECODER: [ConvGeom; 3] = [conv(32, 3, 16, 0, 0), conv(16, 7, 8, 1, 1), conv(8, 14, 1, 1, 1)];

/// Per-sample `q(z|x) = N(mean, diag exp(log_var))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentPosterior {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Self {
        let log_var = log_var.into_iter().map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).collect();
        Self { mean, log_var }
    }

    /// `mean + exp(½ log_var) ⊙ ε`, `ε ~ N(0, I)`.
    pub fn reparameterize(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample(&mut rng)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .map(|(&m, &lv)| {
                let e: f64 = StandardNormal.sample(rng);
                m + (0.5 * lv).exp() * e
            })
            .collect()
    }
}

/// Batched encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub features: Tensor,
    pub mean: Tensor,
    pub log_var: Tensor,
}

impl Encoded {
    pub fn posterior(&self, i: usize) -> LatentPosterior {
        LatentPosterior {
            mean: self.mean.row(i).to_vec(),
            log_var: self.log_var.row(i).to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Tape handles for a model's parameters, same order as [`Model::params`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    vars: Vec<Var>,
    names: Vec<String>,
}

impl ModelVars {
    pub fn register(g: &mut Graph, model: &Model) -> Self {
        Self {
            vars: model.params.iter().map(|p| g.param(p.clone())).collect(),
            names: model.names.clone(),
        }
    }

    /// Pairs existing tape handles with parameter names (same order as the model).
    pub fn from_vars(vars: Vec<Var>, names: Vec<String>) -> Self {
        assert_eq!(vars.len(), names.len(), "one handle per parameter");
        Self { vars, names }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[i]
    }

    fn dense(&self, g: &mut Graph, name: &str, x: Var) -> Var {
        let (w, b) = (self.get(&format!("{name}.w")), self.get(&format!("{name}.b")));
        g.affine(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub features: Var,
    pub mean: Var,
    pub log_var: Var,
}

impl Model {
    /// Uniform `±1/√fan_in` initialisation, except the log-variance head which starts at zero.
    pub fn new(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        let layout = spec.layout();
        for (k, (name, r, c)) in layout.iter().enumerate() {
            let fan_in = if name.ends_with(".b") {
                let w = &layout[k - 1];
                fan_in_of(&w.0, w.1, w.2)
            } else {
                fan_in_of(name, *r, *c)
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut data: Vec<f64> = (0..r * c).map(|_| rng.random_range(-bound..bound)).collect();
            // Start every posterior at unit variance whatever the input scale;
            // a random head on large raw inputs saturates the log-variance clamp.
            if name.starts_with("enc.log_var") {
                data.fill(0.0);
            }
            names.push(name.clone());
            params.push(Tensor::from_vec(*r, *c, data));
        }
        Ok(Self { spec, names, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        if self.params[i].shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name} is {:?}, got {:?}",
                self.params[i].shape(),
                value.shape()
            )));
        }
        self.params[i] = value;
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.spec.input_dim() {
            return Err(Error::Shape(format!(
                "input rows have {} values, model expects {}",
                x.cols(),
                self.spec.input_dim()
            )));
        }
        Ok(())
    }

    // ---- tape builders ----

    pub fn encode_on_graph(&self, g: &mut Graph, vars: &ModelVars, x: Var) -> EncodedVars {
        let features = match self.spec.architecture {
            Architecture::Mlp => {
                let mut h = x;
                for k in 0..self.spec.hidden.len() {
                    let a = vars.dense(g, &format!("enc.{k}"), h);
                    h = g.relu(a);
                }
                h
            }
            Architecture::ConvGrayscale => {
                let mut h = x;
                for (k, geom) in CONV_ENCODER.iter().enumerate() {
                    let w = vars.get(&format!("enc.conv{k}.w"));
                    let b = vars.get(&format!("enc.conv{k}.b"));
                    let a = g.conv2d(h, w, b, *geom);
                    h = g.relu(a);
                }
                h
            }
            Architecture::LinearFeature => x,
        };
        let mean = vars.dense(g, "enc.mean", features);
        let lv = vars.dense(g, "enc.log_var", features);
        let log_var = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
        EncodedVars {
            features,
            mean,
            log_var,
        }
    }

    /// Data-space output: probabilities for Bernoulli, raw values for Gaussian.
    pub fn decode_on_graph(&self, g: &mut Graph, vars: &ModelVars, z: Var) -> Var {
        let out = match self.spec.architecture {
            Architecture::Mlp => {
                let mut h = z;
                for k in 0..self.spec.hidden.len() {
                    let a = vars.dense(g, &format!("dec.{k}"), h);
                    h = g.relu(a);
                }
                vars.dense(g, "dec.out", h)
            }
            Architecture::ConvGrayscale => {
                let a = vars.dense(g, "dec.fc", z);
                let mut h = g.relu(a);
                for (k, geom) in CONV_DECODER.iter().enumerate() {
                    let w = vars.get(&format!("dec.deconv{k}.w"));
                    let b = vars.get(&format!("dec.deconv{k}.b"));
                    h = g.conv_transpose2d(h, w, b, *geom);
                    if k + 1 < CONV_DECODER.len() {
                        h = g.relu(h);
                    }
                }
                h
            }
            Architecture::LinearFeature => vars.dense(g, "dec.out", z),
        };
        match self.spec.likelihood {
            Likelihood::Bernoulli => g.sigmoid(out),
            Likelihood::GaussianUnitVariance => out,
        }
    }

    /// Embedding head: features → 512 → 64 with a rectifier in between.
    pub fn embed_projection_on_graph(&self, g: &mut Graph, vars: &ModelVars, features: Var) -> Var {
        let h = vars.dense(g, "proj.embed.0", features);
        let h = g.relu(h);
        vars.dense(g, "proj.embed.1", h)
    }

    /// Cluster head: one linear map `|T| → 64` applied to `p(c|z)`.
    pub fn cluster_projection_on_graph(&self, g: &mut Graph, vars: &ModelVars, probs: Var) -> Var {
        vars.dense(g, "proj.cluster", probs)
    }

    // ---- plain evaluation ----

    pub fn encode(&self, x: &Tensor) -> Result<Encoded> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let vars = self.constant_vars(&mut g);
        let xv = g.constant(x.clone());
        let e = self.encode_on_graph(&mut g, &vars, xv);
        Ok(Encoded {
            features: g.value(e.features).clone(),
            mean: g.value(e.mean).clone(),
            log_var: g.value(e.log_var).clone(),
        })
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.spec.latent_dim {
            return Err(Error::Shape(format!(
                "latent rows have {} values, model expects {}",
                z.cols(),
                self.spec.latent_dim
            )));
        }
        let mut g = Graph::new();
        let vars = self.constant_vars(&mut g);
        let zv = g.constant(z.clone());
        let out = self.decode_on_graph(&mut g, &vars, zv);
        Ok(g.value(out).clone())
    }

    fn constant_vars(&self, g: &mut Graph) -> ModelVars {
        ModelVars {
            vars: self.params.iter().map(|p| g.constant(p.clone())).collect(),
            names: self.names.clone(),
        }
    }

    // ---- checkpoint ----

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            format_version: MODEL_FORMAT_VERSION,
            spec: self.spec.clone(),
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, t)| NamedTensor {
                    name: n.clone(),
                    tensor: t.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: ModelCheckpoint) -> Result<Self> {
        if ck.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                found: ck.format_version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        ck.spec.validate()?;
        let layout = ck.spec.layout();
        if layout.len() != ck.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameter arrays, spec needs {}",
                ck.params.len(),
                layout.len()
            )));
        }
        for ((name, r, c), p) in layout.iter().zip(&ck.params) {
            if *name != p.name || p.tensor.shape() != (*r, *c) {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match expected {name} {:?}",
                    p.name,
                    p.tensor.shape(),
                    (r, c)
                )));
            }
        }
        let (names, params) = ck.params.into_iter().map(|p| (p.name, p.tensor)).unzip();
        Ok(Self {
            spec: ck.spec,
            names,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(read_json(path)?)
    }
}

fn fan_in_of(name: &str, rows: usize, cols: usize) -> usize {
    if name.contains(".conv") {
        cols
    } else if name.contains(".deconv") {
        // transposed conv weight is Cin × (Cout·k·k); PyTorch uses Cout·k·k
        cols
    } else {
        rows
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub params: Vec<NamedTensor>,
}

/// `z = mean + exp(½ log_var) ⊙ ε` on the tape; `eps` is a constant.
pub fn reparameterize_on_graph(g: &mut Graph, mean: Var, log_var: Var, eps: &Tensor) -> Var {
    let half = g.scale(log_var, 0.5);
    let std = g.exp(half);
    let e = g.constant(eps.clone());
    let noise = g.mul(std, e);
    g.add(mean, noise)
}

/// Per-sample reconstruction log-likelihood (`N × 1`).
///
/// Bernoulli: `Σ x log x̂ + (1−x) log(1−x̂)` with `x̂` clamped to `[1e-7, 1−1e-7]`.
/// Gaussian: `−½‖x − x̂‖²`, additive constant dropped.
pub fn recon_log_likelihood_on_graph(g: &mut Graph, x: Var, x_hat: Var, likelihood: Likelihood) -> Var {
    match likelihood {
        Likelihood::Bernoulli => {
            let p = g.clamp(x_hat, P_CLAMP, 1.0 - P_CLAMP);
            let lp = g.ln(p);
            let q = g.rsub_scalar(1.0, p);
            let lq = g.ln(q);
            let one_minus_x = g.rsub_scalar(1.0, x);
            let a = g.mul(x, lp);
            let b = g.mul(one_minus_x, lq);
            let s = g.add(a, b);
            g.row_sums(s)
        }
        Likelihood::GaussianUnitVariance => {
            let d = g.sub(x, x_hat);
            let sq = g.square(d);
            let s = g.row_sums(sq);
            g.scale(s, -0.5)
        }
    }
}

/// Plain form of [`recon_log_likelihood_on_graph`] for one sample.
pub fn recon_log_likelihood(x: &[f64], x_hat: &[f64], likelihood: Likelihood) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::Shape(format!("x has {} values, x_hat {}", x.len(), x_hat.len())));
    }
    match likelihood {
        Likelihood::Bernoulli => {
            if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Domain(format!("bernoulli target {v} outside [0, 1]")));
            }
            Ok(x.iter()
                .zip(x_hat)
                .map(|(&xi, &pi)| {
                    let p = pi.clamp(P_CLAMP, 1.0 - P_CLAMP);
                    xi * p.ln() + (1.0 - xi) * (1.0 - p).ln()
                })
                .sum())
        }
        Likelihood::GaussianUnitVariance => {
            Ok(-0.5 * x.iter().zip(x_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        }
    }
}
