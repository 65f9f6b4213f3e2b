//! Optimization loop, augmentation and training checkpoints.
//!
//! Every random draw is keyed to `(seed, purpose, index)`: the shuffle of
//! epoch `e`, the noise and augmentations of step `s`. A run can therefore
//! stop after any step and resume to the same trajectory.
//!
//! Output directory layout:
//! - `model.json`, `tree.json`: model and tree checkpoints
//! - `trainer.json`: step counter and optimizer state
//! - `loss.jsonl`: one [`LossRecord`] per step
//! - `config.toml`: the effective configuration

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use crate::config::{AugmentSpec, DataSource, TrainConfig};
use crate::autograd::Graph;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::io::{read_bytes, read_json, write_atomic, write_json_atomic};
use crate::model::{Model, ModelVars};
use crate::objective::{build_loss, LossBatch, LossRecord};
use crate::optim::Adam;
use crate::taxonomy::{TaxonomyTree, TreeVars};
use crate::tensor::Tensor;

pub const TRAINER_FORMAT_VERSION: u32 = 1;

pub const MODEL_FILE: &str = "model.json";
pub const TREE_FILE: &str = "tree.json";
pub const TRAINER_FILE: &str = "trainer.json";
pub const LOSS_LOG_FILE: &str = "loss.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_STEP: u64 = 3;

/// Seed for draw `index` of stream `stream` under the run seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

/// Loads the dataset a config points at.
pub fn load_data_source(src: &DataSource) -> Result<Dataset> {
    match src {
        DataSource::Idx { images, labels, limit } => {
            let ds = match labels {
                Some(l) => data::load_idx(images, l)?,
                None => data::load_idx_images(images)?,
            };
            Ok(match limit {
                Some(n) => ds.head(*n),
                None => ds,
            })
        }
        DataSource::Features { path, standardize } => data::load_features(path, *standardize),
        DataSource::Synthetic(spec) => Ok(data::generate_synthetic(spec)?.dataset),
    }
}

// ---- augmentation ----------------------------------------------------------

/// One random view of a sample.
///
/// Images (`H, W > 1`) get, as switched on in `spec`: a random crop whose
/// side is a uniform fraction of the image side, resized back bilinearly;
/// a horizontal flip; additive Gaussian noise; then a clamp to `[0, 1]`.
/// Flat feature vectors only receive the noise and are not clamped.
pub fn augment(x: &[f64], shape: [usize; 3], spec: &AugmentSpec, rng: &mut impl Rng) -> Vec<f64> {
    let [c, h, w] = shape;
    let image = h > 1 && w > 1;
    let mut out = x.to_vec();
    if image {
        if spec.crop {
            let s = if spec.crop_max_scale > spec.crop_min_scale {
                rng.random_range(spec.crop_min_scale..=spec.crop_max_scale)
            } else {
                spec.crop_min_scale
            };
            let ch = ((s * h as f64).round() as usize).clamp(1, h);
            let cw = ((s * w as f64).round() as usize).clamp(1, w);
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            out = crop_resize(&out, [c, h, w], top, left, ch, cw);
        }
        if spec.flip && rng.random::<f64>() < spec.flip_prob {
            for ch_i in 0..c {
                for r in 0..h {
                    out[(ch_i * h + r) * w..(ch_i * h + r + 1) * w].reverse();
                }
            }
        }
    }
    if spec.noise && spec.noise_std > 0.0 {
        for v in out.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += spec.noise_std * e;
        }
    }
    if image {
        out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    out
}

/// Bilinear resize of the `ch × cw` window at `(top, left)` back to `h × w`.
fn crop_resize(x: &[f64], [c, h, w]: [usize; 3], top: usize, left: usize, ch: usize, cw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    let sy = ch as f64 / h as f64;
    let sx = cw as f64 / w as f64;
    for k in 0..c {
        let plane = &x[k * h * w..(k + 1) * h * w];
        for i in 0..h {
            let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
            let y0 = y.floor() as usize;
            let y1 = (y0 + 1).min(ch - 1);
            let fy = y - y0 as f64;
            for j in 0..w {
                let xx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
                let x0 = xx.floor() as usize;
                let x1 = (x0 + 1).min(cw - 1);
                let fx = xx - x0 as f64;
                let at = |r: usize, q: usize| plane[(top + r) * w + left + q];
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                    + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                out[(k * h + i) * w + j] = v;
            }
        }
    }
    out
}

// ---- trainer ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerCheckpoint {
    pub format_version: u32,
    pub step: usize,
    pub optimizer: Adam,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    model: Model,
    tree: TaxonomyTree,
    optimizer: Adam,
    step: usize,
    log: Vec<LossRecord>,
    perm: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    /// Fresh parameters seeded from `config.seed`.
    pub fn new(config: TrainConfig, input_shape: [usize; 3]) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, STREAM_INIT, 0);
        let model = Model::new(config.model_spec(input_shape), &mut rng)?;
        let tree = TaxonomyTree::new(config.depth, config.latent_dim, config.variance_mode, &mut rng);
        Ok(Self::from_parts(config, model, tree))
    }

    /// Starts from given parameters with a fresh optimizer.
    pub fn with_state(config: TrainConfig, model: Model, tree: TaxonomyTree) -> Result<Self> {
        config.validate()?;
        if tree.depth() != config.depth || tree.latent_dim() != model.spec().latent_dim {
            return Err(Error::Config("tree does not match the configured depth or the model's latent dim".into()));
        }
        Ok(Self::from_parts(config, model, tree))
    }

    fn from_parts(config: TrainConfig, model: Model, tree: TaxonomyTree) -> Self {
        let mut shapes: Vec<(usize, usize)> = model.params().iter().map(Tensor::shape).collect();
        shapes.push(tree.leaf_means.shape());
        shapes.push(tree.leaf_log_vars.shape());
        shapes.push(tree.branch_logits.shape());
        let optimizer = Adam::new(config.learning_rate, &shapes);
        Self {
            config,
            model,
            tree,
            optimizer,
            step: 0,
            log: Vec::new(),
            perm: None,
        }
    }

    /// Reloads a run written by [`Trainer::save`].
    pub fn resume(config: TrainConfig, dir: &Path) -> Result<Self> {
        config.validate()?;
        let model = Model::load(&dir.join(MODEL_FILE))?;
        let tree = TaxonomyTree::load(&dir.join(TREE_FILE))?;
        let ck: TrainerCheckpoint = read_json(&dir.join(TRAINER_FILE))?;
        if ck.format_version != TRAINER_FORMAT_VERSION {
            return Err(Error::Version {
                found: ck.format_version,
                expected: TRAINER_FORMAT_VERSION,
            });
        }
        if tree.depth() != config.depth || tree.latent_dim() != config.latent_dim {
            return Err(Error::Config("checkpoint tree does not match the configured depth/latent_dim".into()));
        }
        let log = read_loss_log(&dir.join(LOSS_LOG_FILE))?;
        if log.len() != ck.step {
            return Err(Error::Format(format!(
                "loss log has {} lines but the checkpoint is at step {}",
                log.len(),
                ck.step
            )));
        }
        let mut t = Self::from_parts(config, model, tree);
        t.optimizer = ck.optimizer;
        t.optimizer.lr = t.config.learning_rate;
        t.step = ck.step;
        t.log = log;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn tree(&self) -> &TaxonomyTree {
        &self.tree
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.config.epochs * self.steps_per_epoch(n);
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    fn batch_indices(&mut self, n: usize) -> (usize, Vec<usize>) {
        let spe = self.steps_per_epoch(n);
        let epoch = self.step / spe;
        let b = self.step % spe;
        if self.perm.as_ref().is_none_or(|(e, p)| *e != epoch || p.len() != n) {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng_for(self.config.seed, STREAM_SHUFFLE, epoch as u64));
            self.perm = Some((epoch, p));
        }
        let p = &self.perm.as_ref().expect("just set").1;
        let bs = self.config.batch_size;
        (epoch, p[b * bs..((b + 1) * bs).min(n)].to_vec())
    }

    /// Runs the next optimizer step on `data`.
    pub fn step(&mut self, data: &Dataset) -> Result<LossRecord> {
        if data.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        if data.input_shape != self.model.spec().input_shape {
            return Err(Error::Shape(format!(
                "dataset shape {:?} does not match model input {:?}",
                data.input_shape,
                self.model.spec().input_shape
            )));
        }
        let (epoch, idx) = self.batch_indices(data.len());
        let x = data.inputs.select_rows(&idx);
        let mut rng = rng_for(self.config.seed, STREAM_STEP, self.step as u64);
        let d = self.config.latent_dim;

        let (x1, x2) = if self.config.contrastive {
            let shape = data.input_shape;
            let mut v1 = Vec::with_capacity(x.len());
            let mut v2 = Vec::with_capacity(x.len());
            for i in 0..x.rows() {
                v1.extend(augment(x.row(i), shape, &self.config.augment, &mut rng));
                v2.extend(augment(x.row(i), shape, &self.config.augment, &mut rng));
            }
            (
                Tensor::from_vec(x.rows(), x.cols(), v1),
                Some(Tensor::from_vec(x.rows(), x.cols(), v2)),
            )
        } else {
            (x, None)
        };
        let mut noise = |rows: usize| {
            Tensor::from_vec(rows, d, (0..rows * d).map(|_| StandardNormal.sample(&mut rng)).collect())
        };
        let eps1 = noise(idx.len());
        let eps2 = x2.as_ref().map(|_| noise(idx.len()));

        let mut g = Graph::new();
        let mvars = ModelVars::register(&mut g, &self.model);
        let tvars = TreeVars::register(&mut g, &self.tree);
        let batch = LossBatch {
            x: &x1,
            eps: &eps1,
            contrast: x2.as_ref().zip(eps2.as_ref()),
        };
        let loss = build_loss(&mut g, &self.model, &mvars, &self.tree, tvars, batch, &self.config.loss)?;
        let terms = loss.breakdown(&g);
        let spe = self.steps_per_epoch(data.len());
        if !terms.all_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                batch: self.step % spe,
                breakdown: serde_json::to_string(&terms)?,
            });
        }

        let mut grads = g.backward(loss.total);
        let mut all: Vec<Tensor> = Vec::new();
        for (v, p) in mvars.vars().iter().zip(self.model.params()) {
            all.push(grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())));
        }
        for (v, p) in [
            (tvars.leaf_means, &self.tree.leaf_means),
            (tvars.leaf_log_vars, &self.tree.leaf_log_vars),
            (tvars.branch_logits, &self.tree.branch_logits),
        ] {
            all.push(grads.take(v).unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())));
        }
        drop(g);

        {
            let tree = &mut self.tree;
            let mut params: Vec<&mut Tensor> = self.model.params_mut().iter_mut().collect();
            params.push(&mut tree.leaf_means);
            params.push(&mut tree.leaf_log_vars);
            params.push(&mut tree.branch_logits);
            self.optimizer.step(&mut params, &all)?;
        }
        let finite = self.model.params().iter().all(Tensor::all_finite)
            && self.tree.leaf_means.all_finite()
            && self.tree.leaf_log_vars.all_finite()
            && self.tree.branch_logits.all_finite();
        if !finite {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                batch: self.step % spe,
                breakdown: format!("parameters became non-finite after update; loss terms {}", serde_json::to_string(&terms)?),
            });
        }

        let rec = LossRecord {
            step: self.step,
            epoch,
            terms,
        };
        self.step += 1;
        self.log.push(rec.clone());
        Ok(rec)
    }

    /// Steps until the configured budget; checkpoints into `out` if given.
    pub fn run(&mut self, data: &Dataset, out: Option<&Path>) -> Result<()> {
        let total = self.total_steps(data.len());
        while self.step < total {
            self.step(data)?;
            if let (Some(dir), Some(every)) = (out, self.config.checkpoint_every) {
                if self.step % every == 0 && self.step < total {
                    self.save(dir)?;
                }
            }
        }
        if let Some(dir) = out {
            self.save(dir)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(&dir.join(MODEL_FILE))?;
        self.tree.save(&dir.join(TREE_FILE))?;
        write_json_atomic(
            &dir.join(TRAINER_FILE),
            &TrainerCheckpoint {
                format_version: TRAINER_FORMAT_VERSION,
                step: self.step,
                optimizer: self.optimizer.clone(),
            },
        )?;
        write_atomic(&dir.join(LOSS_LOG_FILE), loss_log_text(&self.log)?.as_bytes())?;
        write_atomic(&dir.join(CONFIG_FILE), self.config.to_toml_string()?.as_bytes())
    }
}

pub fn loss_log_text(log: &[LossRecord]) -> Result<String> {
    let mut s = String::new();
    for r in log {
        let _ = writeln!(s, "{}", serde_json::to_string(r)?);
    }
    Ok(s)
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Model and tree from a run's output directory.
pub fn load_trained(dir: &Path) -> Result<(Model, TaxonomyTree)> {
    let model = Model::load(&dir.join(MODEL_FILE))?;
    let tree = TaxonomyTree::load(&dir.join(TREE_FILE))?;
    if model.spec().latent_dim != tree.latent_dim() {
        return Err(Error::Shape(format!(
            "{}: model latent dim {} differs from tree latent dim {}",
            dir.display(),
            model.spec().latent_dim,
            tree.latent_dim()
        )));
    }
    Ok((model, tree))
}

/// Final state of a run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub tree: TaxonomyTree,
    pub log: Vec<LossRecord>,
    pub out_dir: Option<PathBuf>,
}

/// Trains from scratch on `data`, writing checkpoints to `out` if given.
pub fn train(config: TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutput> {
    let mut t = Trainer::new(config, data.input_shape)?;
    t.run(data, out)?;
    Ok(TrainOutput {
        model: t.model,
        tree: t.tree,
        log: t.log,
        out_dir: out.map(Path::to_path_buf),
    })
}
