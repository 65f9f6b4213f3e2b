//! Datasets: IDX image files, precomputed feature vectors, synthetic tree data.
//!
//! # Feature file, binary layout (all integers little-endian)
//!
//! | offset | size  | field                                  |
//! |--------|-------|----------------------------------------|
//! | 0      | 4     | magic `b"TXNF"`                        |
//! | 4      | 4     | format version `u32` = 1               |
//! | 8      | 8     | `N` as `u64`                           |
//! | 16     | 8     | `D` as `u64`                           |
//! | 24     | 1     | label flag `u8` (0 or 1)               |
//! | 25     | 8·N·D | values, `f64` row-major                |
//! | …      | 8·N   | labels as `u64`, only if the flag is 1 |
//!
//! Nothing may follow the last field.
//!
//! # Feature file, CSV layout
//!
//! The first record is `N,D,L` with `L` ∈ {0, 1}. Each of the next `N`
//! records holds `D` values, followed by an integer label when `L = 1`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic, Reader};
use crate::taxonomy::{self, TaxonomyTree, VarianceMode};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const FEATURE_MAGIC: [u8; 4] = *b"TXNF";
pub const FEATURE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub source: String,
    /// Pixels were divided by 255.
    pub unit_scaled: bool,
    pub standardization: Option<Standardization>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N × (C·H·W)`
    pub inputs: Tensor,
    /// `[C, H, W]`; feature vectors use `[1, 1, D]`.
    pub input_shape: [usize; 3],
    pub labels: Option<Vec<usize>>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(inputs: Tensor, input_shape: [usize; 3], labels: Option<Vec<usize>>, meta: DatasetMeta) -> Result<Self> {
        if inputs.cols() != input_shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "rows have {} values but input shape is {input_shape:?}",
                inputs.cols()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != inputs.rows() {
                return Err(Error::Shape(format!("{} labels for {} samples", l.len(), inputs.rows())));
            }
        }
        Ok(Self {
            inputs,
            input_shape,
            labels,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    /// `max label + 1`, or 0 without labels.
    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    pub fn is_image(&self) -> bool {
        self.input_shape[1] > 1 && self.input_shape[2] > 1
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            input_shape: self.input_shape,
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            meta: self.meta.clone(),
        }
    }

    /// First `n` samples (all if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Shape(format!("{} labels for {} samples", labels.len(), self.len())));
        }
        self.labels = Some(labels);
        Ok(self)
    }
}

// ---- IDX ----------------------------------------------------------------

/// Images scaled to `[0, 1]` plus labels; files must agree on the count.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut ds = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if labels.len() != ds.len() {
        return Err(Error::Format(format!(
            "{} holds {} images but {} holds {} labels",
            images_path.display(),
            ds.len(),
            labels_path.display(),
            labels.len()
        )));
    }
    ds.labels = Some(labels);
    Ok(ds)
}

pub fn load_idx_images(path: &Path) -> Result<Dataset> {
    let bytes = read_bytes(path)?;
    let mut r = Reader::new(path, &bytes);
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = r.u32_be()? as usize;
    let h = r.u32_be()? as usize;
    let w = r.u32_be()? as usize;
    let pixels = r.take(n * h * w)?;
    r.finish()?;
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(
        Tensor::from_vec(n, h * w, data),
        [1, h, w],
        None,
        DatasetMeta {
            source: path.display().to_string(),
            unit_scaled: true,
            standardization: None,
        },
    )
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_bytes(path)?;
    let mut r = Reader::new(path, &bytes);
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = r.u32_be()? as usize;
    let labels = r.take(n)?.iter().map(|&b| b as usize).collect();
    r.finish()?;
    Ok(labels)
}

/// Writes images (values in `[0, 1]`, rounded to bytes) and labels as IDX.
pub fn write_idx(images_path: &Path, labels_path: Option<&Path>, ds: &Dataset) -> Result<()> {
    let [_, h, w] = ds.input_shape;
    let mut out = Vec::with_capacity(16 + ds.inputs.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [ds.len(), h, w] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    out.extend(ds.inputs.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    write_atomic(images_path, &out)?;
    if let (Some(p), Some(labels)) = (labels_path, &ds.labels) {
        let mut out = Vec::with_capacity(8 + labels.len());
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend(labels.iter().map(|&l| l as u8));
        write_atomic(p, &out)?;
    }
    Ok(())
}

// ---- feature files ------------------------------------------------------

/// Reads a feature file; `.csv` selects the CSV layout, anything else binary.
pub fn load_features(path: &Path, standardize: bool) -> Result<Dataset> {
    let (values, labels) = if is_csv(path) {
        read_features_csv(path)?
    } else {
        read_features_bin(path)?
    };
    let d = values.cols();
    let mut ds = Dataset::new(
        values,
        [1, 1, d],
        labels,
        DatasetMeta {
            source: path.display().to_string(),
            unit_scaled: false,
            standardization: None,
        },
    )?;
    if standardize {
        standardize_in_place(&mut ds);
    }
    Ok(ds)
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Per-dimension zero mean, unit (population) standard deviation.
/// Constant columns keep a divisor of 1.
pub fn standardize_in_place(ds: &mut Dataset) {
    let (n, d) = ds.inputs.shape();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(ds.inputs.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(ds.inputs.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|s| {
            let sd = (s / n.max(1) as f64).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    for i in 0..n {
        for (k, v) in ds.inputs.row_mut(i).iter_mut().enumerate() {
            *v = (*v - mean[k]) / std[k];
        }
    }
    ds.meta.standardization = Some(Standardization { mean, std });
}

fn read_features_bin(path: &Path) -> Result<(Tensor, Option<Vec<usize>>)> {
    let bytes = read_bytes(path)?;
    let mut r = Reader::new(path, &bytes);
    let magic = r.take(4)?;
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: u32::from_be_bytes(magic.try_into().expect("4 bytes")),
            expected: u32::from_be_bytes(FEATURE_MAGIC),
        });
    }
    let version = r.u32_le()?;
    if version != FEATURE_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FEATURE_FORMAT_VERSION,
        });
    }
    let n = r.u64_le()? as usize;
    let d = r.u64_le()? as usize;
    let flag = r.u8()?;
    if flag > 1 {
        return Err(Error::Format(format!("{}: label flag must be 0 or 1, got {flag}", path.display())));
    }
    let expected = 25 + 8 * n * d + if flag == 1 { 8 * n } else { 0 };
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    let mut values = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        values.push(r.f64_le()?);
    }
    let labels = if flag == 1 {
        Some((0..n).map(|_| r.u64_le().map(|v| v as usize)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    r.finish()?;
    Ok((Tensor::from_vec(n, d, values), labels))
}

fn read_features_csv(path: &Path) -> Result<(Tensor, Option<Vec<usize>>)> {
    let bad = |line: usize, msg: &str| Error::Format(format!("{}:{line}: {msg}", path.display()));
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or_else(|| bad(1, "missing header"))?
        .map_err(|e| csv_error(path, e))?;
    let field = |k: usize| -> Result<usize> {
        header
            .get(k)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(1, "header must be N,D,L"))
    };
    if header.len() != 3 {
        return Err(bad(1, "header must be N,D,L"));
    }
    let (n, d, l) = (field(0)?, field(1)?, field(2)?);
    if l > 1 {
        return Err(bad(1, "label flag must be 0 or 1"));
    }
    let width = d + l;
    let mut values = Vec::with_capacity(n * d);
    let mut labels = Vec::new();
    let mut rows = 0;
    for (k, rec) in records.enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = k + 2;
        if rec.len() != width {
            return Err(bad(line, &format!("expected {width} fields, found {}", rec.len())));
        }
        for s in rec.iter().take(d) {
            values.push(s.parse::<f64>().map_err(|_| bad(line, &format!("not a number: {s:?}")))?);
        }
        if l == 1 {
            let s = &rec[d];
            labels.push(s.parse::<usize>().map_err(|_| bad(line, &format!("not a label: {s:?}")))?);
        }
        rows += 1;
    }
    if rows != n {
        return Err(bad(1, &format!("header declares {n} rows, file has {rows}")));
    }
    Ok((Tensor::from_vec(n, d, values), (l == 1).then_some(labels)))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Writes a feature file; `.csv` selects the CSV layout.
pub fn write_features(path: &Path, values: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != values.rows() {
            return Err(Error::Shape(format!("{} labels for {} rows", l.len(), values.rows())));
        }
    }
    let (n, d) = values.shape();
    if is_csv(path) {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
        let row_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record([n.to_string(), d.to_string(), (labels.is_some() as u8).to_string()])
            .map_err(row_err)?;
        for i in 0..n {
            let mut rec: Vec<String> = values.row(i).iter().map(|v| format!("{v:?}")).collect();
            if let Some(l) = labels {
                rec.push(l[i].to_string());
            }
            w.write_record(&rec).map_err(row_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        return write_atomic(path, &bytes);
    }
    let mut out = Vec::with_capacity(25 + 8 * n * (d + 1));
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    out.push(labels.is_some() as u8);
    for v in values.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in labels.unwrap_or(&[]) {
        out.extend_from_slice(&(l as u64).to_le_bytes());
    }
    write_atomic(path, &out)
}

// ---- synthetic tree data ------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMap {
    #[default]
    Identity,
    /// Gaussian `obs_dim × D` matrix scaled by `1/√D`.
    RandomLinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTreeSpec {
    pub depth: usize,
    pub latent_dim: usize,
    /// Minimum distance between any two leaf means.
    pub separation: f64,
    pub per_leaf: usize,
    pub observation: ObservationMap,
    /// Output width of `random_linear`; ignored by `identity`.
    pub obs_dim: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticTreeSpec {
    fn default() -> Self {
        Self {
            depth: 3,
            latent_dim: 2,
            separation: 8.0,
            per_leaf: 500,
            observation: ObservationMap::Identity,
            obs_dim: 16,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticTreeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.latent_dim == 0 || self.per_leaf == 0 {
            return Err(Error::Config("synthetic depth, latent_dim and per_leaf must be ≥ 1".into()));
        }
        if !(self.separation > 0.0) || !(self.noise_std > 0.0) {
            return Err(Error::Config("synthetic separation and noise_std must be positive".into()));
        }
        if self.observation == ObservationMap::RandomLinear && self.obs_dim == 0 {
            return Err(Error::Config("random_linear needs obs_dim ≥ 1".into()));
        }
        Ok(())
    }

    /// Leaf means by recursive offsetting. The split at level `l` moves the
    /// children `± separation · 2^(depth−l) / 2` along axis `(l−1) mod D`,
    /// so sibling leaves sit exactly `separation` apart and every deeper
    /// offset on an axis is smaller than the one above it.
    pub fn leaf_means(&self) -> Tensor {
        let k = taxonomy::leaf_count(self.depth);
        let mut means = Tensor::zeros(k, self.latent_dim);
        for leaf in 0..k {
            for level in 1..=self.depth {
                let bit = (leaf >> (self.depth - level)) & 1;
                let axis = (level - 1) % self.latent_dim;
                let step = self.separation * (1u64 << (self.depth - level)) as f64 / 2.0;
                let sign = if bit == 0 { -1.0 } else { 1.0 };
                let v = means.get(leaf, axis) + sign * step;
                means.set(leaf, axis, v);
            }
        }
        means
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub tree: TaxonomyTree,
    /// Leaf index (0-based, left to right) per sample; also `dataset.labels`.
    pub labels: Vec<usize>,
    /// Observation matrix `obs_dim × D` for `random_linear`.
    pub projection: Option<Tensor>,
}

/// Samples `per_leaf` points per leaf, grouped leaf by leaf.
pub fn generate_synthetic(spec: &SyntheticTreeSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let d = spec.latent_dim;
    let k = taxonomy::leaf_count(spec.depth);
    let means = spec.leaf_means();
    let tree = TaxonomyTree::from_parts(
        spec.depth,
        VarianceMode::Isotropic,
        means.clone(),
        Tensor::filled(k, 1, 2.0 * spec.noise_std.ln()),
        Tensor::zeros(taxonomy::internal_count(spec.depth), 1),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let projection = match spec.observation {
        ObservationMap::Identity => None,
        ObservationMap::RandomLinear => {
            let scale = 1.0 / (d as f64).sqrt();
            let a: Vec<f64> = (0..spec.obs_dim * d)
                .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            Some(Tensor::from_vec(spec.obs_dim, d, a))
        }
    };

    let n = k * spec.per_leaf;
    let mut z = Tensor::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for leaf in 0..k {
        for s in 0..spec.per_leaf {
            let row = z.row_mut(leaf * spec.per_leaf + s);
            for (j, v) in row.iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v = means.get(leaf, j) + spec.noise_std * e;
            }
            labels.push(leaf);
        }
    }
    let x = match &projection {
        Some(a) => z.matmul(&a.transpose()),
        None => z,
    };
    let width = x.cols();
    let dataset = Dataset::new(
        x,
        [1, 1, width],
        Some(labels.clone()),
        DatasetMeta {
            source: format!("synthetic(depth={}, seed={})", spec.depth, spec.seed),
            unit_scaled: false,
            standardization: None,
        },
    )?;
    Ok(SyntheticData {
        dataset,
        tree,
        labels,
        projection,
    })
}
