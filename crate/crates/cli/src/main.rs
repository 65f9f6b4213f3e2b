//! `taxonnet`: train, assign, evaluate and inspect deep taxonomic networks.

mod export;
mod images;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use taxonnet::data::{self, Dataset, SyntheticTreeSpec, IDX_IMAGES_MAGIC};
use taxonnet::evaluation::{self, AssignmentTable, DEFAULT_PAIR_BUDGET, DEFAULT_PAIR_SEED};
use taxonnet::io::{write_atomic, write_json_atomic};
use taxonnet::taxonomy::{self, log_gaussian_pdf};
use taxonnet::trainer::{self, DataSource};
use taxonnet::{Error, Result, Tensor, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "taxonnet", version, about = "Deep taxonomic networks: tree-structured VAE clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a TOML config; flags override the file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for checkpoints and the loss log.
        #[arg(long)]
        out: Option<PathBuf>,
        /// IDX image file or feature file to train on.
        #[arg(long)]
        data: Option<PathBuf>,
        /// IDX label file matching `--data`.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Write p(c|z) at the posterior mean for every input.
    Assign {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Assignment table; `.csv` selects the CSV layout.
        #[arg(long)]
        out: PathBuf,
    },
    /// Annotate with a labeled train table, classify a test table, score it.
    Eval {
        train: PathBuf,
        test: PathBuf,
        /// Metrics report (JSON); printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Label map applied to both tables: entry `i` is the new label of class `i`.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_PAIR_BUDGET)]
        pair_budget: usize,
        #[arg(long, default_value_t = DEFAULT_PAIR_SEED)]
        seed: u64,
        /// Expected tree depth; checked against the tables.
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Export the derived node parameters as DOT or JSON.
    ExportTree {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = TreeFormat::Json)]
        format: TreeFormat,
        #[arg(long, value_enum, default_value_t = export::Ordering::Heap)]
        ordering: export::Ordering,
        /// Printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw observations from the generative model.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Pin every draw to this node instead of drawing one from the prior.
        #[arg(long)]
        node: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = DataFormat::Bin)]
        format: DataFormat,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k samples of a dataset by log p(z|c) for the given nodes.
    Prototypes {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Node indices in heap order, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        node: Vec<usize>,
        #[arg(long, default_value_t = 9)]
        k: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic tree dataset from a TOML spec.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long, value_enum, default_value_t = DataFormat::Bin)]
        format: DataFormat,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TreeFormat {
    Dot,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DataFormat {
    Bin,
    Csv,
}

impl DataFormat {
    fn file(self, dir: &Path, stem: &str) -> PathBuf {
        dir.join(match self {
            DataFormat::Bin => format!("{stem}.bin"),
            DataFormat::Csv => format!("{stem}.csv"),
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("TAXONNET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("TAXONNET_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, seed, out, data, labels, depth } => {
            cmd_train(&config, seed, out, data, labels, depth)
        }
        Command::Assign { checkpoint, data, labels, out } => cmd_assign(&checkpoint, &data, labels.as_deref(), &out),
        Command::Eval { train, test, out, labels, pair_budget, seed, depth } => {
            cmd_eval(&train, &test, out.as_deref(), labels.as_deref(), pair_budget, seed, depth)
        }
        Command::ExportTree { checkpoint, format, ordering, out } => {
            let (_, tree) = trainer::load_trained(&checkpoint)?;
            let text = match format {
                TreeFormat::Dot => export::to_dot(&tree, ordering),
                TreeFormat::Json => export::to_json(&tree, ordering)?,
            };
            emit(out.as_deref(), &text)
        }
        Command::Sample { checkpoint, n, node, seed, format, out } => cmd_sample(&checkpoint, n, node, seed, format, &out),
        Command::Prototypes { checkpoint, data, labels, node, k, out } => {
            cmd_prototypes(&checkpoint, &data, labels.as_deref(), &node, k, &out)
        }
        Command::Synth { config, seed, depth, format, out } => cmd_synth(&config, seed, depth, format, &out),
    }
}

/// Writes to `out` atomically, or to stdout.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn is_idx_images(path: &Path) -> Result<bool> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 4];
    Ok(f.read_exact(&mut head).is_ok() && u32::from_be_bytes(head) == IDX_IMAGES_MAGIC)
}

/// IDX images (with optional IDX labels) or a feature file.
fn load_dataset(path: &Path, labels: Option<&Path>) -> Result<Dataset> {
    if is_idx_images(path)? {
        return match labels {
            Some(l) => data::load_idx(path, l),
            None => data::load_idx_images(path),
        };
    }
    if labels.is_some() {
        return Err(Error::Config("--labels only applies to IDX image files".into()));
    }
    data::load_features(path, false)
}

fn cmd_train(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    data: Option<PathBuf>,
    labels: Option<PathBuf>,
    depth: Option<usize>,
) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = depth {
        cfg.depth = d;
    }
    if let Some(o) = out {
        cfg.out_dir = Some(o);
    }
    match (data, labels) {
        (Some(path), labels) => {
            cfg.data = Some(if is_idx_images(&path)? {
                DataSource::Idx { images: path, labels, limit: None }
            } else if labels.is_some() {
                return Err(Error::Config("--labels only applies to IDX image files".into()));
            } else {
                let standardize = matches!(cfg.data, Some(DataSource::Features { standardize: true, .. }));
                DataSource::Features { path, standardize }
            });
        }
        (None, Some(l)) => match &mut cfg.data {
            Some(DataSource::Idx { labels, .. }) => *labels = Some(l),
            _ => return Err(Error::Config("--labels needs IDX image data".into())),
        },
        (None, None) => {}
    }
    cfg.validate()?;
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))?;
    let source = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Config("no data: pass --data or add a [data] table".into()))?;
    let ds = trainer::load_data_source(&source)?;
    let res = trainer::train(cfg, &ds, Some(&out_dir))?;
    match res.log.last() {
        Some(r) => eprintln!("trained {} steps, final loss {:.6}, wrote {}", res.log.len(), r.terms.total, out_dir.display()),
        None => eprintln!("no steps to run, wrote {}", out_dir.display()),
    }
    Ok(())
}

fn cmd_assign(checkpoint: &Path, data: &Path, labels: Option<&Path>, out: &Path) -> Result<()> {
    let (model, tree) = trainer::load_trained(checkpoint)?;
    let ds = load_dataset(data, labels)?;
    let probs = evaluation::compute_assignments(&model, &tree, &ds.inputs)?;
    AssignmentTable::new(probs, ds.labels.clone())?.save(out)
}

/// Label map file: integers separated by commas or whitespace.
fn read_label_map(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Format(format!("{}: not a label: {s:?}", path.display())))
        })
        .collect()
}

fn remap(table: &AssignmentTable, map: &[usize]) -> Result<AssignmentTable> {
    let labels = table
        .labels()
        .ok_or_else(|| Error::Config("assignment table has no labels to remap".into()))?;
    let new = labels
        .iter()
        .map(|&l| {
            map.get(l)
                .copied()
                .ok_or_else(|| Error::Config(format!("label map has no entry for class {l}")))
        })
        .collect::<Result<Vec<_>>>()?;
    table.relabel(new)
}

fn cmd_eval(
    train: &Path,
    test: &Path,
    out: Option<&Path>,
    labels: Option<&Path>,
    pair_budget: usize,
    seed: u64,
    depth: Option<usize>,
) -> Result<()> {
    let mut train = AssignmentTable::load(train)?;
    let mut test = AssignmentTable::load(test)?;
    if let Some(p) = labels {
        let map = read_label_map(p)?;
        train = remap(&train, &map)?;
        test = remap(&test, &map)?;
    }
    if let Some(d) = depth {
        if test.node_count() != taxonomy::node_count(d) {
            return Err(Error::Shape(format!(
                "depth {d} needs {} nodes, tables have {}",
                taxonomy::node_count(d),
                test.node_count()
            )));
        }
    }
    let report = evaluation::evaluate(&train, &test, pair_budget, seed)?;
    match out {
        Some(p) => write_json_atomic(p, &report),
        None => emit(None, &serde_json::to_string_pretty(&report)?),
    }
}

fn cmd_sample(checkpoint: &Path, n: usize, node: Option<usize>, seed: u64, format: DataFormat, out: &Path) -> Result<()> {
    let (model, tree) = trainer::load_trained(checkpoint)?;
    let nodes = tree.derive_all_node_params();
    if let Some(c) = node {
        if c >= nodes.len() {
            return Err(Error::Config(format!("node {c} out of range, tree has {} nodes", nodes.len())));
        }
    }
    let prior = tree.uniform_prior();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = tree.latent_dim();
    let mut z = Tensor::zeros(n, d);
    let mut which = Vec::with_capacity(n);
    for i in 0..n {
        let (c, zi) = match node {
            Some(c) => (c, taxonomy::sample_node(&nodes[c], &mut rng)),
            None => taxonomy::sample_from_nodes(&nodes, &prior, &mut rng),
        };
        z.row_mut(i).copy_from_slice(&zi);
        which.push(c);
    }
    let x = model.decode(&z)?;
    data::write_features(&format.file(out, "latents"), &z, Some(&which))?;
    data::write_features(&format.file(out, "samples"), &x, Some(&which))?;
    let shape = model.spec().input_shape;
    if shape[1] > 1 && shape[2] > 1 {
        let rows: Vec<&[f64]> = (0..n).map(|i| x.row(i)).collect();
        images::write_grid(&out.join(images::grid_name("samples", shape)), &rows, shape)?;
    }
    eprintln!("wrote {n} samples to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct Prototype {
    node: usize,
    indices: Vec<usize>,
    log_density: Vec<f64>,
}

fn cmd_prototypes(checkpoint: &Path, data: &Path, labels: Option<&Path>, node_list: &[usize], k: usize, out: &Path) -> Result<()> {
    let (model, tree) = trainer::load_trained(checkpoint)?;
    let nodes = tree.derive_all_node_params();
    if let Some(&bad) = node_list.iter().find(|&&c| c >= nodes.len()) {
        return Err(Error::Config(format!("node {bad} out of range, tree has {} nodes", nodes.len())));
    }
    if k == 0 {
        return Err(Error::Config("--k must be positive".into()));
    }
    let ds = load_dataset(data, labels)?;
    let enc = model.encode(&ds.inputs)?;
    let mut found = Vec::new();
    for &c in node_list {
        let mut scored: Vec<(usize, f64)> = (0..ds.len())
            .map(|i| (i, log_gaussian_pdf(enc.mean.row(i), &nodes[c])))
            .collect();
        // stable: equal densities keep the lower index first
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        scored.truncate(k);
        if ds.is_image() {
            let rows: Vec<&[f64]> = scored.iter().map(|&(i, _)| ds.inputs.row(i)).collect();
            let name = images::grid_name(&format!("node{c}"), ds.input_shape);
            images::write_grid(&out.join(name), &rows, ds.input_shape)?;
        }
        found.push(Prototype {
            node: c,
            indices: scored.iter().map(|p| p.0).collect(),
            log_density: scored.iter().map(|p| p.1).collect(),
        });
    }
    write_json_atomic(&out.join("prototypes.json"), &found)
}

fn cmd_synth(config: &Path, seed: Option<u64>, depth: Option<usize>, format: DataFormat, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
    let mut spec: SyntheticTreeSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(d) = depth {
        spec.depth = d;
    }
    let syn = data::generate_synthetic(&spec)?;
    data::write_features(&format.file(out, "data"), &syn.dataset.inputs, Some(&syn.labels))?;
    syn.tree.save(&out.join("tree.json"))?;
    eprintln!("wrote {} samples to {}", syn.dataset.len(), out.display());
    Ok(())
}
