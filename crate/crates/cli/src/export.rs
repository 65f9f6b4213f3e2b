//! Tree export as Graphviz DOT or JSON.

use clap::ValueEnum;
use serde::Serialize;

use taxonnet::taxonomy::{self, leaves_first_order, node_depth, parent, TaxonomyTree};
use taxonnet::{Result, VarianceMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ordering {
    /// Root first, level by level.
    Heap,
    /// Deepest level first, root last.
    LeavesFirst,
}

impl Ordering {
    /// Heap index at each output position.
    fn order(self, depth: usize) -> Vec<usize> {
        match self {
            Ordering::Heap => (0..taxonomy::node_count(depth)).collect(),
            Ordering::LeavesFirst => leaves_first_order(depth),
        }
    }
}

#[derive(Serialize)]
struct NodeRecord {
    /// Position in the chosen ordering.
    index: usize,
    heap_index: usize,
    depth: usize,
    is_leaf: bool,
    parent: Option<usize>,
    /// Weight on the left child; absent for leaves.
    alpha: Option<f64>,
    mean: Vec<f64>,
    log_var: Vec<f64>,
    mean_norm: f64,
    mean_log_var: f64,
}

#[derive(Serialize)]
struct TreeExport {
    depth: usize,
    latent_dim: usize,
    variance_mode: VarianceMode,
    ordering: Ordering,
    nodes: Vec<NodeRecord>,
}

fn records(tree: &TaxonomyTree, ordering: Ordering) -> Vec<NodeRecord> {
    let depth = tree.depth();
    let nodes = tree.derive_all_node_params();
    let alphas = tree.alphas();
    ordering
        .order(depth)
        .into_iter()
        .enumerate()
        .map(|(index, h)| {
            let n = &nodes[h];
            NodeRecord {
                index,
                heap_index: h,
                depth: node_depth(h),
                is_leaf: taxonomy::is_leaf(h, depth),
                parent: parent(h),
                alpha: alphas.get(h).copied(),
                mean_norm: n.mean.iter().map(|m| m * m).sum::<f64>().sqrt(),
                mean_log_var: n.log_var.iter().sum::<f64>() / n.log_var.len() as f64,
                mean: n.mean.clone(),
                log_var: n.log_var.clone(),
            }
        })
        .collect()
}

pub fn to_json(tree: &TaxonomyTree, ordering: Ordering) -> Result<String> {
    let out = TreeExport {
        depth: tree.depth(),
        latent_dim: tree.latent_dim(),
        variance_mode: tree.mode(),
        ordering,
        nodes: records(tree, ordering),
    };
    Ok(serde_json::to_string_pretty(&out)?)
}

/// Nodes are named `n<heap index>`; the label leads with the position in
/// the chosen ordering.
pub fn to_dot(tree: &TaxonomyTree, ordering: Ordering) -> String {
    let mut s = String::from("digraph taxonomy {\n  node [shape=box, fontname=\"monospace\"];\n");
    let recs = records(tree, ordering);
    for r in &recs {
        let alpha = r.alpha.map_or(String::new(), |a| format!("\\nalpha {a:.4}"));
        s.push_str(&format!(
            "  n{} [label=\"#{} (heap {})\\ndepth {}{alpha}\\n|mean| {:.4}\\nlog var {:.4}\"];\n",
            r.heap_index, r.index, r.heap_index, r.depth, r.mean_norm, r.mean_log_var
        ));
    }
    for r in &recs {
        if let Some(p) = r.parent {
            s.push_str(&format!("  n{p} -> n{};\n", r.heap_index));
        }
    }
    s.push_str("}\n");
    s
}
