//! Discretising architecture logits into a genotype, and its text formats.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::cell::{edge_index, n_edges};
use super::ops::{OpSet, Primitive};

/// The two retained incoming edges of one internal node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(
    from = "(usize, String, usize, String)",
    into = "(usize, String, usize, String)"
)]
pub struct NodeGene {
    pub inputs: [(usize, String); 2],
}

impl From<(usize, String, usize, String)> for NodeGene {
    fn from((a, oa, b, ob): (usize, String, usize, String)) -> Self {
        Self {
            inputs: [(a, oa), (b, ob)],
        }
    }
}

impl From<NodeGene> for (usize, String, usize, String) {
    fn from(g: NodeGene) -> Self {
        let [(a, oa), (b, ob)] = g.inputs;
        (a, oa, b, ob)
    }
}

/// Per internal node, the chosen sources and ops. Nodes 0 and 1 are the cell
/// inputs; internal node `j` is node `j + 2`. The cell output concatenates
/// every internal node.
pub type CellGenotype = Vec<NodeGene>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub normal: CellGenotype,
    pub reduce: CellGenotype,
    pub ins_head: CellGenotype,
    pub cls_head: CellGenotype,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Dot,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ExportFormat::Json),
            "dot" => Ok(ExportFormat::Dot),
            _ => Err(Error::invalid(
                "ExportFormat",
                format!("unknown format {s:?} (expected json or dot)"),
            )),
        }
    }
}

/// Discretise one cell's `[n_edges, |O|]` logits.
///
/// For each internal node, every incoming edge is scored by its strongest
/// non-zero operation weight (after softmax); the two best edges are kept
/// (ties to the lower edge index) and each keeps its argmax non-zero op
/// (ties to the lower op index). Kept edges are listed by source index.
pub fn derive_cell(alphas: &Tensor, op_set: &OpSet, n_internal: usize) -> Result<CellGenotype> {
    let k = op_set.len();
    if alphas.shape() != [n_edges(n_internal), k] {
        return Err(Error::shape(
            "derive_genotype",
            alphas.shape(),
            &[n_edges(n_internal), k],
        ));
    }
    if alphas.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "derive_genotype",
            "non-finite architecture logits",
        ));
    }
    let zero = op_set.index_of(Primitive::Zero);
    if zero.is_some() && k == 1 {
        return Err(Error::invalid(
            "derive_genotype",
            "op set has only the zero primitive",
        ));
    }
    let mut nodes = Vec::with_capacity(n_internal);
    for j in 0..n_internal {
        // (score, src, op)
        let mut cands: Vec<(f64, usize, usize)> = (0..j + 2)
            .map(|src| {
                let row = &alphas.data()[edge_index(j, src) * k..][..k];
                let probs = softmax(row);
                let mut best: Option<(f64, usize)> = None;
                for (o, &p) in probs.iter().enumerate() {
                    if Some(o) == zero {
                        continue;
                    }
                    if best.is_none_or(|(bp, _)| p > bp) {
                        best = Some((p, o));
                    }
                }
                let (p, o) = best.expect("at least one non-zero op");
                (p, src, o)
            })
            .collect();
        // stable sort keeps lower source first on equal scores
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut kept = [cands[0], cands[1]];
        kept.sort_by_key(|c| c.1);
        let name = |o: usize| op_set.get(o).name().to_string();
        nodes.push(NodeGene {
            inputs: [(kept[0].1, name(kept[0].2)), (kept[1].1, name(kept[1].2))],
        });
    }
    Ok(nodes)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl Genotype {
    pub fn cells(&self) -> [(&'static str, &CellGenotype); 4] {
        [
            ("normal", &self.normal),
            ("reduce", &self.reduce),
            ("ins_head", &self.ins_head),
            ("cls_head", &self.cls_head),
        ]
    }

    pub fn validate(&self, op_set: &OpSet) -> Result<()> {
        for (cell, nodes) in self.cells() {
            for (j, node) in nodes.iter().enumerate() {
                for (src, op) in &node.inputs {
                    if *src >= j + 2 {
                        return Err(Error::invalid(
                            "Genotype",
                            format!("{cell} node {}: source {src} is not an earlier node", j + 2),
                        ));
                    }
                    match op_set.index_of_name(op) {
                        None => {
                            return Err(Error::invalid(
                                "Genotype",
                                format!("{cell}: op {op:?} not in op set"),
                            ))
                        }
                        Some(i) if op_set.get(i) == Primitive::Zero => {
                            return Err(Error::invalid(
                                "Genotype",
                                format!("{cell}: zero op selected"),
                            ))
                        }
                        Some(_) => {}
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("genotype serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Graphviz rendering: one cluster per cell type, one node per cell node,
    /// one labelled edge per selected op, and dashed edges into the output.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph genotype {\n  rankdir=LR;\n  node [shape=box];\n");
        for (cell, nodes) in self.cells() {
            let n_internal = nodes.len();
            let _ = writeln!(s, "  subgraph cluster_{cell} {{\n    label=\"{cell}\";");
            let _ = writeln!(s, "    {cell}_in0 [label=\"c_{{k-2}}\"];");
            let _ = writeln!(s, "    {cell}_in1 [label=\"c_{{k-1}}\"];");
            for j in 0..n_internal {
                let _ = writeln!(s, "    {cell}_n{j} [label=\"{j}\"];");
            }
            let _ = writeln!(s, "    {cell}_out [label=\"c_{{k}}\"];");
            let node_id = |src: usize| match src {
                0 => format!("{cell}_in0"),
                1 => format!("{cell}_in1"),
                i => format!("{cell}_n{}", i - 2),
            };
            for (j, node) in nodes.iter().enumerate() {
                for (src, op) in &node.inputs {
                    let _ = writeln!(s, "    {} -> {cell}_n{j} [label=\"{op}\"];", node_id(*src));
                }
            }
            for j in 0..n_internal {
                let _ = writeln!(s, "    {cell}_n{j} -> {cell}_out [style=dashed];");
            }
            s.push_str("  }\n");
        }
        s.push_str("}\n");
        s
    }

    pub fn export(&self, format: ExportFormat) -> String {
        match format {
            ExportFormat::Json => {
                let mut s = self.to_json();
                s.push('\n');
                s
            }
            ExportFormat::Dot => self.to_dot(),
        }
    }
}
