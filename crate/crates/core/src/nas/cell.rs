use rand::Rng;

use crate::autodiff::{ConvCfg, Graph, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore, Role};

use super::ops::{he_init, MixedOp, OpSet};

/// Number of edges in a cell with `n_internal` internal nodes.
///
/// Internal node `j` (0-based) receives one edge from each of the two inputs
/// and each earlier internal node, i.e. `j + 2` edges.
pub fn n_edges(n_internal: usize) -> usize {
    (0..n_internal).map(|j| j + 2).sum()
}

/// Index of the edge from node `src` into internal node `j`.
pub fn edge_index(j: usize, src: usize) -> usize {
    debug_assert!(src < j + 2);
    n_edges(j) + src
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellSpec {
    /// Total node count: two inputs, `n_nodes - 3` internal nodes, one output.
    pub n_nodes: usize,
    pub reduction: bool,
    pub width: usize,
}

impl CellSpec {
    pub fn new(n_nodes: usize, reduction: bool, width: usize) -> Result<Self> {
        if n_nodes < 4 {
            return Err(Error::invalid(
                "CellSpec",
                format!("need at least 4 nodes, got {n_nodes}"),
            ));
        }
        if width == 0 {
            return Err(Error::invalid("CellSpec", "width must be positive"));
        }
        Ok(Self {
            n_nodes,
            reduction,
            width,
        })
    }

    pub fn n_internal(&self) -> usize {
        self.n_nodes - 3
    }

    pub fn n_edges(&self) -> usize {
        n_edges(self.n_internal())
    }

    pub fn output_channels(&self) -> usize {
        self.n_internal() * self.width
    }
}

/// A searchable cell: input preprocessing plus one mixed op per edge.
#[derive(Clone, Debug)]
pub struct Cell {
    spec: CellSpec,
    reduction_prev: bool,
    pre0: ParamId,
    pre1: ParamId,
    edges: Vec<MixedOp>,
}

impl Cell {
    /// `c_prev_prev` and `c_prev` are the channel counts of the two incoming tensors.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: CellSpec,
        c_prev_prev: usize,
        c_prev: usize,
        reduction_prev: bool,
        op_set: &OpSet,
        store: &mut ParamStore,
        prefix: &str,
        role: Role,
        rng: &mut impl Rng,
    ) -> Self {
        let w = spec.width;
        let pre0 = store.add(
            format!("{prefix}.pre0"),
            role,
            he_init(&[w, c_prev_prev, 1, 1], c_prev_prev, rng),
        );
        let pre1 = store.add(
            format!("{prefix}.pre1"),
            role,
            he_init(&[w, c_prev, 1, 1], c_prev, rng),
        );
        let mut edges = Vec::with_capacity(spec.n_edges());
        for j in 0..spec.n_internal() {
            for src in 0..j + 2 {
                let stride = if spec.reduction && src < 2 { 2 } else { 1 };
                let name = format!("{prefix}.edge{}", edge_index(j, src));
                edges.push(MixedOp::new(op_set, w, stride, store, &name, role, rng));
            }
        }
        Self {
            spec,
            reduction_prev,
            pre0,
            pre1,
            edges,
        }
    }

    pub fn spec(&self) -> &CellSpec {
        &self.spec
    }

    pub fn edges(&self) -> &[MixedOp] {
        &self.edges
    }

    /// Bring both inputs to the cell width with ReLU + 1x1 convolution; the
    /// older input is also downsampled when the previous cell was a reduction.
    pub fn preprocess(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prev_prev: Var,
        prev: Var,
    ) -> Result<(Var, Var)> {
        let stride0 = if self.reduction_prev { 2 } else { 1 };
        let r0 = g.relu(prev_prev);
        let w0 = g.param(store, self.pre0);
        let s0 = g.conv2d(r0, w0, None, ConvCfg::new(stride0, 0))?;
        let r1 = g.relu(prev);
        let w1 = g.param(store, self.pre1);
        let s1 = g.conv2d(r1, w1, None, ConvCfg::new(1, 0))?;
        Ok((s0, s1))
    }

    /// Relaxed cell DAG on preprocessed inputs. `alphas` is `[n_edges, |O|]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        s0: Var,
        s1: Var,
        alphas: Var,
    ) -> Result<Var> {
        let a_shape = g.shape(alphas).to_vec();
        if a_shape.len() != 2 || a_shape[0] != self.edges.len() {
            return Err(Error::invalid(
                "cell_forward",
                format!(
                    "alpha shape {a_shape:?} but cell has {} edges",
                    self.edges.len()
                ),
            ));
        }
        let weights = g.softmax(alphas, 1)?;
        let mut states = vec![s0, s1];
        for j in 0..self.spec.n_internal() {
            let mut node: Option<Var> = None;
            for (src, &state) in states.clone().iter().enumerate() {
                let e = edge_index(j, src);
                let w = g.select_row(weights, e)?;
                let y = self.edges[e].forward_weighted(g, store, state, w)?;
                node = Some(match node {
                    None => y,
                    Some(acc) => g.add(acc, y)?,
                });
            }
            states.push(node.expect("at least two incoming edges"));
        }
        g.concat(&states[2..], 1)
    }

    /// Preprocess then run the cell.
    pub fn forward_full(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prev_prev: Var,
        prev: Var,
        alphas: Var,
    ) -> Result<Var> {
        let (s0, s1) = self.preprocess(g, store, prev_prev, prev)?;
        self.forward(g, store, s0, s1, alphas)
    }
}
