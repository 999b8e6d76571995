//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep that
//! visits each reachable node once.

mod kernels;

use std::collections::HashMap;

use kernels::ConvDims;
pub use kernels::{ConvCfg, PoolCfg, PoolKind};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{axis_split, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        cfg: ConvCfg,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        cfg: PoolCfg,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Mix {
        weights: Var,
        inputs: Vec<Option<Var>>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SelectRow {
        x: Var,
        row: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-owner computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
    backward_done: bool,
    visits: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input data; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a stored parameter into the graph. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Leaf, true);
        self.params.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of nodes processed by the last backward pass.
    pub fn visits(&self) -> usize {
        self.visits
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| k * t.data()[i]);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, k), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i].max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for rank {}", base.len()),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(inputs);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for rank {}", t.rank()),
            ));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; t.len()];
        let src = t.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (src[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] /= z;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// `x [N, in] · wᵀ + b` with `w [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 2 || tw.rank() != 2 || tx.shape()[1] != tw.shape()[1] {
            return Err(Error::shape("linear", tx.shape(), tw.shape()));
        }
        let (n, fin, fout) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::shape("linear(bias)", self.shape(b), &[fout]));
            }
        }
        let mut out = vec![0.0; n * fout];
        for r in 0..n {
            let xr = &tx.data()[r * fin..(r + 1) * fin];
            for o in 0..fout {
                let wr = &tw.data()[o * fin..(o + 1) * fin];
                out[r * fout + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let tb = self.value(b).data();
            for (i, v) in out.iter_mut().enumerate() {
                *v += tb[i % fout];
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        let out = Tensor::new(vec![n, fout], out)?;
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    // ---- spatial --------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, cfg: ConvCfg) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let dims = conv_dims(tx.shape(), tw.shape(), &cfg)?;
        if let Some(b) = b {
            if self.shape(b) != [dims.f] {
                return Err(Error::shape("conv2d(bias)", self.shape(b), &[dims.f]));
            }
        }
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(&dims, &cfg, tx.data(), tw.data(), bias);
        let out = Tensor::new(vec![dims.n, dims.f, dims.ho, dims.wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b, cfg }, rg))
    }

    /// General pooling with explicit kernel, stride, and padding.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, cfg: PoolCfg) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 4 {
            return Err(Error::invalid(
                "pool2d",
                format!("expected NCHW input, got {:?}", t.shape()),
            ));
        }
        let (n, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
        let (Some(ho), Some(wo)) = (cfg.out_extent(h), cfg.out_extent(w)) else {
            return Err(Error::invalid(
                "pool2d",
                format!("{cfg:?} does not fit {h}x{w}"),
            ));
        };
        let (out, argmax) = kernels::pool_forward(kind, &cfg, n * c, h, w, ho, wo, t.data());
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::Pool {
                x,
                kind,
                cfg,
                argmax,
            },
            rg,
        ))
    }

    /// Non-overlapping `window x window` max pooling.
    pub fn max_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        self.tiled_pool(x, window, PoolKind::Max, "max_pool2d")
    }

    /// Non-overlapping `window x window` average pooling.
    pub fn avg_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        self.tiled_pool(x, window, PoolKind::Avg, "avg_pool2d")
    }

    fn tiled_pool(
        &mut self,
        x: Var,
        window: usize,
        kind: PoolKind,
        op: &'static str,
    ) -> Result<Var> {
        let s = self.shape(x);
        if window == 0 || s.len() != 4 || s[2] % window != 0 || s[3] % window != 0 {
            return Err(Error::invalid(
                op,
                format!("window {window} does not divide spatial extents of {s:?}"),
            ));
        }
        let cfg = PoolCfg {
            kernel: window,
            stride: window,
            padding: 0,
        };
        self.pool2d(x, kind, cfg)
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 4 {
            return Err(Error::invalid(
                "global_avg_pool",
                format!("expected NCHW input, got {:?}", t.shape()),
            ));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let plane = t.shape()[2] * t.shape()[3];
        let data = t
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// `branch + x`, or `branch + conv1x1(x, projection)` with the given stride.
    pub fn residual_add(
        &mut self,
        branch: Var,
        x: Var,
        projection: Option<(Var, usize)>,
    ) -> Result<Var> {
        match projection {
            None => {
                if self.shape(branch) != self.shape(x) {
                    return Err(Error::shape(
                        "residual_add",
                        self.shape(branch),
                        self.shape(x),
                    ));
                }
                self.add(branch, x)
            }
            Some((w, stride)) => {
                let ws = self.shape(w);
                if ws.len() != 4 || ws[2] != 1 || ws[3] != 1 {
                    return Err(Error::invalid(
                        "residual_add",
                        format!("projection must be 1x1, got {ws:?}"),
                    ));
                }
                let proj = self.conv2d(x, w, None, ConvCfg::new(stride, 0))?;
                if self.shape(branch) != self.shape(proj) {
                    return Err(Error::shape(
                        "residual_add",
                        self.shape(branch),
                        self.shape(proj),
                    ));
                }
                self.add(branch, proj)
            }
        }
    }

    // ---- structural -----------------------------------------------------

    /// `Σ_k weights[k] · inputs[k]`; `None` entries are structurally zero.
    pub fn mix(&mut self, weights: Var, inputs: &[Option<Var>], shape: &[usize]) -> Result<Var> {
        let tw = self.value(weights);
        if tw.shape() != [inputs.len()] {
            return Err(Error::shape("mix", tw.shape(), &[inputs.len()]));
        }
        let mut out = vec![0.0; shape.iter().product()];
        for (k, inp) in inputs.iter().enumerate() {
            let Some(v) = inp else { continue };
            let t = self.value(*v);
            if t.shape() != shape {
                return Err(Error::shape("mix", t.shape(), shape));
            }
            let wk = tw.data()[k];
            for (o, x) in out.iter_mut().zip(t.data()) {
                *o += wk * x;
            }
        }
        let mut deps = vec![weights];
        deps.extend(inputs.iter().flatten());
        let rg = self.rg(&deps);
        let out = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(
            out,
            Op::Mix {
                weights,
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Rows `[start, start + len)` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 || start + len > t.shape()[0] {
            return Err(Error::invalid(
                "slice_rows",
                format!("rows {start}..{} of {:?}", start + len, t.shape()),
            ));
        }
        let out = t.slice_rows(start, len);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// Row `row` of a matrix, as a vector.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || row >= t.shape()[0] {
            return Err(Error::invalid(
                "select_row",
                format!("row {row} of {:?}", t.shape()),
            ));
        }
        let k = t.shape()[1];
        let out = Tensor::new(vec![k], t.data()[row * k..(row + 1) * k].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SelectRow { x, row }, rg))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::shape("cross_entropy", t.shape(), &[labels.len()]));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {bad} outside [0, {c})"),
            ));
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for r in 0..n {
            let row = &t.data()[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[labels[r]];
            for k in 0..c {
                probs[r * c + k] = (row[k] - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- reverse sweep --------------------------------------------------

    /// Populate gradients of `loss` with respect to every reachable node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.visits = 0;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.visits += 1;
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Add parameter gradients from the last backward pass into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(id, v) in &self.param_order {
            if let Some(g) = self.grad(v) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(acc) = slot(grads, nodes, v) {
                        add_into(acc, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(acc) = slot(grads, nodes, *a) {
                    for ((o, gi), y) in acc.iter_mut().zip(g).zip(vb) {
                        *o += gi * y;
                    }
                }
                if let Some(acc) = slot(grads, nodes, *b) {
                    for ((o, gi), x) in acc.iter_mut().zip(g).zip(va) {
                        *o += gi * x;
                    }
                }
            }
            Op::Scale(x, k) => {
                if let Some(acc) = slot(grads, nodes, *x) {
                    for (o, gi) in acc.iter_mut().zip(g) {
                        *o += k * gi;
                    }
                }
            }
            Op::Relu(x) => {
                let vx = nodes[x.0].value.data();
                if let Some(acc) = slot(grads, nodes, *x) {
                    for ((o, gi), xi) in acc.iter_mut().zip(g).zip(vx) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(acc) = slot(grads, nodes, *x) {
                    acc.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let mut at = 0;
                let widths: Vec<usize> = inputs
                    .iter()
                    .map(|v| nodes[v.0].value.shape()[*axis] * inner)
                    .collect();
                let row: usize = widths.iter().sum();
                for (k, &v) in inputs.iter().enumerate() {
                    let wk = widths[k];
                    if let Some(acc) = slot(grads, nodes, v) {
                        for o in 0..outer {
                            add_into(
                                &mut acc[o * wk..(o + 1) * wk],
                                &g[o * row + at..o * row + at + wk],
                            );
                        }
                    }
                    at += wk;
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                if let Some(acc) = slot(grads, nodes, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                acc[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                let (n, fin, fout) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
                if let Some(acc) = slot(grads, nodes, *x) {
                    for r in 0..n {
                        for o in 0..fout {
                            let gv = g[r * fout + o];
                            let wr = &tw.data()[o * fin..(o + 1) * fin];
                            for (a, wv) in acc[r * fin..(r + 1) * fin].iter_mut().zip(wr) {
                                *a += gv * wv;
                            }
                        }
                    }
                }
                if let Some(acc) = slot(grads, nodes, *w) {
                    for r in 0..n {
                        let xr = &tx.data()[r * fin..(r + 1) * fin];
                        for o in 0..fout {
                            let gv = g[r * fout + o];
                            for (a, xv) in acc[o * fin..(o + 1) * fin].iter_mut().zip(xr) {
                                *a += gv * xv;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(acc) = slot(grads, nodes, *b) {
                        for (i, gv) in g.iter().enumerate() {
                            acc[i % fout] += gv;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, cfg } => {
                let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                let dims = conv_dims(tx.shape(), tw.shape(), cfg).expect("validated in forward");
                if let Some(acc) = slot(grads, nodes, *x) {
                    kernels::conv2d_backward_input(&dims, cfg, tw.data(), g, acc);
                }
                if let Some(acc) = slot(grads, nodes, *w) {
                    kernels::conv2d_backward_weight(&dims, cfg, tx.data(), g, acc);
                }
                if let Some(b) = b {
                    if let Some(acc) = slot(grads, nodes, *b) {
                        kernels::conv2d_backward_bias(&dims, g, acc);
                    }
                }
            }
            Op::Pool {
                x,
                kind,
                cfg,
                argmax,
            } => {
                let s = nodes[x.0].value.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                if let Some(acc) = slot(grads, nodes, *x) {
                    match kind {
                        PoolKind::Max => {
                            for (gi, &idx) in g.iter().zip(argmax) {
                                acc[idx] += gi;
                            }
                        }
                        PoolKind::Avg => {
                            kernels::pool_backward_avg(cfg, planes, h, w, ho, wo, g, acc)
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = nodes[x.0].value.shape();
                let plane = s[2] * s[3];
                if let Some(acc) = slot(grads, nodes, *x) {
                    for (chunk, gi) in acc.chunks_mut(plane).zip(g) {
                        let share = gi / plane as f64;
                        chunk.iter_mut().for_each(|a| *a += share);
                    }
                }
            }
            Op::Mix { weights, inputs } => {
                let wv = nodes[weights.0].value.data().to_vec();
                if nodes[weights.0].requires_grad {
                    let dots: Vec<f64> = inputs
                        .iter()
                        .map(|inp| match inp {
                            Some(v) => nodes[v.0]
                                .value
                                .data()
                                .iter()
                                .zip(g)
                                .map(|(x, gi)| x * gi)
                                .sum(),
                            None => 0.0,
                        })
                        .collect();
                    let acc = slot(grads, nodes, *weights).expect("requires grad");
                    add_into(acc, &dots);
                }
                for (k, inp) in inputs.iter().enumerate() {
                    let Some(v) = inp else { continue };
                    if let Some(acc) = slot(grads, nodes, *v) {
                        for (a, gi) in acc.iter_mut().zip(g) {
                            *a += wv[k] * gi;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let row: usize = node.value.shape()[1..].iter().product();
                if let Some(acc) = slot(grads, nodes, *x) {
                    add_into(&mut acc[start * row..start * row + g.len()], g);
                }
            }
            Op::SelectRow { x, row } => {
                let k = g.len();
                if let Some(acc) = slot(grads, nodes, *x) {
                    add_into(&mut acc[row * k..(row + 1) * k], g);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                if let Some(acc) = slot(grads, nodes, *logits) {
                    let scale = g[0] / n as f64;
                    for (r, &y) in labels.iter().enumerate() {
                        for k in 0..c {
                            let onehot = if k == y { 1.0 } else { 0.0 };
                            acc[r * c + k] += scale * (probs[r * c + k] - onehot);
                        }
                    }
                }
            }
        }
    }
}

/// Gradient buffer for `v`, created on first use; `None` if `v` needs no gradient.
fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn conv_dims(xs: &[usize], ws: &[usize], cfg: &ConvCfg) -> Result<ConvDims> {
    if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::shape("conv2d", xs, ws));
    }
    if cfg.stride == 0 || cfg.dilation == 0 || cfg.groups == 0 {
        return Err(Error::invalid("conv2d", format!("{cfg:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, k) = (ws[0], ws[2]);
    if c % cfg.groups != 0 || f % cfg.groups != 0 || ws[1] * cfg.groups != c {
        return Err(Error::shape("conv2d", xs, ws));
    }
    let (Some(ho), Some(wo)) = (cfg.out_extent(h, k), cfg.out_extent(w, k)) else {
        return Err(Error::shape("conv2d", xs, ws));
    };
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        f,
        k,
        ho,
        wo,
    })
}

#[cfg(test)]
mod tests;
