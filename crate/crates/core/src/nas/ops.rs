use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ConvCfg, Graph, PoolCfg, PoolKind, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore, Role};
use crate::tensor::Tensor;

/// A candidate operation on a cell edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Zero,
    Skip,
    Conv3x3Relu,
    MaxPool3x3,
    AvgPool3x3,
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
}

impl Primitive {
    pub const ALL: [Primitive; 9] = [
        Primitive::Zero,
        Primitive::Skip,
        Primitive::Conv3x3Relu,
        Primitive::MaxPool3x3,
        Primitive::AvgPool3x3,
        Primitive::SepConv3x3,
        Primitive::SepConv5x5,
        Primitive::DilConv3x3,
        Primitive::DilConv5x5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Zero => "zero",
            Primitive::Skip => "skip",
            Primitive::Conv3x3Relu => "conv3x3-relu",
            Primitive::MaxPool3x3 => "maxpool3x3",
            Primitive::AvgPool3x3 => "avgpool3x3",
            Primitive::SepConv3x3 => "sepconv3x3",
            Primitive::SepConv5x5 => "sepconv5x5",
            Primitive::DilConv3x3 => "dilconv3x3",
            Primitive::DilConv5x5 => "dilconv5x5",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid("Primitive", format!("unknown primitive {s:?}")))
    }
}

/// Ordered candidate set; the position of a primitive is its α column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpSet {
    prims: Vec<Primitive>,
}

impl OpSet {
    pub fn new(prims: Vec<Primitive>) -> Result<Self> {
        if prims.is_empty() {
            return Err(Error::invalid("OpSet", "empty primitive list"));
        }
        for (i, p) in prims.iter().enumerate() {
            if prims[..i].contains(p) {
                return Err(Error::invalid("OpSet", format!("duplicate primitive {p}")));
            }
        }
        Ok(Self { prims })
    }

    /// `{zero, skip, conv3x3-relu, maxpool3x3}`: small and fast.
    pub fn desk() -> Self {
        Self {
            prims: vec![
                Primitive::Zero,
                Primitive::Skip,
                Primitive::Conv3x3Relu,
                Primitive::MaxPool3x3,
            ],
        }
    }

    /// The eight standard DARTS primitives.
    pub fn full() -> Self {
        Self {
            prims: vec![
                Primitive::Zero,
                Primitive::Skip,
                Primitive::MaxPool3x3,
                Primitive::AvgPool3x3,
                Primitive::SepConv3x3,
                Primitive::SepConv5x5,
                Primitive::DilConv3x3,
                Primitive::DilConv5x5,
            ],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Self::new(
                other
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<Vec<_>>>()?,
            ),
        }
    }

    pub fn len(&self) -> usize {
        self.prims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prims.is_empty()
    }

    pub fn get(&self, i: usize) -> Primitive {
        self.prims[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = Primitive> + '_ {
        self.prims.iter().copied()
    }

    pub fn index_of(&self, p: Primitive) -> Option<usize> {
        self.prims.iter().position(|&q| q == p)
    }

    pub fn index_of_name(&self, name: &str) -> Option<usize> {
        self.prims.iter().position(|q| q.name() == name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.prims.iter().map(|p| p.name()).collect()
    }
}

pub(crate) fn he_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// Spatial extent after an edge with the given stride (3x3, pad 1 geometry).
pub fn strided_extent(h: usize, stride: usize) -> usize {
    (h - 1) / stride + 1
}

/// One primitive instantiated with its own weights on one edge.
#[derive(Clone, Debug)]
pub struct OpInstance {
    prim: Primitive,
    stride: usize,
    params: Vec<ParamId>,
}

impl OpInstance {
    pub fn new(
        prim: Primitive,
        channels: usize,
        stride: usize,
        store: &mut ParamStore,
        prefix: &str,
        role: Role,
        rng: &mut impl Rng,
    ) -> Self {
        let c = channels;
        let mut add = |suffix: &str, shape: &[usize], fan_in: usize| {
            store.add(
                format!("{prefix}.{}.{suffix}", prim.name()),
                role,
                he_init(shape, fan_in, rng),
            )
        };
        let params = match prim {
            Primitive::Zero | Primitive::MaxPool3x3 | Primitive::AvgPool3x3 => vec![],
            Primitive::Skip if stride == 1 => vec![],
            Primitive::Skip => vec![add("proj", &[c, c, 1, 1], c)],
            Primitive::Conv3x3Relu => vec![add("w", &[c, c, 3, 3], 9 * c)],
            Primitive::SepConv3x3 | Primitive::SepConv5x5 => {
                let k = if prim == Primitive::SepConv3x3 { 3 } else { 5 };
                vec![
                    add("dw1", &[c, 1, k, k], k * k),
                    add("pw1", &[c, c, 1, 1], c),
                    add("dw2", &[c, 1, k, k], k * k),
                    add("pw2", &[c, c, 1, 1], c),
                ]
            }
            Primitive::DilConv3x3 | Primitive::DilConv5x5 => {
                let k = if prim == Primitive::DilConv3x3 { 3 } else { 5 };
                vec![add("dw", &[c, 1, k, k], k * k), add("pw", &[c, c, 1, 1], c)]
            }
        };
        Self {
            prim,
            stride,
            params,
        }
    }

    pub fn primitive(&self) -> Primitive {
        self.prim
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Apply the primitive; `None` means the output is identically zero.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Option<Var>> {
        let s = self.stride;
        let channels = g.shape(x)[1];
        let pool = PoolCfg {
            kernel: 3,
            stride: s,
            padding: 1,
        };
        let out = match self.prim {
            Primitive::Zero => return Ok(None),
            Primitive::Skip if s == 1 => x,
            Primitive::Skip => {
                let w = g.param(store, self.params[0]);
                g.conv2d(x, w, None, ConvCfg::new(s, 0))?
            }
            Primitive::Conv3x3Relu => {
                let r = g.relu(x);
                let w = g.param(store, self.params[0]);
                g.conv2d(r, w, None, ConvCfg::new(s, 1))?
            }
            Primitive::MaxPool3x3 => g.pool2d(x, PoolKind::Max, pool)?,
            Primitive::AvgPool3x3 => g.pool2d(x, PoolKind::Avg, pool)?,
            Primitive::SepConv3x3 | Primitive::SepConv5x5 => {
                let k = if self.prim == Primitive::SepConv3x3 {
                    3
                } else {
                    5
                };
                let mut h = x;
                for (i, stride) in [(0, s), (2, 1)] {
                    h = g.relu(h);
                    let dw = g.param(store, self.params[i]);
                    h = g.conv2d(h, dw, None, ConvCfg::new(stride, k / 2).grouped(channels))?;
                    let pw = g.param(store, self.params[i + 1]);
                    h = g.conv2d(h, pw, None, ConvCfg::default())?;
                }
                h
            }
            Primitive::DilConv3x3 | Primitive::DilConv5x5 => {
                let k = if self.prim == Primitive::DilConv3x3 {
                    3
                } else {
                    5
                };
                let r = g.relu(x);
                let dw = g.param(store, self.params[0]);
                let h = g.conv2d(
                    r,
                    dw,
                    None,
                    ConvCfg::new(s, k - 1).dilated(2).grouped(channels),
                )?;
                let pw = g.param(store, self.params[1]);
                g.conv2d(h, pw, None, ConvCfg::default())?
            }
        };
        Ok(Some(out))
    }
}

/// The candidate operations of one edge, sharing a stride.
#[derive(Clone, Debug)]
pub struct MixedOp {
    ops: Vec<OpInstance>,
    stride: usize,
}

impl MixedOp {
    pub fn new(
        op_set: &OpSet,
        channels: usize,
        stride: usize,
        store: &mut ParamStore,
        prefix: &str,
        role: Role,
        rng: &mut impl Rng,
    ) -> Self {
        let ops = op_set
            .iter()
            .map(|p| OpInstance::new(p, channels, stride, store, prefix, role, rng))
            .collect();
        Self { ops, stride }
    }

    pub fn ops(&self) -> &[OpInstance] {
        &self.ops
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// `Σ_o softmax(alpha)_o · o(x)` for a raw logit row `alpha`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, alpha: Var) -> Result<Var> {
        if g.shape(alpha) != [self.ops.len()] {
            return Err(Error::shape("mixed_op", g.shape(alpha), &[self.ops.len()]));
        }
        let weights = g.softmax(alpha, 0)?;
        self.forward_weighted(g, store, x, weights)
    }

    /// Mixed output given already-normalised operation weights.
    pub fn forward_weighted(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        weights: Var,
    ) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        let out_shape = [
            xs[0],
            xs[1],
            strided_extent(xs[2], self.stride),
            strided_extent(xs[3], self.stride),
        ];
        let outs = self
            .ops
            .iter()
            .map(|op| op.forward(g, store, x))
            .collect::<Result<Vec<_>>>()?;
        g.mix(weights, &outs, &out_shape)
    }
}
