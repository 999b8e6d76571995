//! The searchable cell space: primitives, mixed edges, cells, architecture
//! logits, and genotype derivation.

mod cell;
mod genotype;
mod ops;

pub use cell::{edge_index, n_edges, Cell, CellSpec};
pub use genotype::{derive_cell, CellGenotype, ExportFormat, Genotype, NodeGene};
pub(crate) use ops::he_init;
pub use ops::{strided_extent, MixedOp, OpInstance, OpSet, Primitive};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::param::{ParamId, ParamStore, Role};
use crate::tensor::Tensor;

/// Initial scale of architecture logits.
pub const ALPHA_INIT_STD: f64 = 1e-3;

/// The four blocks of architecture logits, one per model component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchParams {
    pub bb_normal: ParamId,
    pub bb_reduce: ParamId,
    pub ins: ParamId,
    pub cls: ParamId,
}

impl ArchParams {
    pub fn new(
        store: &mut ParamStore,
        n_internal: usize,
        n_ops: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [n_edges(n_internal), n_ops];
        let normal = Normal::new(0.0, ALPHA_INIT_STD).expect("finite std");
        let mut block = |name: &str, role: Role| {
            store.add(name, role, Tensor::from_fn(&shape, |_| normal.sample(rng)))
        };
        Self {
            bb_normal: block("alpha.bb_normal", Role::ArchBackbone),
            bb_reduce: block("alpha.bb_reduce", Role::ArchBackbone),
            ins: block("alpha.ins", Role::ArchIns),
            cls: block("alpha.cls", Role::ArchCls),
        }
    }

    pub fn derive_genotype(
        &self,
        store: &ParamStore,
        op_set: &OpSet,
        n_internal: usize,
    ) -> Result<Genotype> {
        let cell = |id: ParamId| derive_cell(&store.get(id).value, op_set, n_internal);
        Ok(Genotype {
            normal: cell(self.bb_normal)?,
            reduce: cell(self.bb_reduce)?,
            ins_head: cell(self.ins)?,
            cls_head: cell(self.cls)?,
        })
    }
}
