//! Trainable parameters, their role tags, and the momentum SGD optimizer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which component of the bilateral-branch model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    BackboneWeight,
    HeadInsWeight,
    HeadClsWeight,
    ArchBackbone,
    ArchIns,
    ArchCls,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::BackboneWeight,
        Role::HeadInsWeight,
        Role::HeadClsWeight,
        Role::ArchBackbone,
        Role::ArchIns,
        Role::ArchCls,
    ];

    pub const WEIGHTS: [Role; 3] = [
        Role::BackboneWeight,
        Role::HeadInsWeight,
        Role::HeadClsWeight,
    ];
    pub const ARCH: [Role; 3] = [Role::ArchBackbone, Role::ArchIns, Role::ArchCls];

    pub fn is_arch(self) -> bool {
        matches!(self, Role::ArchBackbone | Role::ArchIns | Role::ArchCls)
    }

    pub fn is_backbone(self) -> bool {
        matches!(self, Role::BackboneWeight | Role::ArchBackbone)
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::BackboneWeight => "backbone-weight",
            Role::HeadInsWeight => "head-ins-weight",
            Role::HeadClsWeight => "head-cls-weight",
            Role::ArchBackbone => "arch-bb",
            Role::ArchIns => "arch-ins",
            Role::ArchCls => "arch-cls",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::invalid("Role::from_str", format!("unknown role {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    role: Role,
    pub value: Tensor,
    pub momentum: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

/// Ordered collection of every trainable value in a model.
///
/// Insertion order is the canonical parameter ordering used for flattening,
/// checkpoints, and gradient reports.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: Role, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let momentum = vec![0.0; value.len()];
        self.params.push(Parameter {
            name,
            role,
            value,
            momentum,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.role == role)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn count_with_role(&self, role: Role) -> usize {
        self.params
            .iter()
            .filter(|p| p.role == role)
            .map(|p| p.value.len())
            .sum()
    }

    /// Concatenated values of all parameters with one of `roles`, in store order.
    pub fn flatten_values(&self, roles: &[Role]) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| roles.contains(&p.role)) {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Concatenated gradients; parameters without a gradient contribute zeros.
    pub fn flatten_grads(&self, roles: &[Role]) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| roles.contains(&p.role)) {
            match &p.grad {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat(0.0).take(p.value.len())),
            }
        }
        out
    }

    pub fn set_flat_values(&mut self, roles: &[Role], flat: &[f64]) {
        let mut at = 0;
        for p in self.params.iter_mut().filter(|p| roles.contains(&p.role)) {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        assert_eq!(
            at,
            flat.len(),
            "flat vector length does not match parameters"
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SgdReport {
    pub updated: usize,
    pub skipped: usize,
}

/// One momentum-SGD step over every parameter with one of `roles`.
///
/// `v <- momentum * v + grad + weight_decay * value; value <- value - lr * v`.
/// Gradients are cleared afterwards. Parameters with no gradient are left
/// untouched (momentum included) and counted as skipped.
pub fn sgd_step(store: &mut ParamStore, roles: &[Role], cfg: SgdConfig) -> SgdReport {
    let mut report = SgdReport::default();
    for p in store.params.iter_mut().filter(|p| roles.contains(&p.role)) {
        let Some(grad) = p.grad.take() else {
            report.skipped += 1;
            continue;
        };
        let value = p.value.data_mut();
        for ((v, w), g) in p.momentum.iter_mut().zip(value.iter_mut()).zip(&grad) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
            *w -= cfg.lr * *v;
        }
        report.updated += 1;
    }
    report
}

/// Gradient of a flattened role group, validated against the store layout.
pub fn check_flat_len(store: &ParamStore, roles: &[Role], flat: &[f64]) -> Result<()> {
    let n: usize = roles.iter().map(|&r| store.count_with_role(r)).sum();
    if n != flat.len() {
        return Err(Error::invalid(
            "check_flat_len",
            format!("expected {n} values, got {}", flat.len()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f64, grad: Option<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Role::BackboneWeight, Tensor::full(&[1], value));
        s.get_mut(id).grad = grad.map(|g| vec![g]);
        (s, id)
    }

    #[test]
    fn plain_step_subtracts_gradient() {
        let (mut s, id) = one(3.0, Some(0.5));
        let cfg = SgdConfig {
            lr: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let r = sgd_step(&mut s, &Role::ALL, cfg);
        assert_eq!(
            r,
            SgdReport {
                updated: 1,
                skipped: 0
            }
        );
        assert_eq!(s.get(id).value.item(), 2.5);
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn zero_grad_with_decay_shrinks() {
        let (mut s, id) = one(2.0, Some(0.0));
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.5,
        };
        sgd_step(&mut s, &Role::ALL, cfg);
        assert!((s.get(id).value.item() - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_match_recurrence() {
        let (mut s, id) = one(1.0, Some(0.2));
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
        };
        sgd_step(&mut s, &Role::ALL, cfg);
        s.get_mut(id).grad = Some(vec![-0.3]);
        sgd_step(&mut s, &Role::ALL, cfg);

        // hand-unrolled
        let (mut w, mut v) = (1.0_f64, 0.0_f64);
        for g in [0.2, -0.3] {
            v = 0.9 * v + g + 0.01 * w;
            w -= 0.1 * v;
        }
        assert_eq!(s.get(id).value.item(), w);
        assert_eq!(s.get(id).momentum[0], v);
    }

    #[test]
    fn missing_grad_is_skipped_and_counted() {
        let (mut s, id) = one(1.0, None);
        s.add("q", Role::ArchIns, Tensor::full(&[2], 1.0));
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.1,
        };
        let r = sgd_step(&mut s, &Role::ALL, cfg);
        assert_eq!(
            r,
            SgdReport {
                updated: 0,
                skipped: 2
            }
        );
        assert_eq!(s.get(id).value.item(), 1.0);
    }

    #[test]
    fn role_filter_leaves_other_roles_alone() {
        let mut s = ParamStore::new();
        let a = s.add("a", Role::BackboneWeight, Tensor::full(&[1], 1.0));
        let b = s.add("b", Role::ArchBackbone, Tensor::full(&[1], 1.0));
        s.get_mut(a).grad = Some(vec![1.0]);
        s.get_mut(b).grad = Some(vec![1.0]);
        let cfg = SgdConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut s, &Role::WEIGHTS, cfg);
        assert_eq!(s.get(a).value.item(), 0.5);
        assert_eq!(s.get(b).value.item(), 1.0);
        assert!(s.get(b).grad.is_some());
    }

    #[test]
    fn role_names_round_trip() {
        for r in Role::ALL {
            assert_eq!(r.name().parse::<Role>().unwrap(), r);
        }
    }
}
