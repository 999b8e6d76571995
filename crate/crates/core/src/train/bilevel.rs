//! Architecture and weight updates of the bilevel search.

use log::debug;

use super::config::ArchOrder;
use crate::autodiff::Graph;
use crate::bbn::{bbn_loss, BbnModel};
use crate::error::Result;
use crate::param::{sgd_step, ParamStore, Role, SgdConfig};
use crate::tensor::{l2_norm, Tensor};

/// A differentiable scalar objective over a parameter store.
pub trait Objective {
    /// Clear all gradients, evaluate the loss, and leave its gradients in `store`.
    fn loss_and_grad(&mut self, store: &mut ParamStore) -> Result<f64>;
}

impl<F> Objective for F
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    fn loss_and_grad(&mut self, store: &mut ParamStore) -> Result<f64> {
        self(store)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchGradient {
    pub val_loss: f64,
    /// Set when the second-order correction was dropped because
    /// `∇_{w'} L_val` vanished.
    pub correction_skipped: bool,
}

type GradSnapshot = Vec<Option<Vec<f64>>>;

fn take_grads(store: &mut ParamStore, roles: &[Role]) -> GradSnapshot {
    store
        .iter_mut()
        .map(|p| {
            if roles.contains(&p.role()) {
                p.grad.take()
            } else {
                None
            }
        })
        .collect()
}

/// Leave `∂L_val/∂α` in the gradients of the `arch` roles and clear all other
/// gradients. `First` differentiates at the current weights. `Second` follows
/// the one-step unrolled approximation
///
/// ```text
/// w' = w - ξ ∇_w L_train(w, α)
/// g  = ∇_α L_val(w', α) - ξ (∇_α L_train(w⁺, α) - ∇_α L_train(w⁻, α)) / 2ε
/// w± = w ± ε ∇_{w'} L_val(w', α),   ε = 0.01 / ‖∇_{w'} L_val(w', α)‖
/// ```
///
/// Weights are restored bit for bit before returning.
pub fn arch_gradient(
    store: &mut ParamStore,
    weights: &[Role],
    arch: &[Role],
    order: ArchOrder,
    xi: f64,
    train: &mut impl Objective,
    val: &mut impl Objective,
) -> Result<ArchGradient> {
    if order == ArchOrder::First {
        let val_loss = val.loss_and_grad(store)?;
        take_grads(store, weights);
        return Ok(ArchGradient {
            val_loss,
            correction_skipped: false,
        });
    }

    let w0 = store.flatten_values(weights);
    let result = (|| -> Result<(f64, GradSnapshot, bool)> {
        train.loss_and_grad(store)?;
        let gw = store.flatten_grads(weights);
        let w1: Vec<f64> = w0.iter().zip(&gw).map(|(w, g)| w - xi * g).collect();
        store.set_flat_values(weights, &w1);
        let val_loss = val.loss_and_grad(store)?;
        let mut d_alpha = take_grads(store, arch);
        let dw = store.flatten_grads(weights);
        let norm = l2_norm(&dw);
        if norm == 0.0 {
            debug!(
                "second-order correction skipped: zero validation gradient at the virtual weights"
            );
            store.zero_grads();
            return Ok((val_loss, d_alpha, true));
        }
        if xi != 0.0 {
            let eps = 0.01 / norm;
            let shifted = |sign: f64| -> Vec<f64> {
                w0.iter()
                    .zip(&dw)
                    .map(|(w, d)| w + sign * eps * d)
                    .collect()
            };
            store.set_flat_values(weights, &shifted(1.0));
            train.loss_and_grad(store)?;
            let plus = take_grads(store, arch);
            store.set_flat_values(weights, &shifted(-1.0));
            train.loss_and_grad(store)?;
            let minus = take_grads(store, arch);
            let k = xi / (2.0 * eps);
            for ((d, p), m) in d_alpha.iter_mut().zip(plus).zip(minus) {
                if p.is_none() && m.is_none() {
                    continue;
                }
                let n = p.as_ref().or(m.as_ref()).map_or(0, Vec::len);
                let p = p.unwrap_or_else(|| vec![0.0; n]);
                let m = m.unwrap_or_else(|| vec![0.0; n]);
                let d = d.get_or_insert_with(|| vec![0.0; n]);
                for ((d, p), m) in d.iter_mut().zip(&p).zip(&m) {
                    *d -= k * (p - m);
                }
            }
        }
        store.zero_grads();
        Ok((val_loss, d_alpha, false))
    })();
    store.set_flat_values(weights, &w0);
    let (val_loss, d_alpha, correction_skipped) = result?;
    for (p, g) in store.iter_mut().zip(d_alpha) {
        p.grad = g;
    }
    Ok(ArchGradient {
        val_loss,
        correction_skipped,
    })
}

/// Learning rates for one update, split by model component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComponentLrs {
    pub backbone: f64,
    pub heads: f64,
}

impl ComponentLrs {
    fn for_role(&self, role: Role) -> f64 {
        if role.is_backbone() {
            self.backbone
        } else {
            self.heads
        }
    }
}

fn step_roles(
    store: &mut ParamStore,
    roles: &[Role],
    lrs: ComponentLrs,
    momentum: f64,
    weight_decay: f64,
) {
    for &role in roles {
        let cfg = SgdConfig {
            lr: lrs.for_role(role),
            momentum,
            weight_decay,
        };
        sgd_step(store, &[role], cfg);
    }
}

/// A labeled bilateral minibatch already in network input form.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBatch<'a> {
    pub x_ins: &'a Tensor,
    pub y_ins: &'a [usize],
    pub x_cls: &'a Tensor,
    pub y_cls: &'a [usize],
}

/// Mixed-logit loss and gradients of `model` at `store`.
pub fn bbn_loss_grad(
    model: &BbnModel,
    store: &mut ParamStore,
    batch: &StepBatch<'_>,
    mu: f64,
) -> Result<f64> {
    store.zero_grads();
    let mut g = Graph::new();
    let out = model.forward_with(store, &mut g, batch.x_ins, batch.x_cls, mu)?;
    let loss = bbn_loss(&mut g, &out, batch.y_ins, batch.y_cls, mu)?;
    g.backward(loss)?;
    g.accumulate_param_grads(store);
    Ok(g.value(loss).item())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One SGD step on every weight parameter; architecture logits are untouched.
/// Returns the loss before the step and the backbone-weight gradient norm.
pub fn weight_step(
    model: &mut BbnModel,
    batch: &StepBatch<'_>,
    mu: f64,
    lrs: ComponentLrs,
    opt: OptimConfig,
) -> Result<(f64, f64)> {
    let mut store = std::mem::take(&mut model.store);
    let loss = bbn_loss_grad(model, &mut store, batch, mu);
    let mut norm = 0.0;
    if loss.is_ok() {
        norm = l2_norm(&store.flatten_grads(&[Role::BackboneWeight]));
        store
            .iter_mut()
            .filter(|p| p.role().is_arch())
            .for_each(|p| p.grad = None);
        step_roles(
            &mut store,
            &Role::WEIGHTS,
            lrs,
            opt.momentum,
            opt.weight_decay,
        );
    }
    store.zero_grads();
    model.store = store;
    Ok((loss?, norm))
}

/// One update of the architecture logits from a validation batch; the
/// training batch is used only by the second-order correction.
#[allow(clippy::too_many_arguments)]
pub fn arch_step(
    model: &mut BbnModel,
    val: &StepBatch<'_>,
    train: &StepBatch<'_>,
    mu: f64,
    lrs: ComponentLrs,
    opt: OptimConfig,
    order: ArchOrder,
    xi: f64,
) -> Result<ArchGradient> {
    let mut store = std::mem::take(&mut model.store);
    let shell: &BbnModel = model;
    let mut train_obj = |s: &mut ParamStore| bbn_loss_grad(shell, s, train, mu);
    let mut val_obj = |s: &mut ParamStore| bbn_loss_grad(shell, s, val, mu);
    let grad = arch_gradient(
        &mut store,
        &Role::WEIGHTS,
        &Role::ARCH,
        order,
        xi,
        &mut train_obj,
        &mut val_obj,
    );
    if grad.is_ok() {
        step_roles(&mut store, &Role::ARCH, lrs, opt.momentum, opt.weight_decay);
    }
    store.zero_grads();
    model.store = store;
    grad
}
