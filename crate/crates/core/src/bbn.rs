//! The bilateral-branch supernet: a shared cell backbone feeding an
//! instance-sampling head and a class-sampling head whose logits are mixed
//! by the ratio μ.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvCfg, Graph, Var};
use crate::error::{Error, Result};
use crate::nas::{he_init, strided_extent};
use crate::nas::{ArchParams, Cell, CellSpec, Genotype, OpSet};
use crate::param::{ParamId, ParamStore, Role};
use crate::tensor::{l2_norm, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub classes: usize,
    /// Channel width of the stem and of the first cells.
    pub width: usize,
    /// Number of backbone cells.
    pub layers: usize,
    /// Nodes per cell, inputs and output included.
    pub n_nodes: usize,
    pub op_set: OpSet,
    /// Width multiplier applied at each reduction cell.
    pub reduction_width_mult: usize,
}

impl ModelConfig {
    pub fn n_internal(&self) -> usize {
        self.n_nodes - 3
    }

    /// Backbone cell indices that downsample.
    pub fn reduction_layers(&self) -> Vec<usize> {
        let mut r = vec![self.layers / 3, 2 * self.layers / 3];
        r.dedup();
        r.retain(|&i| i < self.layers);
        r
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.in_channels == 0 {
            errs.push("model.in_channels must be positive".to_string());
        }
        if self.classes < 2 {
            errs.push(format!(
                "model.classes must be at least 2, got {}",
                self.classes
            ));
        }
        if self.width == 0 {
            errs.push("model.width must be positive".to_string());
        }
        if self.layers == 0 {
            errs.push("model.layers must be positive".to_string());
        }
        if self.n_nodes < 4 {
            errs.push(format!(
                "model.nodes must be at least 4, got {}",
                self.n_nodes
            ));
        }
        if self.reduction_width_mult == 0 {
            errs.push("model.reduction_width_mult must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Which classification head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Ins,
    Cls,
}

#[derive(Clone, Debug)]
struct Head {
    cell: Cell,
    fc_w: ParamId,
    fc_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct BbnModel {
    config: ModelConfig,
    pub store: ParamStore,
    stem_w: ParamId,
    stem_b: ParamId,
    cells: Vec<Cell>,
    ins_head: Head,
    cls_head: Head,
    arch: ArchParams,
}

/// Outputs of a training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BbnOutput {
    pub o_ins: Option<Var>,
    pub o_cls: Option<Var>,
    /// `μ·o_ins + (1-μ)·o_cls`, the logits whose softmax is `p`.
    pub mixed: Var,
}

/// One bilateral batch: instance-sampled rows and class-balanced rows.
#[derive(Clone, Debug, PartialEq)]
pub struct BilateralBatch {
    pub x_ins: Tensor,
    pub y_ins: Vec<usize>,
    pub x_cls: Tensor,
    pub y_cls: Vec<usize>,
}

pub fn check_mu(op: &'static str, mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::invalid(
            op,
            format!("mixing ratio {mu} outside [0, 1]"),
        ));
    }
    Ok(())
}

impl BbnModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bw = Role::BackboneWeight;
        let w0 = config.width;
        let stem_w = store.add(
            "stem.w",
            bw,
            he_init(
                &[w0, config.in_channels, 3, 3],
                9 * config.in_channels,
                &mut rng,
            ),
        );
        let stem_b = store.add("stem.b", bw, Tensor::zeros(&[w0]));

        let n_internal = config.n_internal();
        let reductions = config.reduction_layers();
        let (mut c_pp, mut c_p, mut width) = (w0, w0, w0);
        let mut reduction_prev = false;
        let mut cells = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let reduction = reductions.contains(&i);
            if reduction {
                width *= config.reduction_width_mult;
            }
            let spec = CellSpec::new(config.n_nodes, reduction, width)?;
            let cell = Cell::new(
                spec,
                c_pp,
                c_p,
                reduction_prev,
                &config.op_set,
                &mut store,
                &format!("cell{i}"),
                bw,
                &mut rng,
            );
            c_pp = c_p;
            c_p = spec.output_channels();
            reduction_prev = reduction;
            cells.push(cell);
        }

        let mut head = |name: &str, role: Role, rng: &mut ChaCha8Rng| -> Result<Head> {
            let spec = CellSpec::new(config.n_nodes, false, width)?;
            let cell = Cell::new(
                spec,
                c_pp,
                c_p,
                reduction_prev,
                &config.op_set,
                &mut store,
                &format!("{name}.cell"),
                role,
                rng,
            );
            let feat = spec.output_channels();
            let fc_w = store.add(
                format!("{name}.fc.w"),
                role,
                he_init(&[config.classes, feat], feat, rng),
            );
            let fc_b = store.add(
                format!("{name}.fc.b"),
                role,
                Tensor::zeros(&[config.classes]),
            );
            Ok(Head { cell, fc_w, fc_b })
        };
        let ins_head = head("head_ins", Role::HeadInsWeight, &mut rng)?;
        let cls_head = head("head_cls", Role::HeadClsWeight, &mut rng)?;
        let arch = ArchParams::new(&mut store, n_internal, config.op_set.len(), &mut rng);

        Ok(Self {
            config,
            store,
            stem_w,
            stem_b,
            cells,
            ins_head,
            cls_head,
            arch,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> &ArchParams {
        &self.arch
    }

    pub fn genotype(&self) -> Result<Genotype> {
        self.arch
            .derive_genotype(&self.store, &self.config.op_set, self.config.n_internal())
    }

    /// Spatial extent of the backbone output for an `h x h` input.
    pub fn feature_extent(&self, h: usize) -> usize {
        self.config
            .reduction_layers()
            .iter()
            .fold(h, |e, _| strided_extent(e, 2))
    }

    /// The outputs of the last two backbone cells.
    pub fn backbone(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let w = g.param(store, self.stem_w);
        let b = g.param(store, self.stem_b);
        let stem = g.conv2d(x, w, Some(b), ConvCfg::new(1, 1))?;
        let a_normal = g.param(store, self.arch.bb_normal);
        let a_reduce = g.param(store, self.arch.bb_reduce);
        let (mut s0, mut s1) = (stem, stem);
        for cell in &self.cells {
            let alphas = if cell.spec().reduction {
                a_reduce
            } else {
                a_normal
            };
            let out = cell.forward_full(g, store, s0, s1, alphas)?;
            s0 = s1;
            s1 = out;
        }
        Ok((s0, s1))
    }

    pub fn head(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        branch: Branch,
        prev_prev: Var,
        prev: Var,
    ) -> Result<Var> {
        let (head, alpha) = match branch {
            Branch::Ins => (&self.ins_head, self.arch.ins),
            Branch::Cls => (&self.cls_head, self.arch.cls),
        };
        let a = g.param(store, alpha);
        let h = head.cell.forward_full(g, store, prev_prev, prev, a)?;
        let pooled = g.global_avg_pool(h)?;
        let w = g.param(store, head.fc_w);
        let b = g.param(store, head.fc_b);
        g.linear(pooled, w, Some(b))
    }

    /// Backbone plus one head on a single batch.
    pub fn forward_single(&self, g: &mut Graph, x: &Tensor, branch: Branch) -> Result<Var> {
        self.forward_single_with(&self.store, g, x, branch)
    }

    pub fn forward_single_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        x: &Tensor,
        branch: Branch,
    ) -> Result<Var> {
        let xv = g.constant(x.clone());
        let (pp, p) = self.backbone(store, g, xv)?;
        self.head(store, g, branch, pp, p)
    }

    /// Training forward pass: the backbone runs once on the stacked batch
    /// `(x_ins; x_cls)`, the instance head reads the first half of the rows,
    /// the class head the second half. At `μ = 1` (resp. `0`) the unused half
    /// and head contribute nothing and are not evaluated.
    pub fn forward(
        &self,
        g: &mut Graph,
        x_ins: &Tensor,
        x_cls: &Tensor,
        mu: f64,
    ) -> Result<BbnOutput> {
        self.forward_with(&self.store, g, x_ins, x_cls, mu)
    }

    /// [`Self::forward`] reading parameters from `store`, which must share
    /// this model's layout.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        x_ins: &Tensor,
        x_cls: &Tensor,
        mu: f64,
    ) -> Result<BbnOutput> {
        check_mu("forward", mu)?;
        if x_ins.shape() != x_cls.shape() {
            return Err(Error::shape("forward", x_ins.shape(), x_cls.shape()));
        }
        if mu == 1.0 {
            let o = self.forward_single_with(store, g, x_ins, Branch::Ins)?;
            return Ok(BbnOutput {
                o_ins: Some(o),
                o_cls: None,
                mixed: o,
            });
        }
        if mu == 0.0 {
            let o = self.forward_single_with(store, g, x_cls, Branch::Cls)?;
            return Ok(BbnOutput {
                o_ins: None,
                o_cls: Some(o),
                mixed: o,
            });
        }
        let b = x_ins.shape()[0];
        let xi = g.constant(x_ins.clone());
        let xc = g.constant(x_cls.clone());
        let stacked = g.concat(&[xi, xc], 0)?;
        let (pp, p) = self.backbone(store, g, stacked)?;
        let (pp_i, p_i) = (g.slice_rows(pp, 0, b)?, g.slice_rows(p, 0, b)?);
        let (pp_c, p_c) = (g.slice_rows(pp, b, b)?, g.slice_rows(p, b, b)?);
        let o_ins = self.head(store, g, Branch::Ins, pp_i, p_i)?;
        let o_cls = self.head(store, g, Branch::Cls, pp_c, p_c)?;
        let a = g.scale(o_ins, mu);
        let c = g.scale(o_cls, 1.0 - mu);
        let mixed = g.add(a, c)?;
        Ok(BbnOutput {
            o_ins: Some(o_ins),
            o_cls: Some(o_cls),
            mixed,
        })
    }

    /// Logits of both heads on the same features, without gradient tracking.
    pub fn head_logits(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (pp, p) = self.backbone(&self.store, &mut g, xv)?;
        let o_ins = self.head(&self.store, &mut g, Branch::Ins, pp, p)?;
        let o_cls = self.head(&self.store, &mut g, Branch::Cls, pp, p)?;
        Ok((g.value(o_ins).clone(), g.value(o_cls).clone()))
    }

    /// Predicted class and probability vector per row at test-time ratio `mu`.
    pub fn inference(&self, x: &Tensor, mu: f64) -> Result<Vec<Prediction>> {
        check_mu("inference", mu)?;
        let (ins, cls) = self.head_logits(x)?;
        Ok(mix_predictions(&ins, &cls, mu))
    }

    /// Copy every instance-head weight and logit into the class head.
    pub fn clone_ins_head_into_cls(&mut self) {
        let ins = self.store.ids_with_role(Role::HeadInsWeight);
        let cls = self.store.ids_with_role(Role::HeadClsWeight);
        assert_eq!(ins.len(), cls.len());
        for (a, b) in ins.into_iter().zip(cls) {
            let v = self.store.get(a).value.clone();
            assert_eq!(v.shape(), self.store.get(b).value.shape());
            self.store.get_mut(b).value = v;
        }
        let v = self.store.get(self.arch.ins).value.clone();
        self.store.get_mut(self.arch.cls).value = v;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<f64>,
}

/// `argmax softmax(μ·ins + (1-μ)·cls)` per row; ties go to the lowest class.
pub fn mix_predictions(ins: &Tensor, cls: &Tensor, mu: f64) -> Vec<Prediction> {
    let c = ins.shape()[1];
    ins.data()
        .chunks(c)
        .zip(cls.data().chunks(c))
        .map(|(a, b)| {
            let z: Vec<f64> = a
                .iter()
                .zip(b)
                .map(|(x, y)| mu * x + (1.0 - mu) * y)
                .collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let probs: Vec<f64> = e.iter().map(|v| v / s).collect();
            let mut class = 0;
            for k in 1..c {
                if z[k] > z[class] {
                    class = k;
                }
            }
            Prediction { class, probs }
        })
        .collect()
}

/// `μ·CE(p, y_ins) + (1-μ)·CE(p, y_cls)` against the mixed prediction.
pub fn bbn_loss(
    g: &mut Graph,
    out: &BbnOutput,
    y_ins: &[usize],
    y_cls: &[usize],
    mu: f64,
) -> Result<Var> {
    check_mu("bbn_loss", mu)?;
    let mut terms = Vec::with_capacity(2);
    if mu > 0.0 {
        let ce = g.cross_entropy(out.mixed, y_ins)?;
        terms.push(g.scale(ce, mu));
    }
    if mu < 1.0 {
        let ce = g.cross_entropy(out.mixed, y_cls)?;
        terms.push(g.scale(ce, 1.0 - mu));
    }
    match terms.as_slice() {
        [a] => Ok(*a),
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    }
}

/// `μ·CE(o_ins, y_ins) + (1-μ)·CE(o_cls, y_cls)`: each head scored on its own
/// logits. This is the objective whose gradient decomposes linearly in μ.
pub fn branch_sum_loss(
    g: &mut Graph,
    out: &BbnOutput,
    y_ins: &[usize],
    y_cls: &[usize],
    mu: f64,
) -> Result<Var> {
    check_mu("branch_sum_loss", mu)?;
    let mut terms = Vec::with_capacity(2);
    if let (Some(o), true) = (out.o_ins, mu > 0.0) {
        let ce = g.cross_entropy(o, y_ins)?;
        terms.push(g.scale(ce, mu));
    }
    if let (Some(o), true) = (out.o_cls, mu < 1.0) {
        let ce = g.cross_entropy(o, y_cls)?;
        terms.push(g.scale(ce, 1.0 - mu));
    }
    match terms.as_slice() {
        [a] => Ok(*a),
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossForm {
    /// Cross-entropies against the softmax of the mixed logits.
    MixedLogits,
    /// Cross-entropies of each head's own logits, mixed by μ.
    BranchSum,
}

pub type RoleGrads = BTreeMap<Role, Vec<f64>>;

/// Loss value and per-role flattened parameter gradients at one μ.
pub fn role_gradients(
    model: &mut BbnModel,
    batch: &BilateralBatch,
    mu: f64,
    form: LossForm,
) -> Result<(f64, RoleGrads)> {
    model.store.zero_grads();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &batch.x_ins, &batch.x_cls, mu)?;
    let loss = match form {
        LossForm::MixedLogits => bbn_loss(&mut g, &out, &batch.y_ins, &batch.y_cls, mu)?,
        LossForm::BranchSum => branch_sum_loss(&mut g, &out, &batch.y_ins, &batch.y_cls, mu)?,
    };
    g.backward(loss)?;
    g.accumulate_param_grads(&mut model.store);
    let grads = Role::ALL
        .iter()
        .map(|&r| (r, model.store.flatten_grads(&[r])))
        .collect();
    model.store.zero_grads();
    Ok((g.value(loss).item(), grads))
}

#[derive(Clone, Debug)]
pub struct ProbeEntry {
    pub mu: f64,
    pub loss: f64,
    pub grads: RoleGrads,
    pub norms: BTreeMap<Role, f64>,
    /// `max |g(μ) - (μ·g(1) + (1-μ)·g(0))|` per role, branch-sum objective.
    pub linearity_residual: BTreeMap<Role, f64>,
    /// Same residual for the mixed-logit training objective (reported only).
    pub mixed_form_residual: BTreeMap<Role, f64>,
    pub mixed_form_norms: BTreeMap<Role, f64>,
}

#[derive(Clone, Debug)]
pub struct GradientReport {
    pub entries: Vec<ProbeEntry>,
    pub g_ins: RoleGrads,
    pub g_cls: RoleGrads,
    /// Largest max-norm difference of the backbone gradient between any probed μ
    /// and the first one.
    pub backbone_mu_spread: f64,
    /// `max ‖g_bb(μ)‖ / min ‖g_bb(μ)‖` over the probed μ (backbone weights and logits).
    pub backbone_norm_ratio: f64,
}

impl GradientReport {
    pub fn max_linearity_residual(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.linearity_residual.values())
            .copied()
            .fold(0.0, f64::max)
    }
}

fn max_abs(v: impl Iterator<Item = f64>) -> f64 {
    v.map(f64::abs).fold(0.0, f64::max)
}

/// Measure how the gradient of every parameter group depends on μ.
pub fn gradient_probe(
    model: &mut BbnModel,
    batch: &BilateralBatch,
    mus: &[f64],
) -> Result<GradientReport> {
    for &mu in mus {
        check_mu("gradient_probe", mu)?;
    }
    let (_, g_ins) = role_gradients(model, batch, 1.0, LossForm::BranchSum)?;
    let (_, again) = role_gradients(model, batch, 1.0, LossForm::BranchSum)?;
    if again != g_ins {
        return Err(Error::NonDeterministic(
            "repeated gradient pass at mu=1 differs".into(),
        ));
    }
    let (_, g_cls) = role_gradients(model, batch, 0.0, LossForm::BranchSum)?;
    let (_, m_ins) = role_gradients(model, batch, 1.0, LossForm::MixedLogits)?;
    let (_, m_cls) = role_gradients(model, batch, 0.0, LossForm::MixedLogits)?;

    let residual = |g: &RoleGrads, a: &RoleGrads, b: &RoleGrads, mu: f64| -> BTreeMap<Role, f64> {
        Role::ALL
            .iter()
            .map(|r| {
                let res = max_abs(
                    g[r].iter()
                        .zip(&a[r])
                        .zip(&b[r])
                        .map(|((x, y), z)| x - (mu * y + (1.0 - mu) * z)),
                );
                (*r, res)
            })
            .collect()
    };
    let norms = |g: &RoleGrads| -> BTreeMap<Role, f64> {
        g.iter().map(|(r, v)| (*r, l2_norm(v))).collect()
    };

    let mut entries = Vec::with_capacity(mus.len());
    for &mu in mus {
        let (loss, grads) = role_gradients(model, batch, mu, LossForm::BranchSum)?;
        let (_, mixed) = role_gradients(model, batch, mu, LossForm::MixedLogits)?;
        entries.push(ProbeEntry {
            mu,
            loss,
            norms: norms(&grads),
            linearity_residual: residual(&grads, &g_ins, &g_cls, mu),
            mixed_form_residual: residual(&mixed, &m_ins, &m_cls, mu),
            mixed_form_norms: norms(&mixed),
            grads,
        });
    }

    let backbone = |g: &RoleGrads| -> Vec<f64> {
        let mut v = g[&Role::BackboneWeight].clone();
        v.extend_from_slice(&g[&Role::ArchBackbone]);
        v
    };
    let mut spread = 0.0_f64;
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    if let Some(first) = entries.first() {
        let base = backbone(&first.grads);
        for e in &entries {
            let bb = backbone(&e.grads);
            spread = spread.max(max_abs(bb.iter().zip(&base).map(|(a, b)| a - b)));
            let n = l2_norm(&bb);
            lo = lo.min(n);
            hi = hi.max(n);
        }
    }
    Ok(GradientReport {
        entries,
        g_ins,
        g_cls,
        backbone_mu_spread: spread,
        backbone_norm_ratio: if lo > 0.0 { hi / lo } else { f64::INFINITY },
    })
}

#[cfg(test)]
mod tests;
