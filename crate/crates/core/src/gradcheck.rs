//! Central finite-difference checks of reverse-mode gradients.
//!
//! These evaluate forward passes only, so they share no code path with
//! [`Graph::backward`] beyond the forward kernels themselves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ConvCfg, Graph, PoolCfg, PoolKind, Var};
use crate::bbn::{bbn_loss, BbnModel, ModelConfig};
use crate::error::Result;
use crate::nas::{MixedOp, OpInstance, OpSet};
use crate::param::{ParamId, ParamStore, Role};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Denominator floor for the relative error, so that gradients that are zero
/// up to round-off do not blow the ratio up.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Label of the worst coordinate.
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = label();
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare gradients of `f` with respect to every element of every input.
pub fn check_leaves<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            report.record(|| format!("input{k}[{i}]"), analytic[k][i], numeric);
        }
    }
    Ok(report)
}

/// Compare parameter gradients of the scalar built by `f` at the given coordinates.
pub fn check_params<F>(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    h: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    g.backward(loss)?;
    g.accumulate_param_grads(store);
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, i)| store.get(id).grad.as_ref().map_or(0.0, |g| g[i]))
        .collect();
    store.zero_grads();

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(store, &mut g)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport::default();
    for (&(id, i), &a) in coords.iter().zip(&analytic) {
        let orig = store.get(id).value.data()[i];
        store.get_mut(id).value.data_mut()[i] = orig + h;
        let up = eval(store)?;
        store.get_mut(id).value.data_mut()[i] = orig - h;
        let down = eval(store)?;
        store.get_mut(id).value.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        report.record(|| format!("{}[{i}]", store.get(id).name()), a, numeric);
    }
    Ok(report)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `Σ y ⊙ P` for a fixed random `P`, so every output element matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = uniform(g.shape(y), &mut rng);
    let p = g.constant(p);
    let m = g.mul(y, p)?;
    Ok(g.sum(m))
}

/// Finite-difference checks of every graph operator and every search-space
/// primitive (input and weight gradients, both strides), one entry each.
pub fn operator_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let h = DEFAULT_STEP;
    let s = seed;

    let a = uniform(&[3, 4], &mut rng);
    let b = uniform(&[3, 4], &mut rng);
    let ab = [a.clone(), b.clone()];
    out.push((
        "add".into(),
        check_leaves(&ab, h, |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, s)
        })?,
    ));
    out.push((
        "mul".into(),
        check_leaves(&ab, h, |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, s)
        })?,
    ));
    out.push((
        "scale".into(),
        check_leaves(&ab[..1], h, |g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y, s)
        })?,
    ));
    out.push((
        "relu".into(),
        check_leaves(&ab[..1], h, |g, v| {
            let y = g.relu(v[0]);
            project(g, y, s)
        })?,
    ));
    out.push((
        "sum".into(),
        check_leaves(&ab[..1], h, |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        })?,
    ));
    out.push((
        "concat".into(),
        check_leaves(&ab, h, |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            project(g, y, s)
        })?,
    ));
    for axis in [0, 1] {
        out.push((
            format!("softmax(axis={axis})"),
            check_leaves(&ab[..1], h, |g, v| {
                let y = g.softmax(v[0], axis)?;
                project(g, y, s)
            })?,
        ));
    }
    let w = uniform(&[5, 4], &mut rng);
    let bias = uniform(&[5], &mut rng);
    out.push((
        "linear+cross_entropy".into(),
        check_leaves(&[a.clone(), w, bias], h, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            g.cross_entropy(y, &[4, 0, 2])
        })?,
    ));
    let mw = uniform(&[3], &mut rng);
    out.push((
        "mix".into(),
        check_leaves(&[mw, a.clone(), b.clone()], h, |g, v| {
            let y = g.mix(v[0], &[Some(v[1]), None, Some(v[2])], &[3, 4])?;
            project(g, y, s)
        })?,
    ));
    out.push((
        "slice_rows+select_row".into(),
        check_leaves(&ab[..1], h, |g, v| {
            let r = g.slice_rows(v[0], 1, 2)?;
            let q = g.select_row(v[0], 2)?;
            let p1 = project(g, r, s)?;
            let p2 = project(g, q, s + 1)?;
            g.add(p1, p2)
        })?,
    ));

    let x = uniform(&[2, 3, 6, 6], &mut rng);
    for (name, cfg, wshape) in [
        ("conv2d", ConvCfg::new(1, 1), [4, 3, 3, 3]),
        ("conv2d(stride=2)", ConvCfg::new(2, 1), [4, 3, 3, 3]),
        (
            "conv2d(dilation=2)",
            ConvCfg::new(1, 2).dilated(2),
            [4, 3, 3, 3],
        ),
        (
            "conv2d(depthwise)",
            ConvCfg::new(1, 1).grouped(3),
            [3, 1, 3, 3],
        ),
        ("conv2d(1x1)", ConvCfg::new(1, 0), [2, 3, 1, 1]),
    ] {
        let cw = uniform(&wshape, &mut rng);
        let cb = uniform(&[wshape[0]], &mut rng);
        out.push((
            name.into(),
            check_leaves(&[x.clone(), cw, cb], h, |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), cfg)?;
                project(g, y, s)
            })?,
        ));
    }
    for (name, kind, stride) in [
        ("pool2d(max)", PoolKind::Max, 1),
        ("pool2d(max,stride=2)", PoolKind::Max, 2),
        ("pool2d(avg)", PoolKind::Avg, 1),
        ("pool2d(avg,stride=2)", PoolKind::Avg, 2),
    ] {
        let cfg = PoolCfg {
            kernel: 3,
            stride,
            padding: 1,
        };
        out.push((
            name.into(),
            check_leaves(&[x.clone()], h, |g, v| {
                let y = g.pool2d(v[0], kind, cfg)?;
                project(g, y, s)
            })?,
        ));
    }
    out.push((
        "max_pool2d".into(),
        check_leaves(&[x.clone()], h, |g, v| {
            let y = g.max_pool2d(v[0], 2)?;
            project(g, y, s)
        })?,
    ));
    out.push((
        "avg_pool2d".into(),
        check_leaves(&[x.clone()], h, |g, v| {
            let y = g.avg_pool2d(v[0], 2)?;
            project(g, y, s)
        })?,
    ));
    out.push((
        "global_avg_pool".into(),
        check_leaves(&[x.clone()], h, |g, v| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y, s)
        })?,
    ));
    let branch = uniform(&[2, 3, 6, 6], &mut rng);
    out.push((
        "residual_add".into(),
        check_leaves(&[branch, x.clone()], h, |g, v| {
            let y = g.residual_add(v[0], v[1], None)?;
            project(g, y, s)
        })?,
    ));
    let half = uniform(&[2, 4, 3, 3], &mut rng);
    let proj = uniform(&[4, 3, 1, 1], &mut rng);
    out.push((
        "residual_add(projection)".into(),
        check_leaves(&[half, x.clone(), proj], h, |g, v| {
            let y = g.residual_add(v[0], v[1], Some((v[2], 2)))?;
            project(g, y, s)
        })?,
    ));

    let c = 3;
    let xin = uniform(&[2, c, 6, 6], &mut rng);
    for stride in [1, 2] {
        for prim in OpSet::full().iter() {
            let mut store = ParamStore::new();
            let op = OpInstance::new(
                prim,
                c,
                stride,
                &mut store,
                "op",
                Role::BackboneWeight,
                &mut rng,
            );
            let apply = |g: &mut Graph, store: &ParamStore, x: Var| -> Result<Var> {
                match op.forward(g, store, x)? {
                    Some(y) => project(g, y, s),
                    None => {
                        let z = g.scale(x, 0.0);
                        Ok(g.sum(z))
                    }
                }
            };
            let mut report = check_leaves(&[xin.clone()], h, |g, v| apply(g, &store, v[0]))?;
            let coords: Vec<(ParamId, usize)> = op
                .params()
                .iter()
                .flat_map(|&id| (0..store.get(id).value.len()).map(move |i| (id, i)))
                .collect();
            let xc = xin.clone();
            report.merge(check_params(&mut store, &coords, h, |st, g| {
                let x = g.constant(xc.clone());
                apply(g, st, x)
            })?);
            out.push((format!("{}(stride={stride})", prim.name()), report));
        }
        let mut store = ParamStore::new();
        let mixed = MixedOp::new(
            &OpSet::full(),
            c,
            stride,
            &mut store,
            "mixed",
            Role::BackboneWeight,
            &mut rng,
        );
        let alpha = uniform(&[OpSet::full().len()], &mut rng);
        out.push((
            format!("mixed-op(stride={stride})"),
            check_leaves(&[alpha, xin.clone()], h, |g, v| {
                let y = mixed.forward(g, &store, v[1], v[0])?;
                project(g, y, s)
            })?,
        ));
    }
    Ok(out)
}

/// Check the bilateral supernet loss at `n_coords` random parameter
/// coordinates: one per role first, the rest uniform over all scalars.
pub fn supernet_check(
    config: &ModelConfig,
    size: usize,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut model = BbnModel::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let shape = [2, config.in_channels, size, size];
    let x_ins = uniform(&shape, &mut rng);
    let x_cls = uniform(&shape, &mut rng);
    let k = config.classes;
    let y_ins: Vec<usize> = (0..2).map(|_| rng.gen_range(0..k)).collect();
    let y_cls: Vec<usize> = (0..2).map(|_| rng.gen_range(0..k)).collect();
    let mu = rng.gen_range(0.1..0.9);

    let all: Vec<(ParamId, usize)> = model
        .store
        .iter()
        .flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i)))
        .collect();
    let mut coords = Vec::with_capacity(n_coords);
    for role in Role::ALL {
        let ids = model.store.ids_with_role(role);
        if coords.len() < n_coords && !ids.is_empty() {
            let id = ids[rng.gen_range(0..ids.len())];
            coords.push((id, rng.gen_range(0..model.store.get(id).value.len())));
        }
    }
    while coords.len() < n_coords {
        coords.push(all[rng.gen_range(0..all.len())]);
    }

    let template = model.clone();
    check_params(&mut model.store, &coords, DEFAULT_STEP, |store, g| {
        let out = template.forward_with(store, g, &x_ins, &x_cls, mu)?;
        bbn_loss(g, &out, &y_ins, &y_cls, mu)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of sum(relu(x)) through a deliberately mismatched function:
        // forward differs between the two calls, so the check must fail.
        let calls = std::cell::Cell::new(0);
        let x = Tensor::new(vec![3], vec![0.5, -0.3, 1.2]).unwrap();
        let report = check_leaves(&[x], DEFAULT_STEP, |g, v| {
            calls.set(calls.get() + 1);
            let k = if calls.get() == 1 { 2.0 } else { 1.0 };
            let s = g.scale(v[0], k);
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(!report.passes(DEFAULT_TOLERANCE));
    }

    #[test]
    fn operator_suite_passes() {
        let suite = operator_suite(3).unwrap();
        assert!(suite.len() > 40);
        for (name, r) in &suite {
            assert!(r.checked > 0, "{name}");
            assert!(
                r.passes(DEFAULT_TOLERANCE),
                "{name}: {} at {}",
                r.max_rel_err,
                r.worst
            );
        }
    }

    #[test]
    fn supernet_check_covers_requested_coordinates() {
        let config = ModelConfig {
            in_channels: 1,
            classes: 3,
            width: 2,
            layers: 2,
            n_nodes: 4,
            op_set: OpSet::desk(),
            reduction_width_mult: 1,
        };
        let r = supernet_check(&config, 4, 8, 5).unwrap();
        assert_eq!(r.checked, 8);
        assert!(r.passes(DEFAULT_TOLERANCE), "{r:?}");
    }
}
