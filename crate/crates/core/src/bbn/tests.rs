use super::*;
use crate::gradcheck::{check_params, DEFAULT_STEP, DEFAULT_TOLERANCE};
use approx::assert_abs_diff_eq;
use rand::Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        classes: 3,
        width: 2,
        layers: 2,
        n_nodes: 4,
        op_set: OpSet::desk(),
        reduction_width_mult: 1,
    }
}

fn random_batch(b: usize, h: usize, classes: usize, seed: u64) -> BilateralBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [b, 1, h, h];
    BilateralBatch {
        x_ins: Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)),
        y_ins: (0..b).map(|i| i % classes).collect(),
        x_cls: Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)),
        y_cls: (0..b).map(|i| (i + 1) % classes).collect(),
    }
}

fn ce_oracle(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let rows: Vec<&[f64]> = logits.chunks(classes).collect();
    let total: f64 = rows
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - z[y]
        })
        .sum();
    total / labels.len() as f64
}

#[test]
fn reduction_layers_follow_thirds() {
    let mut c = tiny_config();
    for (layers, expect) in [
        (1, vec![0]),
        (2, vec![0, 1]),
        (4, vec![1, 2]),
        (8, vec![2, 5]),
        (20, vec![6, 13]),
    ] {
        c.layers = layers;
        assert_eq!(c.reduction_layers(), expect, "L={layers}");
    }
}

#[test]
fn config_errors_are_collected() {
    let mut c = tiny_config();
    c.classes = 1;
    c.width = 0;
    c.n_nodes = 3;
    match c.validate() {
        Err(Error::Config(errs)) => assert_eq!(errs.len(), 3),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn every_role_is_populated_and_logits_have_class_width() {
    let m = BbnModel::new(tiny_config(), 1).unwrap();
    for role in Role::ALL {
        assert!(m.store.count_with_role(role) > 0, "{role}");
    }
    let batch = random_batch(3, 6, 3, 2);
    let mut g = Graph::new();
    let out = m.forward(&mut g, &batch.x_ins, &batch.x_cls, 0.4).unwrap();
    assert_eq!(g.shape(out.mixed), &[3, 3]);
    assert_eq!(m.feature_extent(6), 2);
    let (ins, cls) = m.head_logits(&batch.x_ins).unwrap();
    assert_eq!(ins.shape(), &[3, 3]);
    assert_eq!(cls.shape(), &[3, 3]);
}

#[test]
fn same_seed_same_model() {
    let a = BbnModel::new(tiny_config(), 9).unwrap();
    let b = BbnModel::new(tiny_config(), 9).unwrap();
    let c = BbnModel::new(tiny_config(), 10).unwrap();
    let all = Role::ALL;
    assert_eq!(a.store.flatten_values(&all), b.store.flatten_values(&all));
    assert_ne!(a.store.flatten_values(&all), c.store.flatten_values(&all));
}

#[test]
fn mixed_loss_matches_hand_oracle() {
    let m = BbnModel::new(tiny_config(), 3).unwrap();
    let batch = random_batch(4, 4, 3, 4);
    let mu = 0.3;
    let mut g = Graph::new();
    let out = m.forward(&mut g, &batch.x_ins, &batch.x_cls, mu).unwrap();
    let loss = bbn_loss(&mut g, &out, &batch.y_ins, &batch.y_cls, mu).unwrap();

    // Head logits computed separately, each on its own half of the batch.
    let (ins, _) = m.head_logits(&batch.x_ins).unwrap();
    let (_, cls) = m.head_logits(&batch.x_cls).unwrap();
    let z: Vec<f64> = ins
        .data()
        .iter()
        .zip(cls.data())
        .map(|(a, b)| mu * a + (1.0 - mu) * b)
        .collect();
    let expect = mu * ce_oracle(&z, 3, &batch.y_ins) + (1.0 - mu) * ce_oracle(&z, 3, &batch.y_cls);
    assert_abs_diff_eq!(g.value(loss).item(), expect, epsilon = 1e-12);

    let mut g = Graph::new();
    let out = m.forward(&mut g, &batch.x_ins, &batch.x_cls, mu).unwrap();
    let loss = branch_sum_loss(&mut g, &out, &batch.y_ins, &batch.y_cls, mu).unwrap();
    let expect = mu * ce_oracle(ins.data(), 3, &batch.y_ins)
        + (1.0 - mu) * ce_oracle(cls.data(), 3, &batch.y_cls);
    assert_abs_diff_eq!(g.value(loss).item(), expect, epsilon = 1e-12);
}

#[test]
fn endpoint_ratios_gate_the_idle_head() {
    let mut m = BbnModel::new(tiny_config(), 5).unwrap();
    let batch = random_batch(2, 4, 3, 6);
    for (mu, idle) in [
        (1.0, [Role::HeadClsWeight, Role::ArchCls]),
        (0.0, [Role::HeadInsWeight, Role::ArchIns]),
    ] {
        m.store.zero_grads();
        let mut g = Graph::new();
        let out = m.forward(&mut g, &batch.x_ins, &batch.x_cls, mu).unwrap();
        let loss = bbn_loss(&mut g, &out, &batch.y_ins, &batch.y_cls, mu).unwrap();
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut m.store);
        for role in idle {
            for id in m.store.ids_with_role(role) {
                assert!(
                    m.store.get(id).grad.is_none(),
                    "mu={mu} {}",
                    m.store.get(id).name()
                );
            }
        }
    }
}

#[test]
fn out_of_range_ratio_is_rejected() {
    let m = BbnModel::new(tiny_config(), 5).unwrap();
    let batch = random_batch(2, 4, 3, 6);
    let mut g = Graph::new();
    assert!(m.forward(&mut g, &batch.x_ins, &batch.x_cls, 1.2).is_err());
    assert!(m.inference(&batch.x_ins, -0.1).is_err());
    let other = Tensor::zeros(&[3, 1, 4, 4]);
    assert!(m.forward(&mut g, &batch.x_ins, &other, 0.5).is_err());
}

#[test]
fn prediction_mixing_example() {
    let ins = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
    let cls = Tensor::new(vec![1, 2], vec![0.0, 4.0]).unwrap();
    // μ=0.5: z = (1, 2)
    let p = &mix_predictions(&ins, &cls, 0.5)[0];
    assert_eq!(p.class, 1);
    let e = 1.0 / (1.0 + 1f64.exp());
    assert_abs_diff_eq!(p.probs[0], e, epsilon = 1e-15);
    assert_eq!(mix_predictions(&ins, &cls, 1.0)[0].class, 0);
    let flat = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
    assert_eq!(mix_predictions(&flat, &flat, 0.5)[0].class, 0);
}

#[test]
fn model_gradients_pass_finite_differences() {
    let mut m = BbnModel::new(tiny_config(), 11).unwrap();
    let batch = random_batch(2, 4, 3, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut coords = Vec::new();
    for role in Role::ALL {
        for id in m.store.ids_with_role(role).into_iter().take(3) {
            let n = m.store.get(id).value.len();
            coords.push((id, rng.gen_range(0..n)));
        }
    }
    let model = m.clone();
    let report = check_params(&mut m.store, &coords, DEFAULT_STEP, |store, g| {
        let mut probe = model.clone();
        probe.store = store.clone();
        let out = probe.forward(g, &batch.x_ins, &batch.x_cls, 0.6)?;
        bbn_loss(g, &out, &batch.y_ins, &batch.y_cls, 0.6)
    })
    .unwrap();
    assert!(report.passes(DEFAULT_TOLERANCE), "{report:?}");
}

#[test]
fn branch_sum_gradient_is_linear_in_mu() {
    let mut m = BbnModel::new(tiny_config(), 21).unwrap();
    let batch = random_batch(3, 4, 3, 22);
    let mus = [0.0, 0.25, 0.5, 0.75, 1.0];
    let report = gradient_probe(&mut m, &batch, &mus).unwrap();
    assert!(
        report.max_linearity_residual() < 1e-10,
        "{}",
        report.max_linearity_residual()
    );
    // The backbone sees a genuinely μ-dependent gradient with distinct heads.
    assert!(report.backbone_mu_spread > 1e-6);
    // Head gradients scale with their weight.
    let half = &report.entries[2];
    for (a, b) in half.grads[&Role::HeadInsWeight]
        .iter()
        .zip(&report.g_ins[&Role::HeadInsWeight])
    {
        assert_abs_diff_eq!(*a, 0.5 * b, epsilon = 1e-12);
    }
}

#[test]
fn cloned_heads_make_backbone_gradient_mu_invariant() {
    let mut m = BbnModel::new(tiny_config(), 31).unwrap();
    m.clone_ins_head_into_cls();
    let mut batch = random_batch(3, 4, 3, 32);
    batch.x_cls = batch.x_ins.clone();
    batch.y_cls = batch.y_ins.clone();
    let report = gradient_probe(&mut m, &batch, &[0.0, 0.3, 0.7, 1.0]).unwrap();
    assert!(
        report.backbone_mu_spread < 1e-10,
        "{}",
        report.backbone_mu_spread
    );
    assert_abs_diff_eq!(report.backbone_norm_ratio, 1.0, epsilon = 1e-9);
    // With identical heads the mixed-logit form also reduces to one branch.
    for e in &report.entries {
        for (r, v) in &e.mixed_form_residual {
            if r.is_backbone() {
                assert!(*v < 1e-10, "{r} {v}");
            }
        }
    }
}
