use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_leaves, DEFAULT_STEP, DEFAULT_TOLERANCE};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    // a fixed random projection so every output element matters
    let proj = random(g.shape(y), seed);
    let p = g.constant(proj);
    let m = g.mul(y, p)?;
    Ok(g.sum(m))
}

fn assert_gradcheck(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let r = check_leaves(inputs, DEFAULT_STEP, f).unwrap();
    assert!(
        r.passes(DEFAULT_TOLERANCE),
        "max rel err {} at {}",
        r.max_rel_err,
        r.worst
    );
}

#[test]
fn conv2d_identity_filter_sums_diagonal() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let w = g.constant(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
    let b = g.constant(t(&[1], &[0.]));
    let y = g.conv2d(x, w, Some(b), ConvCfg::new(1, 0)).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[5.0]);
}

#[test]
fn conv2d_zero_filters_give_bias() {
    let mut g = Graph::new();
    let x = g.constant(random(&[2, 3, 5, 5], 1));
    let w = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let b = g.constant(t(&[4], &[0.5, -1.0, 2.0, 0.0]));
    let y = g.conv2d(x, w, Some(b), ConvCfg::new(1, 1)).unwrap();
    let v = g.value(y);
    for n in 0..2 {
        for f in 0..4 {
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(v.at(&[n, f, i, j]), [0.5, -1.0, 2.0, 0.0][f]);
                }
            }
        }
    }
}

#[test]
fn conv2d_strided_identity_subsamples() {
    let mut g = Graph::new();
    let xt = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
    let x = g.constant(xt.clone());
    let w = g.constant(t(&[1, 1, 1, 1], &[1.]));
    let y = g.conv2d(x, w, None, ConvCfg::new(2, 0)).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    let expect: Vec<f64> = [(0, 0), (0, 2), (2, 0), (2, 2)]
        .iter()
        .map(|&(i, j)| xt.at(&[0, 0, i, j]))
        .collect();
    assert_eq!(g.value(y).data(), &expect[..]);
}

#[test]
fn conv2d_rejects_channel_mismatch_naming_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let err = g
        .conv2d(x, w, None, ConvCfg::default())
        .unwrap_err()
        .to_string();
    assert!(
        err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"),
        "{err}"
    );
}

#[test]
fn conv2d_rejects_kernel_larger_than_padded_input() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(g.conv2d(x, w, None, ConvCfg::new(1, 0)).is_err());
    assert!(g.conv2d(x, w, None, ConvCfg::new(1, 1)).is_ok());
}

#[test]
fn max_pool_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let y = g.max_pool2d(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0., 0., 0., 1.]);

    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[1, 2, 6, 6], 3.25));
    let y = g.max_pool2d(c, 3).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 3.25));
}

#[test]
fn max_pool_ties_route_to_first_index() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 1, 2, 2], &[7., 7., 7., 7.]));
    let y = g.max_pool2d(x, 2).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1., 0., 0., 0.]);
}

#[test]
fn pool_rejects_non_divisible_extents() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 5, 4]));
    assert!(g.max_pool2d(x, 2).is_err());
    assert!(g.avg_pool2d(x, 2).is_err());
}

#[test]
fn avg_pool_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
    let y = g.avg_pool2d(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[2.5]);
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.25));

    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[2, 1, 4, 4], -1.5));
    let y = g.avg_pool2d(c, 4).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == -1.5));
}

#[test]
fn residual_examples() {
    let mut g = Graph::new();
    let xt = random(&[2, 3, 4, 4], 7);
    let x = g.constant(xt.clone());
    let zero = g.constant(Tensor::zeros(&[2, 3, 4, 4]));
    let y = g.residual_add(zero, x, None).unwrap();
    assert_eq!(g.value(y), &xt);

    let bt = random(&[2, 3, 4, 4], 8);
    let b = g.constant(bt.clone());
    let y = g.residual_add(b, zero, None).unwrap();
    assert_eq!(g.value(y), &bt);

    // channel-doubling projection stacking two identities: branch + [x; x]
    let bt = random(&[2, 6, 4, 4], 9);
    let b = g.constant(bt.clone());
    let w = g.constant(Tensor::from_fn(&[6, 3, 1, 1], |i| {
        let (f, c) = (i / 3, i % 3);
        if f % 3 == c {
            1.0
        } else {
            0.0
        }
    }));
    let y = g.residual_add(b, x, Some((w, 1))).unwrap();
    let v = g.value(y);
    for n in 0..2 {
        for f in 0..6 {
            for i in 0..4 {
                for j in 0..4 {
                    let expect = bt.at(&[n, f, i, j]) + xt.at(&[n, f % 3, i, j]);
                    assert_eq!(v.at(&[n, f, i, j]), expect);
                }
            }
        }
    }
}

#[test]
fn residual_rejects_mismatch_without_projection() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
    let b = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(g.residual_add(a, b, None).is_err());
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[5], &[0.3; 5]));
    let s = g.softmax(x, 0).unwrap();
    for &p in g.value(s).data() {
        assert_abs_diff_eq!(p, 0.2, epsilon = 1e-15);
    }
    let x = g.constant(t(&[3], &[-1., 0., 2.]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0., 0., 2.]);
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 5]));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(c), &[2, 8]);
    assert!(g.concat(&[a, b], 0).is_err());
    assert!(g.concat(&[a, b], 2).is_err());
    assert!(g.softmax(a, 2).is_err());
    assert!(g.add(a, b).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::full(&[3, 4], 0.7));
    let l = g.cross_entropy(z, &[0, 3, 2]).unwrap();
    assert_abs_diff_eq!(g.value(l).item(), 4f64.ln(), epsilon = 1e-14);

    let z = g.constant(t(&[1, 3], &[0., 200., 0.]));
    let l = g.cross_entropy(z, &[1]).unwrap();
    assert!(g.value(l).item() < 1e-80);

    assert!(g.cross_entropy(z, &[3]).is_err());
}

#[test]
fn cross_entropy_matches_scalar_oracle() {
    let zt = random(&[2, 3], 11);
    let labels = [2, 0];
    let mut g = Graph::new();
    let z = g.constant(zt.clone());
    let l = g.cross_entropy(z, &labels).unwrap();
    let mut oracle = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = (0..3).map(|k| zt.at(&[r, k])).collect();
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        oracle += -(row[y].exp() / denom).ln();
    }
    assert_abs_diff_eq!(g.value(l).item(), oracle / 2.0, epsilon = 1e-14);
}

#[test]
fn backward_simple_analytic_cases() {
    let xt = random(&[3, 4], 3);
    let mut g = Graph::new();
    let x = g.leaf(xt.clone());
    let l = g.sum(x);
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.leaf(xt.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let l = g.scale(s, 0.5);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), xt.data());
}

#[test]
fn backward_twice_is_an_error() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[2], 1.0));
    let l = g.sum(x);
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(Error::BackwardTwice)));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[2], 1.0));
    assert!(g.backward(x).is_err());
}

#[test]
fn backward_visits_each_node_once() {
    // diamond: x -> a, x -> b, (a, b) -> c -> loss
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[2], 1.0));
    let a = g.scale(x, 2.0);
    let b = g.relu(x);
    let c = g.add(a, b).unwrap();
    let l = g.sum(c);
    g.backward(l).unwrap();
    assert_eq!(g.visits(), 5);
    assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0]);
}

#[test]
fn gradcheck_conv_variants() {
    for (seed, cfg, groups_shape) in [
        (1, ConvCfg::new(1, 1), [4, 3, 3, 3]),
        (2, ConvCfg::new(2, 1), [4, 3, 3, 3]),
        (3, ConvCfg::new(1, 2).dilated(2), [4, 3, 3, 3]),
        (4, ConvCfg::new(2, 1).grouped(3), [3, 1, 3, 3]),
        (5, ConvCfg::new(1, 0), [2, 3, 1, 1]),
    ] {
        let x = random(&[2, 3, 5, 5], seed);
        let w = random(&groups_shape, seed + 100);
        let b = random(&[groups_shape[0]], seed + 200);
        assert_gradcheck(&[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), cfg)?;
            weighted_sum(g, y, seed)
        });
    }
}

#[test]
fn gradcheck_pools() {
    let x = random(&[2, 2, 6, 6], 21);
    for (kind, cfg) in [
        (
            PoolKind::Max,
            PoolCfg {
                kernel: 3,
                stride: 1,
                padding: 1,
            },
        ),
        (
            PoolKind::Avg,
            PoolCfg {
                kernel: 3,
                stride: 1,
                padding: 1,
            },
        ),
        (
            PoolKind::Max,
            PoolCfg {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
        ),
        (
            PoolKind::Avg,
            PoolCfg {
                kernel: 2,
                stride: 2,
                padding: 0,
            },
        ),
    ] {
        assert_gradcheck(&[x.clone()], |g, v| {
            let y = g.pool2d(v[0], kind, cfg)?;
            weighted_sum(g, y, 5)
        });
    }
    assert_gradcheck(&[x.clone()], |g, v| {
        let y = g.max_pool2d(v[0], 2)?;
        weighted_sum(g, y, 6)
    });
    assert_gradcheck(&[x], |g, v| {
        let y = g.global_avg_pool(v[0])?;
        weighted_sum(g, y, 7)
    });
}

#[test]
fn gradcheck_elementwise_and_structural() {
    let a = random(&[3, 4], 31);
    let b = random(&[3, 4], 32);
    assert_gradcheck(&[a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1])?;
        let m = g.mul(s, v[0])?;
        let r = g.relu(m);
        let k = g.scale(r, -1.7);
        weighted_sum(g, k, 1)
    });
    assert_gradcheck(&[a.clone(), b.clone()], |g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        let s = g.softmax(c, 1)?;
        let s0 = g.softmax(v[1], 0)?;
        let w = weighted_sum(g, s, 2)?;
        let w0 = weighted_sum(g, s0, 3)?;
        g.add(w, w0)
    });
    let w = random(&[5, 4], 33);
    let bias = random(&[5], 34);
    assert_gradcheck(&[a.clone(), w, bias], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        g.cross_entropy(y, &[4, 0, 2])
    });
    let weights = random(&[3], 35);
    assert_gradcheck(&[weights, a.clone(), b.clone()], |g, v| {
        let sm = g.softmax(v[0], 0)?;
        let m = g.mix(sm, &[Some(v[1]), None, Some(v[2])], &[3, 4])?;
        weighted_sum(g, m, 4)
    });
    assert_gradcheck(&[a], |g, v| {
        let rows = g.slice_rows(v[0], 1, 2)?;
        let r = g.select_row(v[0], 2)?;
        let w1 = weighted_sum(g, rows, 5)?;
        let w2 = weighted_sum(g, r, 6)?;
        g.add(w1, w2)
    });
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(random(&[2, 3, 6, 6], 41));
        let w = g.constant(random(&[4, 3, 3, 3], 42));
        let y = g.conv2d(x, w, None, ConvCfg::new(1, 1)).unwrap();
        let p = g
            .pool2d(
                y,
                PoolKind::Max,
                PoolCfg {
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
            )
            .unwrap();
        g.value(p).clone()
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #[test]
    fn conv_output_shape_formula(
        h in 1usize..12, k in 1usize..5, stride in 1usize..4, padding in 0usize..3
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, h, h]));
        let w = g.constant(Tensor::zeros(&[1, 1, k, k]));
        let res = g.conv2d(x, w, None, ConvCfg::new(stride, padding));
        if h + 2 * padding >= k {
            let y = res.unwrap();
            let expect = (h + 2 * padding - k) / stride + 1;
            prop_assert_eq!(g.shape(y), &[1, 1, expect, expect]);
        } else {
            prop_assert!(res.is_err());
        }
    }

    #[test]
    fn pool_output_shape_formula(p in 1usize..5, m in 1usize..5, c in 1usize..3) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, c, p * m, p * (m + 1)]));
        let y = g.max_pool2d(x, p).unwrap();
        prop_assert_eq!(g.shape(y), &[2, c, m, m + 1]);
        let y = g.avg_pool2d(x, p).unwrap();
        prop_assert_eq!(g.shape(y), &[2, c, m, m + 1]);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let mut g = Graph::new();
        let x = g.constant(random(&[4, 7], seed));
        let x = g.scale(x, scale);
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).data().chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_non_negative(seed in 0u64..1000) {
        let mut g = Graph::new();
        let z = g.constant(random(&[3, 5], seed));
        let l = g.cross_entropy(z, &[0, 4, 2]).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
    }
}
