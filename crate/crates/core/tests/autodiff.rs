use std::cell::Cell;

use pdfuse::autodiff::{grad_check, Activation, GradCheckConfig, Graph, PoolMode};
use pdfuse::{Error, ParamGroup, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], values: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, values).unwrap()
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Zero-padded cross-correlation by direct summation.
fn conv_loop(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = x.dims4();
    let [cout, _, kh, kw] = w.dims4();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at4(ni, ci, iy as usize, ix as usize) * w.at4(co, ci, ky, kx);
                            }
                        }
                    }
                    out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

#[test]
fn conv_scaling_kernel() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
    let w = g.constant(t(&[1, 1, 1, 1], &[2.0])).unwrap();
    let y = g.conv2d(x, w, None, 1, 0, 1).unwrap();
    assert_eq!(g.value(y), &Tensor::full(&[1, 1, 3, 3], 2.0));
}

#[test]
fn depthwise_conv_keeps_shape() {
    let mut g = Graph::new();
    let x = g.constant(rand(&[1, 3, 8, 8], 1)).unwrap();
    let w = g.constant(rand(&[3, 1, 5, 5], 2)).unwrap();
    let y = g.conv2d(x, w, None, 1, 2, 3).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 8, 8]);
}

#[test]
fn strided_conv_matches_loop_oracle() {
    let (x, w, b) = (rand(&[1, 3, 8, 8], 3), rand(&[4, 3, 3, 3], 4), rand(&[4], 5));
    let mut g = Graph::new();
    let (xv, wv, bv) = (
        g.constant(x.clone()).unwrap(),
        g.constant(w.clone()).unwrap(),
        g.constant(b.clone()).unwrap(),
    );
    let y = g.conv2d(xv, wv, Some(bv), 2, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 4, 4]);
    let oracle = conv_loop(&x, &w, b.data(), 2, 1);
    assert!(g.value(y).max_abs_diff(&oracle) < 1e-12);
}

#[test]
fn conv_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand(&[1, 3, 8, 8], 6)).unwrap();
    let w = g.constant(rand(&[4, 2, 3, 3], 7)).unwrap();
    assert!(matches!(g.conv2d(x, w, None, 1, 1, 1), Err(Error::Dimension(_))));
    let w = g.constant(rand(&[4, 1, 3, 3], 8)).unwrap();
    assert!(matches!(g.conv2d(x, w, None, 1, 1, 2), Err(Error::Config(_))));
    let w = g.constant(rand(&[4, 3, 9, 9], 9)).unwrap();
    assert!(matches!(g.conv2d(x, w, None, 1, 0, 1), Err(Error::Dimension(_))));
}

#[test]
fn global_pool_values() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let mx = g.global_pool(x, PoolMode::Max).unwrap();
    let av = g.global_pool(x, PoolMode::Avg).unwrap();
    assert_eq!(g.value(mx).item(), 4.0);
    assert_eq!(g.value(av).item(), 2.5);
}

#[test]
fn tied_max_routes_to_first_position() {
    let grad_of = |values: &[f64]| {
        let mut g = Graph::new();
        let x = g.variable(t(&[1, 1, 1, 2], values)).unwrap();
        let y = g.global_pool(x, PoolMode::Max).unwrap();
        let grads = g.backward(y).unwrap();
        grads.get(x).unwrap().to_vec()
    };
    assert_eq!(grad_of(&[5.0, 5.0]), vec![1.0, 0.0]);
    // A copy perturbed towards the first position has the same gradient, and
    // finite differences on it agree.
    let perturbed = [5.0 + 1e-3, 5.0];
    assert_eq!(grad_of(&perturbed), vec![1.0, 0.0]);
    let report = grad_check(
        |g, v| g.global_pool(v[0], PoolMode::Max),
        &[t(&[1, 1, 1, 2], &perturbed)],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed());
}

#[test]
fn global_pool_rejects_empty_extent_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand(&[2, 3], 10)).unwrap();
    assert!(matches!(g.global_pool(x, PoolMode::Avg), Err(Error::Dimension(_))));
}

#[test]
fn linear_examples() {
    let x = rand(&[2, 3], 11);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let eye = g
        .constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]))
        .unwrap();
    let zero_b = g.constant(Tensor::zeros(&[3])).unwrap();
    let y = g.linear(xv, eye, zero_b).unwrap();
    assert_eq!(g.value(y), &x);

    let zero_w = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(t(&[2], &[0.5, -1.5])).unwrap();
    let y = g.linear(xv, zero_w, b).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -1.5, 0.5, -1.5]);

    let xs = t(&[1, 3], &[1.0, -2.0, 0.5]);
    let w = t(&[2, 3], &[0.3, 0.1, -0.4, 2.0, 0.0, 1.0]);
    let xv = g.constant(xs).unwrap();
    let wv = g.constant(w).unwrap();
    let bv = g.constant(t(&[2], &[0.25, -0.25])).unwrap();
    let y = g.linear(xv, wv, bv).unwrap();
    let want = [0.3 - 0.2 - 0.2 + 0.25, 2.0 + 0.5 - 0.25];
    for (a, b) in g.value(y).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }

    let bad = g.constant(Tensor::zeros(&[2, 4])).unwrap();
    assert!(matches!(g.linear(xv, bad, bv), Err(Error::Dimension(_))));
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0)).unwrap();
    let s = g.activation(z, Activation::Sigmoid).unwrap();
    assert_eq!(g.value(s).item(), 0.5);

    let x = g.variable(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
    let r = g.activation(x, Activation::Relu).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let total = g.sum(r).unwrap();
    let grads = g.backward(total).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn sigmoid_gradient_at_one() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(1.0)).unwrap();
    let s = g.sigmoid(x).unwrap();
    let ad: f64 = g.backward(s).unwrap().get(x).unwrap()[0];
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let h = 1e-6;
    let fd = (sig(1.0 + h) - sig(1.0 - h)) / (2.0 * h);
    assert!((ad - 0.19661).abs() < 1e-5);
    assert!((ad - fd).abs() / fd < 1e-8);
}

#[test]
fn concat_split_examples() {
    let (a, b) = (rand(&[1, 3, 4, 4], 12), rand(&[1, 3, 4, 4], 13));
    let mut g = Graph::new();
    let (av, bv) = (g.variable(a.clone()).unwrap(), g.variable(b.clone()).unwrap());
    let cat = g.concat(&[av, bv], 1).unwrap();
    assert_eq!(g.shape(cat), &[1, 6, 4, 4]);
    let parts = g.split(cat, &[3, 3], 1).unwrap();
    assert_eq!(g.value(parts[0]), &a);
    assert_eq!(g.value(parts[1]), &b);
    let total = g.sum(cat).unwrap();
    let grads = g.backward(total).unwrap();
    assert!(grads.get(av).unwrap().iter().all(|&v| v == 1.0));
    assert!(grads.get(bv).unwrap().iter().all(|&v| v == 1.0));

    let c = g.constant(rand(&[1, 3, 5, 4], 14)).unwrap();
    assert!(matches!(g.concat(&[av, c], 1), Err(Error::Dimension(_))));
    assert!(g.split(cat, &[2, 2], 1).is_err());
}

#[test]
fn broadcast_patterns() {
    let map = rand(&[1, 3, 2, 2], 15);
    let mut g = Graph::new();
    let m = g.constant(map.clone()).unwrap();
    let wc = g.constant(t(&[1, 3, 1, 1], &[0.5, 1.0, 2.0])).unwrap();
    let y = g.mul(m, wc).unwrap();
    for c in 0..3 {
        let k = [0.5, 1.0, 2.0][c];
        for p in 0..4 {
            assert_eq!(g.value(y).data()[c * 4 + p], map.data()[c * 4 + p] * k);
        }
    }
    let ws = rand(&[1, 1, 2, 2], 16);
    let wsv = g.constant(ws.clone()).unwrap();
    let y = g.mul(m, wsv).unwrap();
    for c in 0..3 {
        for p in 0..4 {
            assert_eq!(g.value(y).data()[c * 4 + p], map.data()[c * 4 + p] * ws.data()[p]);
        }
    }
    let zero = g.constant(Tensor::zeros(&[1, 3, 2, 2])).unwrap();
    let y = g.add(m, zero).unwrap();
    assert_eq!(g.value(y), &map);

    let bad = g.constant(Tensor::zeros(&[1, 2, 2, 2])).unwrap();
    assert!(matches!(g.add(m, bad), Err(Error::Dimension(_))));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.variable(rand(&[2, 3], 17)).unwrap();
    let s = g.sum(x).unwrap();
    assert!(g.backward(s).unwrap().get(x).unwrap().iter().all(|&v| v == 1.0));

    let x = g.variable(t(&[2], &[1.0, 2.0])).unwrap();
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[2.0, 4.0]);

    assert!(matches!(g.backward(sq), Err(Error::Dimension(_))));
}

#[test]
fn backward_into_accumulates_until_zeroed() {
    let mut store = ParamStore::new();
    store.register("w", t(&[2], &[1.0, 2.0]), ParamGroup::Rest).unwrap();
    for _ in 0..2 {
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward_into(s, &mut store).unwrap();
    }
    assert_eq!(store.get("w").unwrap().grad().unwrap(), &[4.0, 8.0]);
    store.zero_grad();
    assert_eq!(store.get("w").unwrap().grad().unwrap(), &[0.0, 0.0]);
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::new();
    let big = g.constant(Tensor::full(&[2], 1e200)).unwrap();
    assert!(matches!(g.mul(big, big), Err(Error::NonFinite { .. })));
    assert!(g.constant(t(&[1], &[f64::NAN])).is_err());
}

#[test]
fn outputs_stay_finite_for_large_inputs() {
    let mut g = Graph::new();
    let x = g
        .constant(t(&[1, 4, 1, 1], &[1e3, -1e3, 999.0, 0.0]))
        .unwrap();
    for y in [
        g.sigmoid(x).unwrap(),
        g.softmax(x).unwrap(),
        g.log_softmax(x).unwrap(),
        g.relu(x).unwrap(),
    ] {
        assert!(g.value(y).is_finite());
    }
}

#[test]
fn grad_check_accepts_correct_gradients() {
    let cfg = GradCheckConfig::default();
    let sig = grad_check(
        |g, v| {
            let s = g.sigmoid(v[0])?;
            g.sum(s)
        },
        &[rand(&[3, 4], 18)],
        &cfg,
    )
    .unwrap();
    assert!(sig.passed(), "{:?}", sig.max_rel_error());
    let conv = grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 1, 1)?;
            let y = g.mul(y, y)?;
            g.sum(y)
        },
        &[rand(&[1, 2, 5, 5], 19), rand(&[3, 2, 3, 3], 20)],
        &cfg,
    )
    .unwrap();
    assert!(conv.passed(), "{:?}", conv.max_rel_error());
}

#[test]
fn grad_check_rejects_scaled_gradient() {
    let report = grad_check(
        |g, v| {
            let y = g.custom(
                v[0],
                |x| x.map(|a| a * a),
                |x, up| x.data().iter().zip(up).map(|(&a, &u)| 2.0 * a * u * 1.01).collect(),
            )?;
            g.sum(y)
        },
        &[rand(&[2, 3], 21)],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(!report.passed());
    assert!((report.max_rel_error() - 0.01 / 1.01).abs() < 1e-4);
}

#[test]
fn grad_check_detects_non_determinism() {
    let calls = Cell::new(0.0);
    let res = grad_check(
        |g, v| {
            calls.set(calls.get() + 1.0);
            let y = g.scale(v[0], calls.get())?;
            g.sum(y)
        },
        &[rand(&[2], 22)],
        &GradCheckConfig::default(),
    );
    assert!(matches!(res, Err(Error::Oracle(_))));
}

#[test]
fn grad_check_flags_kinks_instead_of_failing_on_them() {
    // Points within the stencil but off-centre from relu's kink.
    let report = grad_check(
        |g, v| {
            let y = g.relu(v[0])?;
            g.sum(y)
        },
        &[t(&[4], &[2e-7, -3e-7, 0.5, -0.5])],
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert_eq!(report.kinks(), 2);
    assert!(report.max_rel_error() < 1e-9);
    assert!(!report.passed());
}

fn materialized_mul_grads(a: &Tensor<f64>, b: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    // Expand b to a's shape explicitly, multiply, then fold the gradient back.
    let [n, c, h, w] = a.dims4();
    let bs = b.dims4();
    let idx = |ni: usize, ci: usize, y: usize, x: usize| {
        let (ni, ci, y, x) = (ni % bs[0], ci % bs[1], y % bs[2], x % bs[3]);
        ((ni * bs[1] + ci) * bs[2] + y) * bs[3] + x
    };
    let mut expanded = vec![0.0; a.numel()];
    let mut pos = 0;
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    expanded[pos] = b.data()[idx(ni, ci, y, x)];
                    pos += 1;
                }
            }
        }
    }
    let mut g = Graph::new();
    let av = g.variable(a.clone()).unwrap();
    let ev = g.variable(Tensor::new(a.shape(), expanded).unwrap()).unwrap();
    let y = g.mul(av, ev).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    let ge = grads.get(ev).unwrap();
    let mut gb = vec![0.0; b.numel()];
    let mut pos = 0;
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    gb[idx(ni, ci, y, x)] += ge[pos];
                    pos += 1;
                }
            }
        }
    }
    (grads.get(av).unwrap().to_vec(), gb)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_inverts_concat(
        sizes in prop::collection::vec(1usize..4, 1..4),
        axis in 0usize..4,
        base in prop::array::uniform4(1usize..4),
        seed in any::<u64>(),
    ) {
        let parts: Vec<Tensor<f64>> = sizes
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let mut shape = base;
                shape[axis] = s;
                rand(&shape, seed.wrapping_add(i as u64))
            })
            .collect();
        let mut g = Graph::new();
        let vars: Vec<_> = parts.iter().map(|p| g.constant(p.clone()).unwrap()).collect();
        let cat = g.concat(&vars, axis).unwrap();
        let back = g.split(cat, &sizes, axis).unwrap();
        for (v, p) in back.iter().zip(&parts) {
            prop_assert_eq!(g.value(*v), p);
        }
    }

    #[test]
    fn broadcast_gradient_equals_materialized(
        shape in prop::array::uniform4(1usize..4),
        mask in prop::array::uniform4(any::<bool>()),
        seed in any::<u64>(),
    ) {
        let mut bshape = shape;
        for d in 0..4 {
            if mask[d] {
                bshape[d] = 1;
            }
        }
        let a = rand(&shape, seed);
        let b = rand(&bshape, seed ^ 0xABCD);
        let mut g = Graph::new();
        let av = g.variable(a.clone()).unwrap();
        let bv = g.variable(b.clone()).unwrap();
        let y = g.mul(av, bv).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        let (ga, gb) = materialized_mul_grads(&a, &b);
        prop_assert_eq!(grads.get(av).unwrap(), &ga[..]);
        for (x, y) in grads.get(bv).unwrap().iter().zip(&gb) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn forward_finite_for_bounded_inputs(seed in any::<u64>(), scale in 1.0f64..1e3) {
        let x = rand(&[1, 3, 8, 8], seed).scale(scale);
        let w = rand(&[3, 1, 5, 5], seed ^ 1);
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let wv = g.constant(w).unwrap();
        let y = g.conv2d(xv, wv, None, 1, 2, 3).unwrap();
        let p = g.global_pool(y, PoolMode::Max).unwrap();
        let s = g.sigmoid(p).unwrap();
        let sm = g.softmax(y).unwrap();
        let up = g.resize_bilinear(y, 11, 5).unwrap();
        for v in [y, p, s, sm, up] {
            prop_assert!(g.value(v).is_finite());
        }
    }
}
