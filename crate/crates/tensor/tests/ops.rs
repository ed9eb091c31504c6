use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reskan_tensor::{Graph, ParamStore, Tensor, TensorError, Window};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Six-nested-loop cross-correlation, kept independent of im2col.
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.dims4().unwrap();
    let [o, _, kh, kw] = k.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(vec![n, o, oh, ow]);
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.data()[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((oi * c + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out.data_mut()[((ni * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

fn pool_oracle(x: &Tensor<f64>, k: usize, stride: usize, max: bool) -> Tensor<f64> {
    let [n, c, h, w] = x.dims4().unwrap();
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Tensor::zeros(vec![n, c, oh, ow]);
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let vals: Vec<f64> = (0..k * k)
                    .map(|t| x.data()[(p * h + y * stride + t / k) * w + xx * stride + t % k])
                    .collect();
                out.data_mut()[(p * oh + y) * ow + xx] = if max {
                    vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                };
            }
        }
    }
    out
}

#[test]
fn conv2d_window_of_ones_sums_to_four() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::ones(vec![1, 1, 3, 3]));
    let k = g.input(Tensor::ones(vec![1, 1, 2, 2]));
    let y = g.conv2d(x, k, Window::new(1, 0)).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 4.0));
}

#[test]
fn conv2d_unit_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = rand_tensor(&mut rng, &[2, 1, 5, 4]);
    let mut g = Graph::<f64>::new();
    let x = g.input(t.clone());
    let k = g.input(Tensor::ones(vec![1, 1, 1, 1]));
    let y = g.conv2d(x, k, Window::default()).unwrap();
    assert_eq!(g.value(y), &t);
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xt = rand_tensor(&mut rng, &[2, 3, 8, 8]);
    let kt = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let mut g = Graph::<f64>::new();
    let x = g.input(xt.clone());
    let k = g.input(kt.clone());
    let y = g.conv2d(x, k, Window::new(2, 1)).unwrap();
    let want = conv_oracle(&xt, &kt, 2, 1);
    assert_eq!(g.value(y).shape(), &[2, 4, 4, 4]);
    assert!(g.value(y).max_rel_diff(&want, 1e-300) <= 1e-12);

    // randomized small cases
    for case in 0..40 {
        let c = rng.random_range(1..4);
        let o = rng.random_range(1..4);
        let kk = rng.random_range(1..5);
        let pad = rng.random_range(0..3);
        let stride = rng.random_range(1..4);
        let h = rng.random_range(kk.max(1)..9);
        let w = rng.random_range(kk.max(1)..9);
        let xt = rand_tensor(&mut rng, &[2, c, h, w]);
        let kt = rand_tensor(&mut rng, &[o, c, kk, kk]);
        let mut g = Graph::<f64>::new();
        let (x, k) = (g.input(xt.clone()), g.input(kt.clone()));
        let y = g.conv2d(x, k, Window::new(stride, pad)).unwrap();
        let want = conv_oracle(&xt, &kt, stride, pad);
        let err = g.value(y).max_rel_diff(&want, 1e-12);
        assert!(err <= 1e-12, "case {case}: rel err {err}");
    }
}

#[test]
fn conv2d_rejects_bad_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::ones(vec![1, 2, 3, 3]));
    let k = g.input(Tensor::ones(vec![1, 3, 2, 2]));
    let err = g.conv2d(x, k, Window::default()).unwrap_err();
    assert!(matches!(err, TensorError::Config(ref m) if m.contains("input channels")), "{err}");
    let big = g.input(Tensor::ones(vec![1, 2, 5, 5]));
    let err = g.conv2d(x, big, Window::default()).unwrap_err();
    assert!(matches!(err, TensorError::Config(ref m) if m.contains("height")), "{err}");
}

#[test]
fn silu_and_tanh_values() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(vec![3], vec![0.0, 1.0, -30.0]).unwrap());
    let s = g.silu(x);
    assert_eq!(g.value(s).data()[0], 0.0);
    assert!((g.value(s).data()[1] - 0.7310585786).abs() < 1e-10);
    let t = g.tanh(x);
    assert_eq!(g.value(t).data()[0], 0.0);
    let big = g.input(Tensor::new(vec![4], vec![-3.0, -0.5, 0.5, 3.0]).unwrap());
    let tb = g.tanh(big);
    assert!(g.value(tb).data().iter().all(|&v| v > -1.0 && v < 1.0));
}

#[test]
fn elementwise_shape_rules() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::ones(vec![2, 3]));
    let b = g.input(Tensor::ones(vec![3, 2]));
    assert!(matches!(g.add(a, b), Err(TensorError::Config(_))));
    let s = g.input(Tensor::scalar(2.0));
    let m = g.mul(a, s).unwrap();
    assert!(g.value(m).data().iter().all(|&v| v == 2.0));
}

#[test]
fn pooling_examples_and_oracle() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let m = g.max_pool2d(x, 2, Window::new(2, 0)).unwrap();
    assert_eq!(g.value(m).data(), &[4.0]);

    let c = g.input(Tensor::full(vec![2, 3, 5, 7], 1.25));
    let ga = g.global_avg_pool(c).unwrap();
    assert_eq!(g.value(ga).shape(), &[2, 3]);
    assert!(g.value(ga).data().iter().all(|&v| (v - 1.25).abs() < 1e-15));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = rand_tensor(&mut rng, &[2, 3, 6, 6]);
    let xv = g.input(t.clone());
    let a = g.avg_pool2d(xv, 2, Window::new(2, 0)).unwrap();
    assert!(g.value(a).max_rel_diff(&pool_oracle(&t, 2, 2, false), 1e-300) <= 1e-12);
    let mx = g.max_pool2d(xv, 3, Window::new(1, 0)).unwrap();
    assert_eq!(g.value(mx), &pool_oracle(&t, 3, 1, true));

    let small = g.input(Tensor::ones(vec![1, 1, 2, 2]));
    assert!(g.max_pool2d(small, 3, Window::new(1, 0)).is_err());
}

#[test]
fn max_pool_ties_route_to_first_index() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(vec![1, 1, 2, 2], 5.0), true);
    let m = g.max_pool2d(x, 2, Window::new(2, 0)).unwrap();
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn batch_norm_train_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = Tensor::from_fn(vec![4, 3, 5, 5], |_| rng.random_range(-3.0..7.0));
    let mut g = Graph::<f64>::new();
    let x = g.input(t);
    let gamma = g.input(Tensor::ones(vec![3]));
    let beta = g.input(Tensor::zeros(vec![3]));
    let (y, stats) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
    let v = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> =
            (0..4).flat_map(|n| v.data()[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
    assert_eq!(stats.mean.len(), 3);
}

#[test]
fn batch_norm_eval_identity_and_degenerate_train() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = rand_tensor(&mut rng, &[2, 2, 3, 3]);
    let mut g = Graph::<f64>::new();
    let x = g.input(t.clone());
    let gamma = g.input(Tensor::ones(vec![2]));
    let beta = g.input(Tensor::zeros(vec![2]));
    let y = g.batch_norm_eval(x, gamma, beta, &[0.0, 0.0], &[1.0, 1.0], 1e-5).unwrap();
    assert!(g.value(y).max_abs_diff(&t) < 1e-5);

    let one = g.input(Tensor::ones(vec![1, 2, 1, 1]));
    let err = g.batch_norm_train(one, gamma, beta, 1e-5).unwrap_err();
    assert!(matches!(err, TensorError::Runtime(_)));
}

#[test]
fn dropout_modes_and_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = rand_tensor(&mut rng, &[1000]);
    let mut g = Graph::<f64>::new();
    let x = g.input(t.clone());
    let e = g.dropout(x, 0.5, false, &mut rng).unwrap();
    assert_eq!(g.value(e), &t);
    let z = g.dropout(x, 0.0, true, &mut rng).unwrap();
    assert_eq!(g.value(z), &t);
    assert!(matches!(g.dropout(x, 1.0, true, &mut rng), Err(TensorError::Config(_))));

    let big = g.input(Tensor::ones(vec![1_000_000]));
    let d = g.dropout(big, 0.1, true, &mut rng).unwrap();
    let zeros = g.value(d).data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
    assert!((zeros - 0.1).abs() <= 0.002, "zero fraction {zeros}");
    let kept = g.value(d).data().iter().find(|&&v| v != 0.0).copied().unwrap();
    assert!((kept - 1.0 / 0.9).abs() < 1e-12);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let l = g.input(Tensor::zeros(vec![3, 10]));
    let loss = g.softmax_cross_entropy(l, &[0, 4, 9]).unwrap();
    assert!((g.value(loss).item().unwrap() - 10f64.ln()).abs() < 1e-12);

    let mut logits = Tensor::zeros(vec![1, 4]);
    logits.data_mut()[2] = 1e4;
    let l = g.input(logits);
    let loss = g.softmax_cross_entropy(l, &[2]).unwrap();
    assert!(g.value(loss).item().unwrap().abs() < 1e-12);

    let err = g.softmax_cross_entropy(l, &[4]).unwrap_err();
    assert!(matches!(err, TensorError::Data(ref m) if m.contains("sample 0")), "{err}");
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let y = g.mul(x, x).unwrap();
    assert_eq!(g.backward(y).unwrap().get(x).unwrap().data(), &[6.0]);

    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(0.0), true);
    let y = g.tanh(x);
    assert_eq!(g.backward(y).unwrap().get(x).unwrap().data(), &[1.0]);

    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::ones(vec![2]), true);
    let y = g.tanh(x);
    assert!(matches!(g.backward(y), Err(TensorError::Usage(_))));
}

#[test]
fn backward_accumulates_into_params_and_doubles_for_repeated_use() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap()).unwrap();

    let single = {
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let t = g.tanh(w);
        let s = g.sum(t);
        g.backward(s).unwrap().get(w).unwrap().clone()
    };
    let mut g = Graph::new();
    let w = g.param(&store, id);
    let t1 = g.tanh(w);
    let t2 = g.tanh(w);
    let s = g.add(t1, t2).unwrap();
    let s = g.sum(s);
    g.backward_into(s, &mut store).unwrap();
    for (a, b) in store.get(id).grad.data().iter().zip(single.data()) {
        assert_eq!(*a, 2.0 * b);
    }
    store.zero_grad();
    assert!(store.get(id).grad.data().iter().all(|&v| v == 0.0));
}

#[test]
fn eval_forward_is_bitwise_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xt = rand_tensor(&mut rng, &[2, 3, 9, 9]);
    let kt = rand_tensor(&mut rng, &[5, 3, 3, 3]);
    let run = || {
        let mut g = Graph::<f64>::new();
        let x = g.input(xt.clone());
        let k = g.input(kt.clone());
        let y = g.conv2d(x, k, Window::new(2, 1)).unwrap();
        let y = g.silu(y);
        let y = g.max_pool2d(y, 2, Window::new(1, 0)).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn permute_then_inverse_is_identity(dims in proptest::collection::vec(1usize..4, 1..5), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = rand_tensor(&mut rng, &dims);
            let mut axes: Vec<usize> = (0..dims.len()).collect();
            axes.reverse();
            let p = reskan_tensor::graph::permute_tensor(&t, &axes).unwrap();
            let back = reskan_tensor::graph::permute_tensor(&p, &axes).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn box_sum_equals_conv_with_ones(c in 1usize..4, h in 3usize..9, w in 3usize..9, k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xt = rand_tensor(&mut rng, &[2, c, h, w]);
            let mut g = Graph::<f64>::new();
            let x = g.input(xt.clone());
            let b = g.box_sum(x, k, Window::new(stride, pad)).unwrap();
            // per-channel oracle through conv2d with a single all-ones filter
            for ci in 0..c {
                let plane = Tensor::from_fn(vec![2, 1, h, w], |i| {
                    let n = i / (h * w);
                    xt.data()[(n * c + ci) * h * w + i % (h * w)]
                });
                let want = conv_oracle(&plane, &Tensor::ones(vec![1, 1, k, k]), stride, pad);
                let got = g.value(b);
                let [_, _, oh, ow] = got.dims4().unwrap();
                for n in 0..2 {
                    for p in 0..oh * ow {
                        let a = got.data()[(n * c + ci) * oh * ow + p];
                        let e = want.data()[n * oh * ow + p];
                        prop_assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
                    }
                }
            }
        }
    }
}
