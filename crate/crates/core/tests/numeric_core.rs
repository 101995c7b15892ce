mod common;

use common::battery::op_gradient_errors;
use common::{fd_settings, rand_tensor, rng};
use mexp_core::optim::{cosine_anneal, Adam};
use mexp_core::{Graph, NormMode, ParamStore, Real, Tensor};

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[b, cout, ho, wo]);
    for n in 0..b {
        for o in 0..cout {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut s = 0.0;
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.at(&[n, c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                                }
                            }
                        }
                    }
                    out.set(&[n, o, y, xx], s);
                }
            }
        }
    }
    out
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::eye(2));
    let b = g.input(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).to_f64_vec(), vec![1.0, 2.0, 3.0, 4.0]);

    let a = g.input(t64(&[1, 2], &[1.0, 0.0]));
    let b = g.input(t64(&[2, 1], &[0.0, 1.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).to_f64_vec(), vec![0.0]);

    let mut r = rng(1);
    let a = rand_tensor::<f64>(&[3, 4], -1.0, 1.0, 0.0, &mut r);
    let b = rand_tensor::<f64>(&[4, 2], -1.0, 1.0, 0.0, &mut r);
    let expect = matmul_oracle(a.data(), b.data(), 3, 4, 2);
    let (va, vb) = (g.input(a), g.input(b));
    let c = g.matmul(va, vb).unwrap();
    for (x, y) in g.value(c).data().iter().zip(&expect) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn conv_examples() {
    let mut r = rng(2);
    let x = rand_tensor::<f64>(&[1, 1, 5, 5], -1.0, 1.0, 0.0, &mut r);
    let mut g = Graph::new();
    let vx = g.input(x.clone());
    let w = g.input(Tensor::ones(&[1, 1, 1, 1]));
    let y = g.conv2d(vx, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);

    let c = g.input(Tensor::full(&[1, 1, 6, 6], 0.7));
    let avg = g.input(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
    let y = g.conv2d(c, avg, None, 1, 1).unwrap();
    let out = g.value(y);
    for yy in 1..5 {
        for xx in 1..5 {
            assert!((out.at(&[0, 0, yy, xx]) - 0.7).abs() < 1e-12);
        }
    }

    let k = rand_tensor::<f64>(&[1, 1, 3, 3], -1.0, 1.0, 0.0, &mut r);
    let vk = g.input(k.clone());
    let y = g.conv2d(vx, vk, None, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
    assert!(g.value(y).max_abs_diff(&conv_oracle(&x, &k, 1, 0)) < 1e-12);

    let x2 = rand_tensor::<f64>(&[2, 3, 7, 6], -1.0, 1.0, 0.0, &mut r);
    let k2 = rand_tensor::<f64>(&[4, 3, 3, 3], -1.0, 1.0, 0.0, &mut r);
    let (vx2, vk2) = (g.input(x2.clone()), g.input(k2.clone()));
    let y = g.conv2d(vx2, vk2, None, 2, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 4, 4, 3]);
    assert!(g.value(y).max_abs_diff(&conv_oracle(&x2, &k2, 2, 1)) < 1e-12);
}

#[test]
fn conv_matches_loop_oracle_over_random_geometries() {
    use rand::Rng;
    let mut r = rng(12);
    for _ in 0..60 {
        let k = r.random_range(1..5);
        let stride = r.random_range(1..4);
        let pad = r.random_range(0..3);
        let h = r.random_range(k.max(1)..9);
        let w = r.random_range(k.max(1)..9);
        let x = rand_tensor::<f64>(&[2, 2, h, w], -1.0, 1.0, 0.0, &mut r);
        let kern = rand_tensor::<f64>(&[3, 2, k, k], -1.0, 1.0, 0.0, &mut r);
        let want = conv_oracle(&x, &kern, stride, pad);
        let mut g = Graph::new();
        let (vx, vk) = (g.leaf(x.clone()), g.input(kern.clone()));
        let y = g.conv2d(vx, vk, None, stride, pad).unwrap();
        assert!(g.value(y).max_abs_diff(&want) < 1e-12, "k {k} stride {stride} pad {pad} {h}x{w}");
        // the input gradient is the adjoint: <conv(x), u> = <x, dx>
        let probe = rand_tensor::<f64>(want.shape(), -1.0, 1.0, 0.0, &mut r);
        let vp = g.input(probe.clone());
        let prod = g.mul(y, vp).unwrap();
        let loss = g.sum(prod);
        let dx = g.backward(loss).unwrap().wrt(vx).unwrap().clone();
        let lhs: f64 = want.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}

#[test]
fn conv_kernel_too_large() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[1, 1, 2, 2]));
    let w = g.input(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(g.conv2d(x, w, None, 1, 1).is_err());
}

fn bn_store() -> (ParamStore<f64>, mexp_core::ParamId, mexp_core::ParamId) {
    let mut store = ParamStore::new();
    let rm = store.add_buffer("bn.running_mean", Tensor::zeros(&[1])).unwrap();
    let rv = store.add_buffer("bn.running_var", Tensor::ones(&[1])).unwrap();
    (store, rm, rv)
}

#[test]
fn batch_norm_examples() {
    let (store, rm, rv) = bn_store();
    let run = |x: Tensor<f64>, mode: NormMode| {
        let mut g = Graph::new();
        let n = x.shape()[0];
        let vx = g.input(x.reshape(&[n, 1]).unwrap());
        let gamma = g.input(Tensor::ones(&[1]));
        let beta = g.input(Tensor::zeros(&[1]));
        let y = g.batch_norm(vx, gamma, beta, &store, (rm, rv), 1, mode, 1e-5, 0.1).unwrap();
        let ups = g.take_buffer_updates();
        (g.value(y).to_f64_vec(), ups)
    };
    let (out, _) = run(t64(&[4], &[3.0; 4]), NormMode::Train);
    assert!(out.iter().all(|v| *v == 0.0));

    let (out, _) = run(t64(&[2], &[-1.0, 1.0]), NormMode::Train);
    assert!((out[0] + 1.0).abs() < 1e-4 && (out[1] - 1.0).abs() < 1e-4);

    let (out, ups) = run(t64(&[4], &[1.0, 2.0, 3.0, 4.0]), NormMode::Train);
    let denom = (1.25f64 + 1e-5).sqrt();
    for (i, v) in out.iter().enumerate() {
        assert!((v - (i as f64 + 1.0 - 2.5) / denom).abs() < 1e-12);
    }
    // momentum 0.1 toward the batch mean 2.5 and unbiased variance 5/3
    assert_eq!(ups.len(), 2);
    assert!((ups[0].1.data()[0] - 0.25).abs() < 1e-12);
    assert!((ups[1].1.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);

    let (out, ups) = run(t64(&[2], &[0.5, -0.5]), NormMode::Eval);
    assert!(ups.is_empty());
    assert!((out[0] - 0.5 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t64(&[3], &[0.0, 0.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    assert!(g.value(s).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

    let x = g.input(t64(&[2], &[1000.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    let v = g.value(s).to_f64_vec();
    assert!(v.iter().all(|p| p.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);

    let x = g.input(t64(&[3], &[1.0, 2.0, 3.0]));
    let s = g.softmax(x, 0).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, p) in g.value(s).data().iter().enumerate() {
        assert!((p - ((i + 1) as f64).exp() / z).abs() < 1e-15);
    }
}

#[test]
fn softmax_sums_to_one_on_any_axis() {
    let mut r = rng(3);
    for trial in 0..50 {
        let x = rand_tensor::<f32>(&[3, 4, 5], -30.0, 30.0, 0.0, &mut r);
        let axis = trial % 3;
        let mut g = Graph::new();
        let vx = g.input(x);
        let s = g.softmax(vx, axis).unwrap();
        let v = g.value(s);
        let shape = [3, 4, 5];
        let mut idx = [0usize; 3];
        for a in 0..shape[(axis + 1) % 3] {
            for b in 0..shape[(axis + 2) % 3] {
                idx[(axis + 1) % 3] = a;
                idx[(axis + 2) % 3] = b;
                let mut total = 0.0f64;
                for k in 0..shape[axis] {
                    idx[axis] = k;
                    let p = v.at(&idx) as f64;
                    assert!(p >= 0.0);
                    total += p;
                }
                assert!((total - 1.0).abs() < 1e-6, "{total}");
            }
        }
    }
}

fn identity_coords(h: usize, w: usize) -> Tensor<f64> {
    let mut c = Tensor::zeros(&[1, h, w, 2]);
    for y in 0..h {
        for x in 0..w {
            c.set(&[0, y, x, 0], x as f64);
            c.set(&[0, y, x, 1], y as f64);
        }
    }
    c
}

#[test]
fn grid_sample_examples() {
    let mut r = rng(4);
    let img = rand_tensor::<f64>(&[1, 2, 6, 7], 0.0, 1.0, 0.0, &mut r);
    let mut g = Graph::new();
    let vi = g.input(img.clone());
    let vc = g.input(identity_coords(6, 7));
    let out = g.grid_sample(vi, vc).unwrap();
    assert_eq!(g.value(out), &img);

    // shift by (1, 0): output(y, x) = img(y, min(x + 1, w - 1))
    let mut sc = identity_coords(6, 7);
    for y in 0..6 {
        for x in 0..7 {
            sc.set(&[0, y, x, 0], x as f64 + 1.0);
        }
    }
    let vc = g.input(sc);
    let out = g.grid_sample(vi, vc).unwrap();
    for c in 0..2 {
        for y in 0..6 {
            for x in 0..7 {
                assert_eq!(g.value(out).at(&[0, c, y, x]), img.at(&[0, c, y, (x + 1).min(6)]));
            }
        }
    }

    let mut ramp = Tensor::zeros(&[1, 1, 5, 8]);
    for y in 0..5 {
        for x in 0..8 {
            ramp.set(&[0, 0, y, x], x as f64);
        }
    }
    let mut hc = identity_coords(5, 8);
    for y in 0..5 {
        for x in 0..8 {
            hc.set(&[0, y, x, 0], x as f64 + 0.5);
        }
    }
    let (vr, vh) = (g.input(ramp), g.input(hc));
    let out = g.grid_sample(vr, vh).unwrap();
    for y in 0..5 {
        for x in 0..7 {
            assert!((g.value(out).at(&[0, 0, y, x]) - (x as f64 + 0.5)).abs() < 1e-6);
        }
    }
}

#[test]
fn grid_sample_identity_is_bit_exact_f32() {
    let mut r = rng(5);
    let img = rand_tensor::<f32>(&[2, 3, 9, 4], 0.0, 1.0, 0.0, &mut r);
    let coords: Tensor<f32> = Tensor::stack(&[&identity_coords(9, 4).cast(), &identity_coords(9, 4).cast()])
        .unwrap()
        .reshape(&[2, 9, 4, 2])
        .unwrap();
    let mut g = Graph::new();
    let (vi, vc) = (g.input(img.clone()), g.input(coords));
    let out = g.grid_sample(vi, vc).unwrap();
    assert_eq!(g.value(out).data(), img.data());
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert!(grads.wrt(x).unwrap().data().iter().all(|v| *v == 1.0));

    let mut g = Graph::<f64>::new();
    let x = g.leaf(t64(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().to_f64_vec(), vec![2.0, 4.0]);

    let mut g = Graph::<f64>::new();
    let x = g.leaf(t64(&[2], &[1.0, 2.0]));
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(mexp_core::Error::Usage(_))));
}

#[test]
fn backward_reaches_every_parameter() {
    let mut r = rng(6);
    let mut store = ParamStore::<f32>::new();
    let l1 = mexp_core::nn::Linear::new(&mut store, "a", 3, 4, true, &mut r).unwrap();
    let l2 = mexp_core::nn::Linear::new(&mut store, "b", 4, 2, true, &mut r).unwrap();
    let mut g = Graph::new();
    let x = g.input(rand_tensor(&[5, 3], -1.0, 1.0, 0.0, &mut r));
    let h = l1.forward(&mut g, &store, x).unwrap();
    let h = g.tanh(h);
    let y = l2.forward(&mut g, &store, h).unwrap();
    let loss = g.cross_entropy(y, &[0, 1, 1, 0, 1]).unwrap();
    let grads = g.backward(loss).unwrap();
    for (id, p) in store.iter() {
        assert!(grads.param(id).is_some(), "{} has no gradient", p.name);
        assert_eq!(grads.param(id).unwrap().shape(), p.value.shape());
    }
}

#[test]
fn linear_chain_matches_composed_jacobian() {
    let mut r = rng(7);
    let mats: Vec<Tensor<f64>> = [(3, 4), (4, 5), (5, 2)]
        .iter()
        .map(|&(a, b)| rand_tensor(&[a, b], -1.0, 1.0, 0.0, &mut r))
        .collect();
    let x = rand_tensor::<f64>(&[1, 3], -1.0, 1.0, 0.0, &mut r);
    let mut g = Graph::new();
    let vx = g.leaf(x);
    let mut h = vx;
    for m in &mats {
        let vm = g.input(m.clone());
        h = g.matmul(h, vm).unwrap();
    }
    let s = g.sum(h);
    let grads = g.backward(s).unwrap();
    // d sum(x·A·B·C) / dx = A·B·C·1
    let abc = mats[0].matmul(&mats[1]).unwrap().matmul(&mats[2]).unwrap();
    let ones = Tensor::<f64>::ones(&[2, 1]);
    let expect = abc.matmul(&ones).unwrap();
    let got = grads.wrt(vx).unwrap();
    for i in 0..3 {
        assert!((got.data()[i] - expect.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn adam_and_cosine() {
    assert_eq!(cosine_anneal(0, 100, 0.002), 0.002);
    assert!(cosine_anneal(100, 100, 0.002).abs() < 1e-18);
    assert!((cosine_anneal(50, 100, 0.002) - 0.001).abs() < 1e-15);

    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", t64(&[1], &[1.0])).unwrap();
    let mut adam = Adam::new(vec![x]);
    let mut g = Graph::new();
    let v = g.param(&store, x);
    let sq = g.mul(v, v).unwrap();
    let l = g.sum(sq);
    let grads = g.backward(l).unwrap();
    adam.step(&mut store, &grads, 0.1);
    assert!(store.value(x).data()[0] < 1.0);

    // f(p) = (p0 - 1)^2 + 3 (p1 + 2)^2
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", t64(&[2], &[4.0, 3.0])).unwrap();
    let mut adam = Adam::new(vec![p]);
    let target = t64(&[2], &[1.0, -2.0]);
    let weight = t64(&[2], &[1.0, 3.0]);
    for step in 0..200 {
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let t = g.input(target.clone());
        let w = g.input(weight.clone());
        let d = g.sub(v, t).unwrap();
        let d2 = g.mul(d, d).unwrap();
        let wd = g.mul(d2, w).unwrap();
        let l = g.sum(wd);
        let grads = g.backward(l).unwrap();
        adam.step(&mut store, &grads, cosine_anneal(step, 200, 0.5));
    }
    let v = store.value(p).to_f64_vec();
    assert!((v[0] - 1.0).abs() < 1e-3 && (v[1] + 2.0).abs() < 1e-3, "{v:?}");
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut r = rng(8);
        let mut store = ParamStore::<f32>::new();
        let conv = mexp_core::nn::Conv2d::new(&mut store, "c", 2, 3, 3, 1, 1, true, &mut r).unwrap();
        let mut g = Graph::new();
        let x = g.input(rand_tensor(&[1, 2, 6, 6], 0.0, 1.0, 0.0, &mut r));
        let y = conv.forward(&mut g, &store, x).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

fn assert_all_pass<T: Real>() {
    let (_, tol) = fd_settings::<T>();
    let results = op_gradient_errors::<T>();
    let total: usize = results.iter().map(|r| r.2).sum();
    for (name, err, n) in &results {
        eprintln!("{name:>20} {err:.3e} ({n} points)");
        assert!(*err <= tol, "{name}: rel err {err:e} over {n} points");
    }
    assert!(results.iter().all(|r| r.2 >= 20), "every op needs at least 20 points");
    assert!(total >= 20);
}

#[test]
fn every_op_passes_gradient_check_f32() {
    assert_all_pass::<f32>();
}

#[test]
fn every_op_passes_gradient_check_f64() {
    assert_all_pass::<f64>();
}

#[test]
fn grad_scale_scales_only_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t64(&[2], &[1.0, 2.0]));
    let y = g.grad_scale(x, 1e-6);
    assert_eq!(g.value(y).to_f64_vec(), vec![1.0, 2.0]);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().to_f64_vec(), vec![1e-6, 1e-6]);
}
