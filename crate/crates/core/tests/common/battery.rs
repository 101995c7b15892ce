//! Gradient-check batteries over every differentiable building block.

use mexp_core::dgm::{loss_dgm, loss_nm, loss_rec, loss_sm, Dgm, DgmConfig, DgmLossWeights};
use mexp_core::fusion::{FusionConfig, FusionSwitches, FusionVariant, MultiHeadAttention, TransformerFusion, TransformerLayer};
use mexp_core::{NormMode, ParamStore, Real, Tensor};

use super::{fd_settings, grad_check, param_grad_check, rand_tensor, rng, GradCheck};

/// Every differentiable op, checked in the given precision.
pub fn op_gradient_errors<T: Real>() -> Vec<(String, f64, usize)> {
    let (h, _) = fd_settings::<T>();
    let mut r = rng(42);
    let mut out = Vec::new();
    let mut push = |name: &'static str, c: GradCheck| out.push((name.to_string(), c.rel_err, c.checked));
    let u = |s: &[usize], r: &mut _| rand_tensor::<T>(s, -1.0, 1.0, 0.0, r);
    let away = |s: &[usize], r: &mut _| rand_tensor::<T>(s, -1.0, 1.0, 0.1, r);

    push("matmul", grad_check(&[u(&[3, 4], &mut r), u(&[4, 5], &mut r)], 1, h, |g, v| g.matmul(v[0], v[1]).unwrap()));
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { u(&[2, 4, 3], &mut r) } else { u(&[2, 3, 4], &mut r) };
        let b = if tb { u(&[2, 5, 4], &mut r) } else { u(&[2, 4, 5], &mut r) };
        push("bmm", grad_check(&[a, b], 2, h, move |g, v| g.bmm(v[0], v[1], ta, tb).unwrap()));
    }
    push("add", grad_check(&[u(&[3, 4], &mut r), u(&[3, 4], &mut r)], 3, h, |g, v| g.add(v[0], v[1]).unwrap()));
    push("sub", grad_check(&[u(&[3, 4], &mut r), u(&[3, 4], &mut r)], 4, h, |g, v| g.sub(v[0], v[1]).unwrap()));
    push("mul", grad_check(&[u(&[3, 4], &mut r), u(&[3, 4], &mut r)], 5, h, |g, v| g.mul(v[0], v[1]).unwrap()));
    push("add_bias", grad_check(&[u(&[5, 4], &mut r), u(&[4], &mut r)], 6, h, |g, v| g.add_bias(v[0], v[1]).unwrap()));
    push("scale", grad_check(&[u(&[4, 5], &mut r)], 7, h, |g, v| g.scale(v[0], -1.7)));
    push("add_scalar", grad_check(&[u(&[4, 5], &mut r)], 8, h, |g, v| g.add_scalar(v[0], 0.3)));
    push("relu", grad_check(&[away(&[4, 5], &mut r)], 9, h, |g, v| g.relu(v[0])));
    push("gelu", grad_check(&[rand_tensor::<T>(&[4, 5], -3.0, 3.0, 0.0, &mut r)], 10, h, |g, v| g.gelu(v[0])));
    push("tanh", grad_check(&[u(&[4, 5], &mut r)], 11, h, |g, v| g.tanh(v[0])));
    push("abs", grad_check(&[away(&[4, 5], &mut r)], 12, h, |g, v| g.abs(v[0])));
    push("sum", grad_check(&[u(&[4, 5], &mut r)], 13, h, |g, v| g.sum(v[0])));
    push("mean", grad_check(&[u(&[4, 5], &mut r)], 14, h, |g, v| g.mean(v[0])));
    push("mean_axis", grad_check(&[u(&[2, 3, 4], &mut r)], 15, h, |g, v| g.mean_axis(v[0], 1).unwrap()));
    push(
        "concat",
        grad_check(&[u(&[2, 3, 3], &mut r), u(&[2, 1, 3], &mut r)], 16, h, |g, v| g.concat(&[v[0], v[1]], 1).unwrap()),
    );
    push("narrow", grad_check(&[u(&[2, 5, 3], &mut r)], 17, h, |g, v| g.narrow(v[0], 1, 1, 3).unwrap()));
    push("reshape", grad_check(&[u(&[4, 6], &mut r)], 18, h, |g, v| g.reshape(v[0], &[6, 4]).unwrap()));
    push("permute", grad_check(&[u(&[2, 3, 4], &mut r)], 19, h, |g, v| g.permute(v[0], &[2, 0, 1]).unwrap()));
    push("softmax", grad_check(&[rand_tensor::<T>(&[4, 5], -2.0, 2.0, 0.0, &mut r)], 20, h, |g, v| g.softmax(v[0], 1).unwrap()));
    push("softmax_axis0", grad_check(&[u(&[4, 5], &mut r)], 21, h, |g, v| g.softmax(v[0], 0).unwrap()));
    push(
        "layer_norm",
        grad_check(&[u(&[3, 6], &mut r), rand_tensor::<T>(&[6], 0.5, 1.5, 0.0, &mut r), u(&[6], &mut r)], 22, h, |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
        }),
    );
    let mut store = ParamStore::<T>::new();
    let rm = store.add_buffer("rm", Tensor::zeros(&[3])).unwrap();
    let rv = store.add_buffer("rv", Tensor::ones(&[3])).unwrap();
    let bn_in = [rand_tensor::<T>(&[4, 3, 2], -2.0, 2.0, 0.0, &mut r), rand_tensor::<T>(&[3], 0.5, 1.5, 0.0, &mut r), u(&[3], &mut r)];
    push(
        "batch_norm_train",
        grad_check(&bn_in, 23, h, |g, v| {
            g.batch_norm(v[0], v[1], v[2], &store, (rm, rv), 1, NormMode::Train, 1e-5, 0.1).unwrap()
        }),
    );
    push(
        "batch_norm_eval",
        grad_check(&bn_in, 24, h, |g, v| {
            g.batch_norm(v[0], v[1], v[2], &store, (rm, rv), 1, NormMode::Eval, 1e-5, 0.1).unwrap()
        }),
    );
    push(
        "conv2d",
        grad_check(&[u(&[2, 2, 5, 4], &mut r), u(&[3, 2, 3, 3], &mut r), u(&[3], &mut r)], 25, h, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap()
        }),
    );
    push("upsample", grad_check(&[u(&[1, 2, 3, 4], &mut r)], 26, h, |g, v| g.upsample_nearest(v[0], 2).unwrap()));
    // fractional coordinates stay clear of integer cell boundaries and borders
    let mut coords = Tensor::<T>::zeros(&[1, 3, 4, 2]);
    for y in 0..3 {
        for x in 0..4 {
            use rand::Rng;
            let fx: f64 = r.random_range(0.1..0.9);
            let fy: f64 = r.random_range(0.1..0.9);
            let ix: usize = r.random_range(0..4);
            let iy: usize = r.random_range(0..3);
            coords.set(&[0, y, x, 0], T::of(ix as f64 + fx));
            coords.set(&[0, y, x, 1], T::of(iy as f64 + fy));
        }
    }
    push(
        "grid_sample",
        grad_check(&[u(&[1, 2, 4, 5], &mut r), coords], 27, h, |g, v| g.grid_sample(v[0], v[1]).unwrap()),
    );
    push("grad_scale", grad_check(&[u(&[4, 5], &mut r)], 28, h, |g, v| g.grad_scale(v[0], 1.0)));
    push(
        "cross_entropy",
        grad_check(&[rand_tensor::<T>(&[7, 3], -2.0, 2.0, 0.0, &mut r)], 29, h, |g, v| {
            g.cross_entropy(v[0], &[0, 2, 1, 2, 1, 0, 0]).unwrap()
        }),
    );
    // a unique maximum keeps the normaliser differentiable
    let mut mx = u(&[2, 12], &mut r);
    mx.data_mut()[3] = T::of(2.5);
    mx.data_mut()[17] = T::of(-2.5);
    push("max_abs_normalize", grad_check(&[mx], 30, h, |g, v| g.max_abs_normalize(v[0], 1e-6).unwrap()));
    out
}

pub fn small_cfg(dim: usize, heads: usize) -> FusionConfig {
    FusionConfig { embed_dim: dim, heads, depth: 1, mlp_ratio: 2, ..FusionConfig::default() }
}

pub fn tiny_model<T: Real>(store: &mut ParamStore<T>, variant: FusionVariant, switches: FusionSwitches, seed: u64) -> TransformerFusion {
    let cfg = FusionConfig { variant, ..small_cfg(8, 2) };
    TransformerFusion::new(store, "fusion", cfg, switches, 9, 4, 12, &mut rng(seed)).unwrap()
}

pub fn model_inputs<T: Real>(batch: usize, seed: u64) -> (Vec<Tensor<T>>, Tensor<T>) {
    let mut r = rng(seed);
    ((0..9).map(|_| rand_tensor(&[batch, 4, 12], -1.0, 1.0, 0.0, &mut r)).collect(), rand_tensor(&[batch, 4, 12], -1.0, 1.0, 0.0, &mut r))
}

pub fn fusion_gradient_errors<T: Real>() -> Vec<(String, f64, usize)> {
    let (h, _) = fd_settings::<T>();
    let mut out = Vec::new();
    let mut r = rng(23);
    for variant in [FusionVariant::Before, FusionVariant::After] {
        let mut store = ParamStore::<T>::new();
        let layer = mexp_core::fusion::FusionLayer::new(&mut store, "f", variant, 8, 2, 4, &mut r).unwrap();
        let x = rand_tensor::<T>(&[3, 4, 8], -1.0, 1.0, 0.0, &mut r);
        let c = grad_check(&[x.clone()], 24, h, |g, v| {
            layer.forward(g, &store, v[0], NormMode::Train).unwrap().vector
        });
        out.push((format!("{variant:?} input"), c.rel_err, c.checked));
        let ids = store.trainable_with_prefix("f");
        let c = param_grad_check(&mut store, &ids, 30, 25, h, |g, s| {
            let xv = g.input(x.clone());
            let f = layer.forward(g, s, xv, NormMode::Train).unwrap();
            let t = g.tanh(f.vector);
            g.sum(t)
        });
        out.push((format!("{variant:?} params"), c.rel_err, c.checked));
    }
    let mut store = ParamStore::<T>::new();
    let attn = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut r).unwrap();
    let x = rand_tensor::<T>(&[2, 3, 8], -1.0, 1.0, 0.0, &mut r);
    let c = grad_check(&[x], 26, h, |g, v| attn.forward(g, &store, v[0]).unwrap());
    out.push(("attention input".into(), c.rel_err, c.checked));
    let layer = TransformerLayer::new(&mut store, "t", 8, 2, 16, &mut r).unwrap();
    let x = rand_tensor::<T>(&[2, 3, 8], -1.0, 1.0, 0.0, &mut r);
    let c = grad_check(&[x], 27, h, |g, v| layer.forward(g, &store, v[0]).unwrap());
    out.push(("transformer layer input".into(), c.rel_err, c.checked));

    let mut store = ParamStore::<T>::new();
    let model = tiny_model(&mut store, FusionVariant::Before, FusionSwitches::default(), 28);
    let (regions, face) = model_inputs::<T>(3, 29);
    let ids = store.trainable_with_prefix("fusion");
    let c = param_grad_check(&mut store, &ids, 40, 30, h, |g, s| {
        let rv: Vec<_> = regions.iter().map(|t| g.input(t.clone())).collect();
        let fv = g.input(face.clone());
        let o = model.forward(g, s, &rv, Some(fv), NormMode::Train).unwrap();
        g.cross_entropy(o.logits, &[0, 1, 2]).unwrap()
    });
    out.push(("classifier params".into(), c.rel_err, c.checked));
    out
}

fn tiny_dgm_config() -> DgmConfig {
    DgmConfig { image_channels: 1, height: 8, width: 8, widths: vec![3, 4], alpha: 0.2, normalize: true }
}

/// The three DGM losses as graph operations on inputs kept clear of their
/// kinks, then (64-bit only) differentiated through a small generator with
/// respect to its parameters. Central differences with the 32-bit step cross
/// the generator's ReLU and bilinear kinks, so that check is 64-bit only.
pub fn dgm_gradient_errors<T: Real>() -> Vec<(String, f64, usize)> {
    let (h, _) = fd_settings::<T>();
    let mut out = Vec::new();
    let mut r = rng(31);
    let pred = rand_tensor::<T>(&[2, 1, 5, 4], 0.0, 1.0, 0.0, &mut r);
    let gap = rand_tensor::<T>(&[2, 1, 5, 4], -0.3, 0.3, 0.05, &mut r);
    let mut target = pred.clone();
    for (t, d) in target.data_mut().iter_mut().zip(gap.data()) {
        *t = *t + *d;
    }
    let c = grad_check(&[pred, target], 32, h, |g, v| loss_rec(g, v[0], v[1]).unwrap());
    out.push(("dgm loss rec".into(), c.rel_err, c.checked));
    let c = grad_check(&[rand_tensor::<T>(&[2, 2, 4, 5], -1.0, 1.0, 0.1, &mut r)], 33, h, |g, v| loss_nm(g, v[0]).unwrap());
    out.push(("dgm loss nm".into(), c.rel_err, c.checked));
    // neighbour differences stay near the slopes, away from zero
    let mut field = Tensor::<T>::zeros(&[2, 2, 4, 5]);
    for b in 0..2 {
        for ch in 0..2 {
            let (sx, sy) = (if (b + ch) % 2 == 0 { 0.3 } else { -0.3 }, if ch == 0 { -0.25 } else { 0.25 });
            for y in 0..4 {
                for x in 0..5 {
                    let noise: f64 = rand_tensor::<f64>(&[1], -0.04, 0.04, 0.0, &mut r).data()[0];
                    field.set(&[b, ch, y, x], T::of(sx * x as f64 + sy * y as f64 + noise));
                }
            }
        }
    }
    let c = grad_check(&[field], 34, h, |g, v| loss_sm(g, v[0]).unwrap());
    out.push(("dgm loss sm".into(), c.rel_err, c.checked));
    if std::mem::size_of::<T>() == 8 {
        out.extend(dgm_network_gradient_errors::<T>());
    }
    out
}

fn dgm_network_gradient_errors<T: Real>() -> Vec<(String, f64, usize)> {
    let (h, _) = fd_settings::<T>();
    let mut out = Vec::new();
    for which in ["rec", "nm", "sm", "total"] {
        let mut r = rng(7);
        let mut store = ParamStore::<T>::new();
        let dgm = Dgm::new(&mut store, "dgm", tiny_dgm_config(), &mut r).unwrap();
        // give the field visible magnitude so every loss term is active
        let head = store.id("dgm.head.weight").unwrap();
        for v in store.value_mut(head).data_mut() {
            *v = T::of(v.f64() * 10.0);
        }
        let onset = rand_tensor::<T>(&[2, 1, 8, 8], 0.0, 1.0, 0.0, &mut r);
        let apex = rand_tensor::<T>(&[2, 1, 8, 8], 0.0, 1.0, 0.0, &mut r);
        let ids = store.trainable_with_prefix("dgm");
        let weights = DgmLossWeights::default();
        let c = param_grad_check(&mut store, &ids, 40, 11, h, |g, s| {
            let on = g.input(onset.clone());
            let ap = g.input(apex.clone());
            let o = dgm.forward(g, s, on, ap, NormMode::Train).unwrap();
            let l = loss_dgm(g, on, ap, &o, &weights).unwrap();
            match which {
                "rec" => l.rec,
                "nm" => l.nm,
                "sm" => l.sm,
                _ => l.total,
            }
        });
        out.push((format!("dgm loss {which} through generator"), c.rel_err, c.checked));
    }
    out
}
