//! Vector-Jacobian products for every recorded operation.

use super::ops::{for_each_permuted, gelu_grad};
use super::spatial::{conv2d_backward, grid_sample_backward, upsample_backward};
use super::{Graph, Op, Var};
use crate::tensor::Real;

fn accumulate<T: Real>(graph: &Graph<T>, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    if !graph.needs(v) {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(&contrib) {
                *a = *a + *c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(super) fn propagate<T: Real>(graph: &Graph<T>, out: Var, op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| graph.value(v).data();
    match op {
        Op::Input | Op::Leaf | Op::Param(_) => {}
        Op::Matmul(a, b) => {
            let (sa, sb) = (graph.shape(*a), graph.shape(*b));
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if graph.needs(*a) {
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, false, val(*b), true, T::zero(), &mut da);
                accumulate(graph, grads, *a, da);
            }
            if graph.needs(*b) {
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, val(*a), true, g, false, T::zero(), &mut db);
                accumulate(graph, grads, *b, db);
            }
        }
        Op::Bmm { a, b, ta, tb } => {
            let (sa, sb) = (graph.shape(*a), graph.shape(*b));
            let groups = sa[0];
            let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
            let n = if *tb { sb[1] } else { sb[2] };
            let (ad, bd) = (val(*a), val(*b));
            if graph.needs(*a) {
                let mut da = vec![T::zero(); groups * m * k];
                for gi in 0..groups {
                    let go = &g[gi * m * n..(gi + 1) * m * n];
                    let bg = &bd[gi * k * n..(gi + 1) * k * n];
                    let dst = &mut da[gi * m * k..(gi + 1) * m * k];
                    if *ta {
                        T::gemm(k, n, m, bg, *tb, go, true, T::zero(), dst);
                    } else {
                        T::gemm(m, n, k, go, false, bg, !*tb, T::zero(), dst);
                    }
                }
                accumulate(graph, grads, *a, da);
            }
            if graph.needs(*b) {
                let mut db = vec![T::zero(); groups * k * n];
                for gi in 0..groups {
                    let go = &g[gi * m * n..(gi + 1) * m * n];
                    let ag = &ad[gi * m * k..(gi + 1) * m * k];
                    let dst = &mut db[gi * k * n..(gi + 1) * k * n];
                    if *tb {
                        T::gemm(n, m, k, go, true, ag, *ta, T::zero(), dst);
                    } else {
                        T::gemm(k, m, n, ag, !*ta, go, false, T::zero(), dst);
                    }
                }
                accumulate(graph, grads, *b, db);
            }
        }
        Op::Add(a, b) => {
            accumulate(graph, grads, *a, g.to_vec());
            accumulate(graph, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(graph, grads, *a, g.to_vec());
            accumulate(graph, grads, *b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            accumulate(graph, grads, *a, zip_map(g, val(*b), |x, y| x * y));
            accumulate(graph, grads, *b, zip_map(g, val(*a), |x, y| x * y));
        }
        Op::AddBias(x, bias) => {
            accumulate(graph, grads, *x, g.to_vec());
            if graph.needs(*bias) {
                let n = graph.value(*bias).numel();
                let mut db = vec![T::zero(); n];
                for row in g.chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d = *d + *v;
                    }
                }
                accumulate(graph, grads, *bias, db);
            }
        }
        Op::Scale(x, s) => accumulate(graph, grads, *x, g.iter().map(|&v| v * *s).collect()),
        Op::GradScale(x, s) => accumulate(graph, grads, *x, g.iter().map(|&v| v * *s).collect()),
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(graph, grads, *x, g.to_vec()),
        Op::Relu(x) => {
            accumulate(graph, grads, *x, zip_map(g, val(*x), |d, v| if v > T::zero() { d } else { T::zero() }))
        }
        Op::Gelu(x) => accumulate(graph, grads, *x, zip_map(g, val(*x), |d, v| d * gelu_grad(v))),
        Op::Tanh(x) => {
            accumulate(graph, grads, *x, zip_map(g, graph.value(out).data(), |d, y| d * (T::one() - y * y)))
        }
        Op::Abs(x) => accumulate(
            graph,
            grads,
            *x,
            zip_map(g, val(*x), |d, v| {
                if v > T::zero() {
                    d
                } else if v < T::zero() {
                    -d
                } else {
                    T::zero()
                }
            }),
        ),
        Op::Sum(x) => accumulate(graph, grads, *x, vec![g[0]; graph.value(*x).numel()]),
        Op::Mean(x) => {
            let n = graph.value(*x).numel();
            accumulate(graph, grads, *x, vec![g[0] / T::of(n as f64); n]);
        }
        Op::MeanAxis { x, outer, len, inner } => {
            let inv = T::one() / T::of(*len as f64);
            let mut dx = vec![T::zero(); outer * len * inner];
            for o in 0..*outer {
                for l in 0..*len {
                    for i in 0..*inner {
                        dx[(o * len + l) * inner + i] = g[o * inner + i] * inv;
                    }
                }
            }
            accumulate(graph, grads, *x, dx);
        }
        Op::Concat { inputs, outer, inner, sizes } => {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            for (&v, &len) in inputs.iter().zip(sizes) {
                if graph.needs(v) {
                    let mut dv = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        let b = (o * total + offset) * inner;
                        dv.extend_from_slice(&g[b..b + len * inner]);
                    }
                    accumulate(graph, grads, v, dv);
                }
                offset += len;
            }
        }
        Op::Narrow { x, outer, len, inner, start } => {
            let part = graph.shape(out).iter().product::<usize>() / (*outer).max(1);
            let mut dx = vec![T::zero(); outer * len * inner];
            for o in 0..*outer {
                let b = (o * len + start) * inner;
                dx[b..b + part].copy_from_slice(&g[o * part..(o + 1) * part]);
            }
            accumulate(graph, grads, *x, dx);
        }
        Op::Permute { x, perm } => {
            let mut dx = vec![T::zero(); g.len()];
            for_each_permuted(graph.shape(*x), perm, |o, i| dx[i] = g[o]);
            accumulate(graph, grads, *x, dx);
        }
        Op::Softmax { x, outer, len, inner } => {
            let y = graph.value(out).data();
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: T = (0..*len).map(|l| g[at(l)] * y[at(l)]).sum();
                    for l in 0..*len {
                        dx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            accumulate(graph, grads, *x, dx);
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let gam = val(*gamma);
            let d = gam.len();
            if graph.needs(*gamma) {
                let mut dg = vec![T::zero(); d];
                for (r, row) in g.chunks(d).enumerate() {
                    for j in 0..d {
                        dg[j] = dg[j] + row[j] * xhat[r * d + j];
                    }
                }
                accumulate(graph, grads, *gamma, dg);
            }
            if graph.needs(*beta) {
                let mut db = vec![T::zero(); d];
                for row in g.chunks(d) {
                    for j in 0..d {
                        db[j] = db[j] + row[j];
                    }
                }
                accumulate(graph, grads, *beta, db);
            }
            if graph.needs(*x) {
                let nd = T::of(d as f64);
                let mut dx = vec![T::zero(); g.len()];
                for (r, row) in g.chunks(d).enumerate() {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let dxh: Vec<T> = (0..d).map(|j| row[j] * gam[j]).collect();
                    let s1: T = dxh.iter().copied().sum();
                    let s2: T = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = inv_std[r] * (nd * dxh[j] - s1 - xh[j] * s2) / nd;
                    }
                }
                accumulate(graph, grads, *x, dx);
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, outer, channels, inner, train } => {
            let (outer, channels, inner) = (*outer, *channels, *inner);
            let gam = val(*gamma);
            let mut dg = vec![T::zero(); channels];
            let mut db = vec![T::zero(); channels];
            for o in 0..outer {
                for c in 0..channels {
                    let base = (o * channels + c) * inner;
                    for i in base..base + inner {
                        dg[c] = dg[c] + g[i] * xhat[i];
                        db[c] = db[c] + g[i];
                    }
                }
            }
            if graph.needs(*x) {
                let mut dx = vec![T::zero(); g.len()];
                let n = T::of((outer * inner) as f64);
                for c in 0..channels {
                    // Σ dxhat and Σ dxhat·xhat per channel are γ·db and γ·dg.
                    let (s1, s2) = (gam[c] * db[c], gam[c] * dg[c]);
                    for o in 0..outer {
                        let base = (o * channels + c) * inner;
                        for i in base..base + inner {
                            let dxh = g[i] * gam[c];
                            dx[i] = if *train {
                                inv_std[c] * (n * dxh - s1 - xhat[i] * s2) / n
                            } else {
                                inv_std[c] * dxh
                            };
                        }
                    }
                }
                accumulate(graph, grads, *x, dx);
            }
            accumulate(graph, grads, *gamma, dg);
            accumulate(graph, grads, *beta, db);
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let (dx, dw) = conv2d_backward(graph, *x, *w, g, *stride, *pad, graph.needs(*x), graph.needs(*w));
            if let Some(dx) = dx {
                accumulate(graph, grads, *x, dx);
            }
            if let Some(dw) = dw {
                accumulate(graph, grads, *w, dw);
            }
            if let Some(bv) = b {
                if graph.needs(*bv) {
                    let so = graph.shape(out);
                    let (batch, cout, plane) = (so[0], so[1], so[2] * so[3]);
                    let mut db = vec![T::zero(); cout];
                    for bi in 0..batch {
                        for c in 0..cout {
                            let base = (bi * cout + c) * plane;
                            db[c] = db[c] + g[base..base + plane].iter().copied().sum::<T>();
                        }
                    }
                    accumulate(graph, grads, *bv, db);
                }
            }
        }
        Op::Upsample { x, factor } => {
            accumulate(graph, grads, *x, upsample_backward(graph.shape(*x), *factor, g));
        }
        Op::GridSample { img, coords } => {
            let (di, dc) = grid_sample_backward(graph, *img, *coords, g, graph.needs(*img), graph.needs(*coords));
            if let Some(di) = di {
                accumulate(graph, grads, *img, di);
            }
            if let Some(dc) = dc {
                accumulate(graph, grads, *coords, dc);
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let k = probs.len() / targets.len();
            let scale = g[0] / T::of(targets.len() as f64);
            let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (r, &t) in targets.iter().enumerate() {
                dl[r * k + t] = dl[r * k + t] - scale;
            }
            accumulate(graph, grads, *logits, dl);
        }
        Op::MaxAbsNormalize { x, denom, argmax } => {
            let xd = val(*x);
            let batch = denom.len();
            let per = xd.len() / batch.max(1);
            let mut dx = vec![T::zero(); xd.len()];
            for b in 0..batch {
                let d = denom[b];
                let range = b * per..(b + 1) * per;
                for i in range.clone() {
                    dx[i] = g[i] / d;
                }
                if let Some(k) = argmax[b] {
                    // y = x / |x_k|  =>  ∂y_i/∂x_k gains −x_i·sign(x_k)/|x_k|²
                    let dot: T = range.map(|i| g[i] * xd[i]).sum();
                    let sign = if xd[k] > T::zero() { T::one() } else { -T::one() };
                    dx[k] = dx[k] - dot * sign / (d * d);
                }
            }
            accumulate(graph, grads, *x, dx);
        }
    }
}
