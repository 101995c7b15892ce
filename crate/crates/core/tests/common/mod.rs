//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod battery;

use mexp_core::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform tensor in `[lo, hi)`, optionally pushed at least `margin` away from zero.
pub fn rand_tensor<T: Real>(shape: &[usize], lo: f64, hi: f64, margin: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mut v: f64 = rng.random_range(lo..hi);
            if v.abs() < margin {
                v = if v >= 0.0 { v + margin } else { v - margin };
            }
            T::of(v)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Finite-difference step and pass threshold for a precision.
pub fn fd_settings<T: Real>() -> (f64, f64) {
    if std::mem::size_of::<T>() == 4 {
        (1e-2, 1e-3)
    } else {
        (1e-6, 1e-5)
    }
}

/// Richardson extrapolation of central differences at `h` and `h/2`,
/// cancelling the second-order truncation term.
fn richardson(coarse: f64, fine: f64) -> f64 {
    (4.0 * fine - coarse) / 3.0
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub rel_err: f64,
    pub checked: usize,
}

/// Scalarise `f`'s output with a fixed random projection, then compare the
/// reverse-mode gradient of every input with central differences of the
/// forward pass alone. The relative error is `‖a − n‖ / max(‖a‖, ‖n‖)`.
pub fn grad_check<T: Real>(
    inputs: &[Tensor<T>],
    seed: u64,
    h: f64,
    f: impl Fn(&mut Graph<T>, &[Var]) -> Var,
) -> GradCheck {
    let mut r = rng(seed ^ 0x5eed);
    let project = |g: &mut Graph<T>, out: Var, proj: &Option<Tensor<T>>| -> Var {
        match proj {
            None => out,
            Some(p) => {
                let p = g.input(p.clone());
                let m = g.mul(out, p).unwrap();
                g.sum(m)
            }
        }
    };
    // discover output shape
    let mut g0 = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g0.input(t.clone())).collect();
    let out0 = f(&mut g0, &vars);
    let out_shape = g0.shape(out0).to_vec();
    let proj = if out_shape.iter().product::<usize>() == 1 && out_shape.is_empty() {
        None
    } else {
        Some(rand_tensor::<T>(&out_shape, 0.5, 1.5, 0.0, &mut r))
    };

    let eval = |ins: &[Tensor<T>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        let l = project(&mut g, out, &proj);
        g.value(l).item().f64()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let loss = project(&mut g, out, &proj);
    let grads = g.backward(loss).unwrap();

    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut checked = 0;
    for (k, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape());
        let analytic = grads.wrt(*v).unwrap_or(&zero).to_f64_vec();
        for i in 0..inputs[k].numel() {
            let x = inputs[k].data()[i].f64();
            let central = |h: f64| {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[k].data_mut()[i] = T::of(x + h);
                minus[k].data_mut()[i] = T::of(x - h);
                // use the step actually representable in T
                let step = plus[k].data()[i].f64() - minus[k].data()[i].f64();
                (eval(&plus) - eval(&minus)) / step
            };
            let numeric = richardson(central(h), central(h / 2.0));
            diff2 += (analytic[i] - numeric).powi(2);
            a2 += analytic[i].powi(2);
            n2 += numeric.powi(2);
            checked += 1;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    let rel_err = if denom < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / denom };
    GradCheck { rel_err, checked }
}

/// Central-difference check of `d loss / d θ` for `points` randomly chosen
/// scalar coordinates of the trainable parameters in `ids`.
pub fn param_grad_check<T: Real>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    points: usize,
    seed: u64,
    h: f64,
    f: impl Fn(&mut Graph<T>, &ParamStore<T>) -> Var,
) -> GradCheck {
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    let grads = g.backward(loss).unwrap();
    let mut r = rng(seed);
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for _ in 0..points {
        let id = ids[r.random_range(0..ids.len())];
        let i = r.random_range(0..store.value(id).numel());
        let analytic = grads.param(id).map(|t| t.data()[i].f64()).unwrap_or(0.0);
        let x = store.value(id).data()[i];
        let at = |v: f64, store: &mut ParamStore<T>| {
            store.value_mut(id).data_mut()[i] = T::of(v);
            let actual = store.value(id).data()[i].f64();
            let mut g = Graph::new();
            let l = f(&mut g, store);
            (g.value(l).item().f64(), actual)
        };
        let mut central = |h: f64| {
            let (lp, xp) = at(x.f64() + h, store);
            let (lm, xm) = at(x.f64() - h, store);
            (lp - lm) / (xp - xm)
        };
        let (coarse, fine) = (central(h), central(h / 2.0));
        store.value_mut(id).data_mut()[i] = x;
        let numeric = richardson(coarse, fine);
        diff2 += (analytic - numeric).powi(2);
        a2 += analytic.powi(2);
        n2 += numeric.powi(2);
    }
    let denom = a2.sqrt().max(n2.sqrt());
    let rel_err = if denom < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / denom };
    GradCheck { rel_err, checked: points }
}
