//! Forward rules for the dense (non-spatial) operations.

use super::{Graph, NormMode, Op, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Visit every element of a permuted view, yielding `(out_flat, in_flat)`.
pub(crate) fn for_each_permuted(shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for out in 0..total {
        f(out, off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let u = k * (x + T::of(0.044715) * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(0.044715);
    let half = T::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

impl<T: Real> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    fn binary(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data).expect("same shape");
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    /// 2-d matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        self.count_macs(m * k * n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Matmul(a, b), needs))
    }

    /// Batched product over a leading group axis, with optional transposition
    /// of the trailing two axes of either operand.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?} (transposed: {trans_a}, {trans_b})")));
        }
        let groups = sa[0];
        let mut out = vec![T::zero(); groups * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for g in 0..groups {
                T::gemm(
                    m,
                    k,
                    n,
                    &da[g * m * k..(g + 1) * m * k],
                    trans_a,
                    &db[g * k * n..(g + 1) * k * n],
                    trans_b,
                    T::zero(),
                    &mut out[g * m * n..(g + 1) * m * n],
                );
            }
        }
        self.count_macs(groups * m * k * n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[groups, m, n], out)?, Op::Bmm { a, b, ta: trans_a, tb: trans_b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    /// `x[..., n] + bias[n]`, broadcasting over the leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(bias).numel();
        if self.value(bias).ndim() != 1 || self.shape(x).last() != Some(&n) {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(bias))));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v = *v + *bb;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddBias(x, bias), needs))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by `s`.
    pub fn grad_scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).clone();
        let needs = self.needs(x);
        self.push(value, Op::GradScale(x, T::of(s)), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).numel() as f64);
        let s = self.value(x).sum() / n;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("mean_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let inv = T::one() / T::of(len as f64);
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i] * inv;
                }
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::MeanAxis { x, outer, len, inner }, needs))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} along axis {axis}")));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&sizes) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { inputs: inputs.to_vec(), outer, inner, sizes }, needs))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("narrow", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * full + start) * inner;
            out.extend_from_slice(&src[b..b + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Narrow { x, outer, len: full, inner, start }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Reorder axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} on {shape:?}")));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for_each_permuted(&shape, perm, |o, i| out[o] = src[i]);
        let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Permute { x, perm: perm.to_vec() }, needs))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).fold(T::neg_infinity(), |m, l| m.max(out[at(l)]));
                let mut z = T::zero();
                for l in 0..len {
                    let e = (out[at(l)] - m).exp();
                    out[at(l)] = e;
                    z = z + e;
                }
                for l in 0..len {
                    out[at(l)] = out[at(l)] / z;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, outer, len, inner }, needs))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("{shape:?} with gamma {:?} beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = T::of(eps);
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        let nd = T::of(d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / nd;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nd;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, needs))
    }

    /// Batch normalisation with statistics per index of `channel_axis`, pooled
    /// over every other axis. In [`NormMode::Train`] the running statistics
    /// (buffers `running_mean`, `running_var`) receive a momentum update via
    /// [`Graph::take_buffer_updates`]; the unbiased batch variance is tracked.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &ParamStore<T>,
        running: (ParamId, ParamId),
        channel_axis: usize,
        mode: NormMode,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if channel_axis >= shape.len() {
            return Err(Error::shape("batch_norm", format!("channel axis {channel_axis} of {shape:?}")));
        }
        let (outer, channels, inner) = split_axis(&shape, channel_axis);
        for v in [gamma, beta] {
            if self.value(v).numel() != channels {
                return Err(Error::shape("batch_norm", format!("{shape:?} with affine {:?}", self.shape(v))));
            }
        }
        let count = outer * inner;
        if count == 0 {
            return Err(Error::usage("batch_norm over an empty batch"));
        }
        let eps = T::of(eps);
        let src = self.value(x).data();
        let (mean, var) = match mode {
            NormMode::Train => {
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                let n = T::of(count as f64);
                for c in 0..channels {
                    let mut s = T::zero();
                    for o in 0..outer {
                        let b = (o * channels + c) * inner;
                        s = s + src[b..b + inner].iter().copied().sum::<T>();
                    }
                    let m = s / n;
                    let mut q = T::zero();
                    for o in 0..outer {
                        let b = (o * channels + c) * inner;
                        q = q + src[b..b + inner].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                    }
                    mean[c] = m;
                    var[c] = q / n;
                }
                (mean, var)
            }
            NormMode::Eval => (
                store.value(running.0).data().to_vec(),
                store.value(running.1).data().to_vec(),
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                for i in base..base + inner {
                    let h = (src[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = h * g[c] + b[c];
                }
            }
        }
        let train = mode == NormMode::Train;
        if train {
            let mom = T::of(momentum);
            let unbias = if count > 1 { T::of(count as f64 / (count as f64 - 1.0)) } else { T::one() };
            let rm: Vec<T> = store
                .value(running.0)
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &m)| (T::one() - mom) * r + mom * m)
                .collect();
            let rv: Vec<T> = store
                .value(running.1)
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &v)| (T::one() - mom) * r + mom * v * unbias)
                .collect();
            self.schedule_buffer(running.0, Tensor::new(&[channels], rm)?);
            self.schedule_buffer(running.1, Tensor::new(&[channels], rv)?);
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, outer, channels, inner, train },
            needs,
        ))
    }

    /// Mean cross-entropy of `logits[B×K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || shape[0] == 0 {
            return Err(Error::shape("cross_entropy", format!("logits {shape:?} with {} targets", targets.len())));
        }
        let k = shape[1];
        if let Some(t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::usage(format!("target class {t} out of range for {k} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); src.len()];
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * k..(r + 1) * k];
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - m).exp() / z;
            }
            loss = loss - (row[t] - m - z.ln());
        }
        let loss = loss / T::of(targets.len() as f64);
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, needs))
    }

    /// Divide each slice along axis 0 by its maximum absolute entry, floored
    /// at `floor`.
    pub fn max_abs_normalize(&mut self, x: Var, floor: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let batch = *shape.first().ok_or_else(|| Error::shape("max_abs_normalize", "scalar input"))?;
        let per = if batch == 0 { 0 } else { self.value(x).numel() / batch };
        let floor = T::of(floor);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut denom = Vec::with_capacity(batch);
        let mut argmax = Vec::with_capacity(batch);
        for b in 0..batch {
            let s = &src[b * per..(b + 1) * per];
            let (mut best, mut at) = (T::zero(), 0usize);
            for (i, v) in s.iter().enumerate() {
                if v.abs() > best {
                    best = v.abs();
                    at = i;
                }
            }
            let (d, arg) = if best > floor { (best, Some(b * per + at)) } else { (floor, None) };
            for i in 0..per {
                out[b * per + i] = s[i] / d;
            }
            denom.push(d);
            argmax.push(arg);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaxAbsNormalize { x, denom, argmax }, needs))
    }
}
