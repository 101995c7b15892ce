//! Parameterised building blocks over the autodiff [`Graph`].

use rand::Rng;

use crate::autodiff::{Graph, NormMode, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Affine map over the last axis: `y = x·W + b`, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_kaiming(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng)?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?) } else { None };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let rows = shape.iter().product::<usize>() / self.in_dim.max(1);
        let flat = g.reshape(x, &[rows, self.in_dim])?;
        let w = g.param(store, self.weight);
        let mut y = g.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = g.param(store, b);
            y = g.add_bias(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-scalar input") = self.out_dim;
        g.reshape(y, &out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, NORM_EPS)
    }
}

/// Batch normalisation with learned scale/shift and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channel_axis: usize,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, channel_axis: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]))?,
            channel_axis,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: NormMode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm(
            x,
            gamma,
            beta,
            store,
            (self.running_mean, self.running_var),
            self.channel_axis,
            mode,
            NORM_EPS,
            BN_MOMENTUM,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let weight = store.add_kaiming(format!("{name}.weight"), &[cout, cin, kernel, kernel], fan_in, rng)?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?) } else { None };
        Ok(Self { weight, bias, stride, pad })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}
