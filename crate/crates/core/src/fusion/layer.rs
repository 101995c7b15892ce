use rand::Rng;

use super::attention::{check_tokens, split_heads, MultiHeadAttention};
use super::FusionVariant;
use crate::autodiff::{Graph, NormMode, Var};
use crate::error::Result;
use crate::nn::{BatchNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Output of a fusion layer.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    /// `[B, C]`.
    pub vector: Var,
    /// Token importances `[B, h, n]` (before-attention) or `[n]` (after).
    pub weights: Var,
}

/// Fusion before attention: the per-head queries of all `m` tokens are first
/// mixed into one query by learned coefficients, which then scores the `n`
/// keys; batch-normalised scores pass through a softmax and weight the values.
#[derive(Clone, Debug)]
pub struct FuseBefore {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// Query mixing coefficients `[h, m]`, initialised to `1/m`.
    pub lin: ParamId,
    pub bn: BatchNorm,
    pub heads: usize,
    pub tokens: usize,
}

impl FuseBefore {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        tokens: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            lin: store.add(format!("{name}.lin"), Tensor::full(&[heads, tokens], T::of(1.0 / tokens as f64)))?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), heads * tokens, 1)?,
            heads,
            tokens,
        })
    }

    /// The mixed query per head, `[B·h, 1, c]`.
    pub fn combined_query<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (b, n) = check_tokens(g, x, self.q.in_dim, "fuse_before")?;
        if n != self.tokens {
            return Err(crate::error::Error::shape("fuse_before", format!("expected {} tokens, got {n}", self.tokens)));
        }
        let (h, c) = (self.heads, self.q.out_dim / self.heads);
        let q = self.q.forward(g, store, x)?;
        let q = g.reshape(q, &[b, n, h, c])?;
        let q = g.permute(q, &[2, 1, 0, 3])?;
        let q = g.reshape(q, &[h, n, b * c])?;
        let lin = g.param(store, self.lin);
        let lin = g.reshape(lin, &[h, 1, n])?;
        let mixed = g.bmm(lin, q, false, false)?;
        let mixed = g.reshape(mixed, &[h, b, c])?;
        let mixed = g.permute(mixed, &[1, 0, 2])?;
        g.reshape(mixed, &[b * h, 1, c])
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: NormMode) -> Result<Fused> {
        let query = self.combined_query(g, store, x)?;
        let (b, n) = (g.shape(x)[0], self.tokens);
        let h = self.heads;
        let k = self.k.forward(g, store, x)?;
        let k = split_heads(g, k, h)?;
        let raw = g.bmm(query, k, false, true)?;
        let raw = g.reshape(raw, &[b, h * n])?;
        let normed = self.bn.forward(g, store, raw, mode)?;
        let normed = g.reshape(normed, &[b, h, n])?;
        let weights = g.softmax(normed, 2)?;
        let v = self.v.forward(g, store, x)?;
        let v = split_heads(g, v, h)?;
        let w = g.reshape(weights, &[b * h, 1, n])?;
        let heads = g.bmm(w, v, false, false)?;
        let vector = g.reshape(heads, &[b, self.q.out_dim])?;
        Ok(Fused { vector, weights })
    }
}

/// Fusion after attention: full multi-head attention over the tokens, then a
/// learned convex-initialised combination of the `n` outputs.
#[derive(Clone, Debug)]
pub struct FuseAfter {
    pub attn: MultiHeadAttention,
    /// Token weights `[n]`, initialised to `1/n`.
    pub mix: ParamId,
    pub tokens: usize,
}

impl FuseAfter {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        tokens: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            mix: store.add(format!("{name}.mix"), Tensor::full(&[tokens], T::of(1.0 / tokens as f64)))?,
            tokens,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Fused> {
        let (b, n) = check_tokens(g, x, self.attn.q.in_dim, "fuse_after")?;
        if n != self.tokens {
            return Err(crate::error::Error::shape("fuse_after", format!("expected {} tokens, got {n}", self.tokens)));
        }
        let c = self.attn.out.out_dim;
        let a = self.attn.forward(g, store, x)?;
        let a = g.permute(a, &[1, 0, 2])?;
        let a = g.reshape(a, &[n, b * c])?;
        let weights = g.param(store, self.mix);
        let w = g.reshape(weights, &[1, n])?;
        let fused = g.matmul(w, a)?;
        let vector = g.reshape(fused, &[b, c])?;
        Ok(Fused { vector, weights })
    }
}

#[derive(Clone, Debug)]
pub enum FusionLayer {
    Before(FuseBefore),
    After(FuseAfter),
}

impl FusionLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        variant: FusionVariant,
        dim: usize,
        heads: usize,
        tokens: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match variant {
            FusionVariant::Before => Self::Before(FuseBefore::new(store, name, dim, heads, tokens, rng)?),
            FusionVariant::After => Self::After(FuseAfter::new(store, name, dim, heads, tokens, rng)?),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: NormMode) -> Result<Fused> {
        match self {
            Self::Before(f) => f.forward(g, store, x, mode),
            Self::After(f) => f.forward(g, store, x),
        }
    }
}
