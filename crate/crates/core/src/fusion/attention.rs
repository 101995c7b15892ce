use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// `[B, n, C]` to per-head `[B·h, n, c]`.
pub(crate) fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, c) = (s[0], s[1], s[2] / heads);
    let x = g.reshape(x, &[b, n, heads, c])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, n, c])
}

/// Inverse of [`split_heads`]: heads are concatenated along the feature axis.
pub(crate) fn merge_heads<T: Real>(g: &mut Graph<T>, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, c) = (s[1], s[2]);
    let x = g.reshape(x, &[batch, heads, n, c])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch, n, heads * c])
}

pub(crate) fn check_tokens<T: Real>(g: &Graph<T>, x: Var, dim: usize, op: &'static str) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 || s[2] != dim {
        return Err(Error::shape(op, format!("expected [B, n, {dim}], got {s:?}")));
    }
    if s[1] == 0 {
        return Err(Error::usage(format!("{op} needs at least one token")));
    }
    Ok((s[0], s[1]))
}

/// Scaled dot-product multi-head self-attention with an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng)?,
            heads,
        })
    }

    /// `[B, n, C] → [B, n, C]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (b, _) = check_tokens(g, x, self.q.in_dim, "attention")?;
        let c = self.q.out_dim / self.heads;
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let q = split_heads(g, q, self.heads)?;
        let k = split_heads(g, k, self.heads)?;
        let v = split_heads(g, v, self.heads)?;
        let scores = g.bmm(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
        let att = g.softmax(scores, 2)?;
        let heads = g.bmm(att, v, false, false)?;
        let merged = merge_heads(g, heads, b, self.heads)?;
        self.out.forward(g, store, merged)
    }
}

/// Pre-norm transformer layer: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, mlp_hidden, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let h = self.attn.forward(g, store, h)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, store, x)?;
        let h = self.mlp.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// A stack of transformer layers followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNorm,
}

impl AttnBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        depth: usize,
        mlp_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| TransformerLayer::new(store, &format!("{name}.layer{i}"), dim, heads, mlp_hidden, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, norm: LayerNorm::new(store, &format!("{name}.norm"), dim)? })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, store, x)?;
        }
        self.norm.forward(g, store, x)
    }
}

/// Shared linear projection of flattened patches plus a learned position
/// embedding per token; no class token.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub position: Option<ParamId>,
    pub tokens: usize,
}

impl PatchEmbed {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        patch_dim: usize,
        tokens: usize,
        dim: usize,
        positional: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let proj = Linear::new(store, &format!("{name}.proj"), patch_dim, dim, true, rng)?;
        let position = if positional {
            Some(store.add(format!("{name}.position"), Tensor::rand_uniform(&[tokens, dim], -0.02, 0.02, rng))?)
        } else {
            None
        };
        Ok(Self { proj, position, tokens })
    }

    /// `[B, N, P·P·M] → [B, N, C]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, patches: Var) -> Result<Var> {
        let (b, n) = check_tokens(g, patches, self.proj.in_dim, "patch_embed")?;
        if n != self.tokens {
            return Err(Error::shape("patch_embed", format!("expected {} patches, got {n}", self.tokens)));
        }
        let x = self.proj.forward(g, store, patches)?;
        let Some(pos) = self.position else { return Ok(x) };
        let c = self.proj.out_dim;
        let flat = g.reshape(x, &[b, n * c])?;
        let p = g.param(store, pos);
        let p = g.reshape(p, &[n * c])?;
        let y = g.add_bias(flat, p)?;
        g.reshape(y, &[b, n, c])
    }
}
