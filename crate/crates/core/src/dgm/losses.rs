//! Reconstruction, normalisation and smoothing losses on displacement fields.
//!
//! Fields are `[B, 2, H, W]`; the L1 norm of each 2-vector is used, and all
//! losses are averaged over the batch.

use super::{warp, DgmLossWeights, DgmOutput};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn field_dims<T: Real>(g: &Graph<T>, field: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = g.shape(field);
    if s.len() != 4 || s[1] != 2 {
        return Err(Error::shape(op, format!("expected [B, 2, H, W], got {s:?}")));
    }
    Ok((s[0], s[2], s[3]))
}

/// Mean absolute difference over all pixels and channels.
pub fn loss_rec<T: Real>(g: &mut Graph<T>, apex_hat: Var, apex: Var) -> Result<Var> {
    let d = g.sub(apex_hat, apex)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// `(1 / wh) Σ (|Dˣ| + |Dʸ|)`.
pub fn loss_nm<T: Real>(g: &mut Graph<T>, field: Var) -> Result<Var> {
    let (b, h, w) = field_dims(g, field, "loss_nm")?;
    let a = g.abs(field);
    let s = g.sum(a);
    Ok(g.scale(s, 1.0 / (b * h * w) as f64))
}

/// Mean absolute horizontal neighbour difference (over `h(w−1)` pairs) plus
/// mean absolute vertical difference (over `w(h−1)` pairs).
pub fn loss_sm<T: Real>(g: &mut Graph<T>, field: Var) -> Result<Var> {
    let (b, h, w) = field_dims(g, field, "loss_sm")?;
    if h < 2 || w < 2 {
        return Err(Error::usage(format!("smoothing loss needs a field of at least 2x2, got {h}x{w}")));
    }
    let right = g.narrow(field, 3, 1, w - 1)?;
    let left = g.narrow(field, 3, 0, w - 1)?;
    let dx = g.sub(right, left)?;
    let dx = g.abs(dx);
    let sx = g.sum(dx);
    let sx = g.scale(sx, 1.0 / (b * h * (w - 1)) as f64);
    let below = g.narrow(field, 2, 1, h - 1)?;
    let above = g.narrow(field, 2, 0, h - 1)?;
    let dy = g.sub(below, above)?;
    let dy = g.abs(dy);
    let sy = g.sum(dy);
    let sy = g.scale(sy, 1.0 / (b * w * (h - 1)) as f64);
    g.add(sx, sy)
}

#[derive(Clone, Copy, Debug)]
pub struct DgmLosses {
    pub rec: Var,
    pub nm: Var,
    pub sm: Var,
    pub total: Var,
    /// The reconstructed apex.
    pub apex_hat: Var,
}

impl DgmLosses {
    /// `(rec, nm, sm, total)` as plain numbers.
    pub fn values<T: Real>(&self, g: &Graph<T>) -> [f64; 4] {
        [self.rec, self.nm, self.sm, self.total].map(|v| g.value(v).item().f64())
    }
}

/// `λ_rec·L_rec + λ_nm·L_nm + λ_sm·L_sm` for a DGM forward output.
pub fn loss_dgm<T: Real>(
    g: &mut Graph<T>,
    onset: Var,
    apex: Var,
    out: &DgmOutput,
    weights: &DgmLossWeights,
) -> Result<DgmLosses> {
    let apex_hat = warp(g, onset, out.pixel_field)?;
    let rec = loss_rec(g, apex_hat, apex)?;
    let nm = loss_nm(g, out.loss_field)?;
    let sm = loss_sm(g, out.loss_field)?;
    let total = weighted_sum(g, rec, nm, sm, weights)?;
    Ok(DgmLosses { rec, nm, sm, total, apex_hat })
}

pub(crate) fn weighted_sum<T: Real>(
    g: &mut Graph<T>,
    rec: Var,
    nm: Var,
    sm: Var,
    weights: &DgmLossWeights,
) -> Result<Var> {
    let a = g.scale(rec, weights.lambda_rec);
    let b = g.scale(nm, weights.lambda_nm);
    let c = g.scale(sm, weights.lambda_sm);
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

/// Eager helpers that evaluate a loss on plain tensors.
pub mod eval {
    use super::*;

    pub fn rec<T: Real>(apex_hat: &Tensor<T>, apex: &Tensor<T>) -> Result<f64> {
        let mut g = Graph::new();
        let (a, b) = (g.input(apex_hat.clone()), g.input(apex.clone()));
        let l = loss_rec(&mut g, a, b)?;
        Ok(g.value(l).item().f64())
    }

    /// `field` is `[B, 2, H, W]`.
    pub fn nm<T: Real>(field: &Tensor<T>) -> Result<f64> {
        let mut g = Graph::new();
        let f = g.input(field.clone());
        let l = loss_nm(&mut g, f)?;
        Ok(g.value(l).item().f64())
    }

    pub fn sm<T: Real>(field: &Tensor<T>) -> Result<f64> {
        let mut g = Graph::new();
        let f = g.input(field.clone());
        let l = loss_sm(&mut g, f)?;
        Ok(g.value(l).item().f64())
    }

    /// Weighted total from already-computed components.
    pub fn total(rec: f64, nm: f64, sm: f64, weights: &DgmLossWeights) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let (r, n, s) = (g.input(Tensor::scalar(rec)), g.input(Tensor::scalar(nm)), g.input(Tensor::scalar(sm)));
        let t = weighted_sum(&mut g, r, n, s, weights)?;
        Ok(g.value(t).item())
    }
}
