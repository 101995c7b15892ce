use super::AuBox;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Bilinear crop of each sample's box out of `stack: [B, M, h, w]`, resized to
/// `target = (H, W)`. Channels named in `displacement` (x channel, y channel)
/// are pixel displacements and get multiplied by the resize ratio.
pub fn crop_resize_batch<T: Real>(
    g: &mut Graph<T>,
    stack: Var,
    boxes: &[AuBox],
    target: (usize, usize),
    displacement: Option<(usize, usize)>,
) -> Result<Var> {
    let s = g.shape(stack).to_vec();
    if s.len() != 4 || s[0] != boxes.len() {
        return Err(Error::shape("crop_resize", format!("stack {s:?} with {} boxes", boxes.len())));
    }
    let (b, m, h, w) = (s[0], s[1], s[2], s[3]);
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::usage("crop target size must be positive"));
    }
    let mut coords = Vec::with_capacity(b * th * tw * 2);
    for bx in boxes {
        if !(bx.area() > 0.0) || !bx.intersects_image(w, h) {
            return Err(Error::Geometry(format!("box {bx:?} does not intersect the {w}x{h} image")));
        }
        let (sx, sy) = (bx.width() / tw as f64, bx.height() / th as f64);
        for i in 0..th {
            for j in 0..tw {
                coords.push(T::of(bx.x0 + (j as f64 + 0.5) * sx - 0.5));
                coords.push(T::of(bx.y0 + (i as f64 + 0.5) * sy - 0.5));
            }
        }
    }
    let grid = g.input(Tensor::new(&[b, th, tw, 2], coords)?);
    let out = g.grid_sample(stack, grid)?;
    let Some((cx, cy)) = displacement else { return Ok(out) };
    if cx >= m || cy >= m {
        return Err(Error::shape("crop_resize", format!("displacement channels ({cx}, {cy}) of {m}")));
    }
    let plane = th * tw;
    let mut scale = vec![T::one(); b * m * plane];
    for (n, bx) in boxes.iter().enumerate() {
        for (c, ratio) in [(cx, tw as f64 / bx.width()), (cy, th as f64 / bx.height())] {
            let base = (n * m + c) * plane;
            scale[base..base + plane].fill(T::of(ratio));
        }
    }
    let scale = g.input(Tensor::new(&[b, m, th, tw], scale)?);
    g.mul(out, scale)
}

/// Single-sample [`crop_resize_batch`] on `[M, h, w]`.
pub fn crop_resize<T: Real>(
    stack: &Tensor<T>,
    bx: &AuBox,
    target: (usize, usize),
    displacement: Option<(usize, usize)>,
) -> Result<Tensor<T>> {
    let s = stack.shape();
    if s.len() != 3 {
        return Err(Error::shape("crop_resize", format!("expected [M, h, w], got {s:?}")));
    }
    let mut g = Graph::new();
    let x = g.input(stack.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let y = crop_resize_batch(&mut g, x, &[*bx], target, displacement)?;
    g.value(y).clone().reshape(&[s[0], target.0, target.1])
}

fn check_divisible(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::usage(format!("region {h}x{w} is not divisible into {p}x{p} patches")));
    }
    Ok(())
}

/// Row-major tiling of `[M, H, W]` into `[N, P, P, M]`.
pub fn patchify<T: Real>(region: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = region.shape();
    if s.len() != 3 {
        return Err(Error::shape("patchify", format!("expected [M, H, W], got {s:?}")));
    }
    let (m, h, w) = (s[0], s[1], s[2]);
    check_divisible(h, w, p)?;
    let (nh, nw) = (h / p, w / p);
    let src = region.data();
    let mut out = Vec::with_capacity(src.len());
    for r in 0..nh {
        for c in 0..nw {
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..m {
                        out.push(src[(ch * h + r * p + y) * w + c * p + x]);
                    }
                }
            }
        }
    }
    Tensor::new(&[nh * nw, p, p, m], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(patches: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = patches.shape();
    if s.len() != 4 || s[1] != s[2] {
        return Err(Error::shape("unpatchify", format!("expected [N, P, P, M], got {s:?}")));
    }
    let (n, p, m) = (s[0], s[1], s[3]);
    check_divisible(h, w, p)?;
    let nw = w / p;
    if n != (h / p) * nw {
        return Err(Error::shape("unpatchify", format!("{n} patches cannot tile {h}x{w}")));
    }
    let src = patches.data();
    let mut out = vec![T::zero(); m * h * w];
    for (k, patch) in src.chunks_exact(p * p * m).enumerate() {
        let (r, c) = (k / nw, k % nw);
        for y in 0..p {
            for x in 0..p {
                for ch in 0..m {
                    out[(ch * h + r * p + y) * w + c * p + x] = patch[(y * p + x) * m + ch];
                }
            }
        }
    }
    Tensor::new(&[m, h, w], out)
}

/// Graph form of [`patchify`]: `[B, M, H, W]` to tokens `[B, N, P·P·M]`
/// flattened in the same `(y, x, channel)` order.
pub fn patch_tokens<T: Real>(g: &mut Graph<T>, x: Var, p: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("patch_tokens", format!("expected [B, M, H, W], got {s:?}")));
    }
    let (b, m, h, w) = (s[0], s[1], s[2], s[3]);
    check_divisible(h, w, p)?;
    let (nh, nw) = (h / p, w / p);
    let x = g.reshape(x, &[b, m, nh, p, nw, p])?;
    let x = g.permute(x, &[0, 2, 4, 3, 5, 1])?;
    g.reshape(x, &[b, nh * nw, p * p * m])
}
