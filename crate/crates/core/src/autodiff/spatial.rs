//! Image-shaped operations: convolution, upsampling and bilinear sampling.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output positions `o` in `0..out` whose input index `o·stride + off − pad` lies in `0..len`.
fn valid_range(off: usize, pad: usize, stride: usize, len: usize, out: usize) -> std::ops::Range<usize> {
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    let hi = if len + pad > off { ((len + pad - off - 1) / stride + 1).min(out) } else { 0 };
    lo.min(hi)..hi
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let ys = valid_range(ky, g.pad, g.stride, g.h, g.ho);
            for kx in 0..g.k {
                let xs = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if !ys.contains(&oy) || xs.is_empty() {
                        line.fill(T::zero());
                        continue;
                    }
                    line[..xs.start].fill(T::zero());
                    line[xs.end..].fill(T::zero());
                    let iy = oy * g.stride + ky - g.pad;
                    let base = iy * g.w + xs.start * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[xs.clone()].copy_from_slice(&plane[base..base + xs.len()]);
                    } else {
                        for (i, v) in line[xs.clone()].iter_mut().enumerate() {
                            *v = plane[base + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let ys = valid_range(ky, g.pad, g.stride, g.h, g.ho);
            for kx in 0..g.k {
                let xs = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky - g.pad;
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xs.clone() {
                        let at = iy * g.w + ox * g.stride + kx - g.pad;
                        plane[at] = plane[at] + line[ox];
                    }
                }
            }
        }
    }
}

/// Bilinear tap positions and weights for one sample location with border
/// clamping. The `d/dx`, `d/dy` flags are false where clamping was active.
#[derive(Clone, Copy)]
struct Taps<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    live_x: bool,
    live_y: bool,
}

fn taps<T: Real>(x: T, y: T, w: usize, h: usize) -> Taps<T> {
    let (wmax, hmax) = (T::of((w - 1) as f64), T::of((h - 1) as f64));
    let live_x = x >= T::zero() && x <= wmax;
    let live_y = y >= T::zero() && y <= hmax;
    let xc = x.max(T::zero()).min(wmax);
    let yc = y.max(T::zero()).min(hmax);
    let x0f = xc.floor();
    let y0f = yc.floor();
    let x0 = x0f.to_usize().unwrap_or(0).min(w - 1);
    let y0 = y0f.to_usize().unwrap_or(0).min(h - 1);
    Taps {
        x0,
        y0,
        x1: (x0 + 1).min(w - 1),
        y1: (y0 + 1).min(h - 1),
        fx: xc - x0f,
        fy: yc - y0f,
        live_x,
        live_y,
    }
}

impl<T: Real> Graph<T> {
    /// 2-d cross-correlation. `x: [B, Cin, H, W]`, `w: [Cout, Cin, k, k]`,
    /// optional `bias: [Cout]`. Output spatial size is
    /// `floor((H + 2·pad − k) / stride) + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || stride == 0 {
            return Err(Error::shape("conv2d", format!("input {sx:?} with kernel {sw:?}, stride {stride}")));
        }
        let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k}x{k} larger than padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        if let Some(bv) = bias {
            if self.value(bv).numel() != cout {
                return Err(Error::shape("conv2d", format!("bias {:?} for {cout} channels", self.shape(bv))));
            }
        }
        let g = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let (rows, ncols) = (g.rows(), g.cols());
        let mut out = vec![T::zero(); b * cout * ncols];
        let mut cols = vec![T::zero(); rows * ncols];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            for bi in 0..b {
                im2col(&xd[bi * cin * h * wd..(bi + 1) * cin * h * wd], &g, &mut cols);
                T::gemm(cout, rows, ncols, wdat, false, &cols, false, T::zero(), &mut out[bi * cout * ncols..(bi + 1) * cout * ncols]);
            }
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for bi in 0..b {
                    for c in 0..cout {
                        let base = (bi * cout + c) * ncols;
                        for v in &mut out[base..base + ncols] {
                            *v = *v + bd[c];
                        }
                    }
                }
            }
        }
        self.count_macs(b * cout * rows * ncols);
        let needs = self.needs(x) || self.needs(w) || bias.is_some_and(|v| self.needs(v));
        Ok(self.push(Tensor::new(&[b, cout, g.ho, g.wo], out)?, Op::Conv2d { x, w, b: bias, stride, pad }, needs))
    }

    /// Nearest-neighbour upsampling of `[B, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape("upsample_nearest", format!("{s:?} by {factor}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(p * ho + y) * wo + xx] = src[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&[s[0], s[1], ho, wo], out)?, Op::Upsample { x, factor }, needs))
    }

    /// Bilinear sampling of `img: [B, M, H, W]` at pixel coordinates
    /// `coords: [B, Ho, Wo, 2]` holding `(x, y)`. Out-of-range coordinates
    /// are clamped to the border. Differentiable in both arguments.
    pub fn grid_sample(&mut self, img: Var, coords: Var) -> Result<Var> {
        let (si, sc) = (self.shape(img).to_vec(), self.shape(coords).to_vec());
        if si.len() != 4 || sc.len() != 4 || sc[3] != 2 || si[0] != sc[0] || si[2] == 0 || si[3] == 0 {
            return Err(Error::shape("grid_sample", format!("image {si:?} with coords {sc:?}")));
        }
        let (b, m, h, w) = (si[0], si[1], si[2], si[3]);
        let (ho, wo) = (sc[1], sc[2]);
        let id = self.value(img).data();
        let cd = self.value(coords).data();
        let mut out = vec![T::zero(); b * m * ho * wo];
        let one = T::one();
        for bi in 0..b {
            for p in 0..ho * wo {
                let c = (bi * ho * wo + p) * 2;
                let t = taps(cd[c], cd[c + 1], w, h);
                for ch in 0..m {
                    let plane = &id[(bi * m + ch) * h * w..(bi * m + ch + 1) * h * w];
                    let top = (one - t.fx) * plane[t.y0 * w + t.x0] + t.fx * plane[t.y0 * w + t.x1];
                    let bot = (one - t.fx) * plane[t.y1 * w + t.x0] + t.fx * plane[t.y1 * w + t.x1];
                    out[(bi * m + ch) * ho * wo + p] = (one - t.fy) * top + t.fy * bot;
                }
            }
        }
        let needs = self.needs(img) || self.needs(coords);
        Ok(self.push(Tensor::new(&[b, m, ho, wo], out)?, Op::GridSample { img, coords }, needs))
    }
}

pub(crate) fn conv2d_backward<T: Real>(
    graph: &Graph<T>,
    x: Var,
    w: Var,
    gout: &[T],
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let sx = graph.shape(x);
    let sw = graph.shape(w);
    let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
    let (cout, k) = (sw[0], sw[2]);
    let g = ConvGeom {
        cin,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (wd + 2 * pad - k) / stride + 1,
    };
    let (rows, ncols) = (g.rows(), g.cols());
    let xd = graph.value(x).data();
    let wdat = graph.value(w).data();
    let mut dx = need_x.then(|| vec![T::zero(); xd.len()]);
    let mut dw = need_w.then(|| vec![T::zero(); wdat.len()]);
    let mut cols = vec![T::zero(); rows * ncols];
    for bi in 0..b {
        let go = &gout[bi * cout * ncols..(bi + 1) * cout * ncols];
        if let Some(dw) = dw.as_mut() {
            im2col(&xd[bi * cin * h * wd..(bi + 1) * cin * h * wd], &g, &mut cols);
            // dW += dOut · colsᵀ
            T::gemm(cout, ncols, rows, go, false, &cols, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            // dCols = Wᵀ · dOut
            T::gemm(rows, cout, ncols, wdat, true, go, false, T::zero(), &mut cols);
            col2im(&cols, &g, &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd]);
        }
    }
    (dx, dw)
}

pub(crate) fn upsample_backward<T: Real>(shape_in: &[usize], factor: usize, gout: &[T]) -> Vec<T> {
    let (planes, h, w) = (shape_in[0] * shape_in[1], shape_in[2], shape_in[3]);
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..ho {
            for xx in 0..wo {
                let at = (p * h + y / factor) * w + xx / factor;
                dx[at] = dx[at] + gout[(p * ho + y) * wo + xx];
            }
        }
    }
    dx
}

pub(crate) fn grid_sample_backward<T: Real>(
    graph: &Graph<T>,
    img: Var,
    coords: Var,
    gout: &[T],
    need_img: bool,
    need_coords: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let si = graph.shape(img);
    let sc = graph.shape(coords);
    let (b, m, h, w) = (si[0], si[1], si[2], si[3]);
    let (ho, wo) = (sc[1], sc[2]);
    let id = graph.value(img).data();
    let cd = graph.value(coords).data();
    let mut dimg = need_img.then(|| vec![T::zero(); id.len()]);
    let mut dcoords = need_coords.then(|| vec![T::zero(); cd.len()]);
    let one = T::one();
    for bi in 0..b {
        for p in 0..ho * wo {
            let c = (bi * ho * wo + p) * 2;
            let t = taps(cd[c], cd[c + 1], w, h);
            let (mut gx, mut gy) = (T::zero(), T::zero());
            for ch in 0..m {
                let go = gout[(bi * m + ch) * ho * wo + p];
                let base = (bi * m + ch) * h * w;
                if let Some(di) = dimg.as_mut() {
                    let w00 = (one - t.fx) * (one - t.fy);
                    let w01 = t.fx * (one - t.fy);
                    let w10 = (one - t.fx) * t.fy;
                    let w11 = t.fx * t.fy;
                    di[base + t.y0 * w + t.x0] = di[base + t.y0 * w + t.x0] + go * w00;
                    di[base + t.y0 * w + t.x1] = di[base + t.y0 * w + t.x1] + go * w01;
                    di[base + t.y1 * w + t.x0] = di[base + t.y1 * w + t.x0] + go * w10;
                    di[base + t.y1 * w + t.x1] = di[base + t.y1 * w + t.x1] + go * w11;
                }
                if dcoords.is_some() {
                    let plane = &id[base..base + h * w];
                    let (v00, v01) = (plane[t.y0 * w + t.x0], plane[t.y0 * w + t.x1]);
                    let (v10, v11) = (plane[t.y1 * w + t.x0], plane[t.y1 * w + t.x1]);
                    if t.live_x {
                        gx = gx + go * ((one - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                    }
                    if t.live_y {
                        gy = gy + go * ((one - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
                    }
                }
            }
            if let Some(dc) = dcoords.as_mut() {
                dc[c] = dc[c] + gx;
                dc[c + 1] = dc[c + 1] + gy;
            }
        }
    }
    (dimg, dcoords)
}
