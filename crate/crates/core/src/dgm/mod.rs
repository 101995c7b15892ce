//! Displacement generation: an encoder–decoder that maps an onset/apex pair
//! to a dense displacement field, the warp it drives, and its training losses.
//!
//! Coordinate conventions used throughout:
//!
//! * The network's `tanh` output `t ∈ [-1, 1]` is in normalised image units.
//!   The loss field is `α·t`; the pixel field is `α·t·(w, h)`.
//! * Warping is backward: `apex_hat(y, x) = onset(x + Dˣ(y, x), y + Dʸ(y, x))`,
//!   so a pattern that moves right by `s` pixels has `Dˣ = −s` over its new
//!   location.
//! * The features handed to the classifier are `t` divided by its per-sample
//!   maximum absolute component (when normalisation is enabled).

mod flow_io;
pub mod losses;
mod sampler;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use flow_io::{flow_to_rgb, read_raw_field, write_flow_png, write_raw_field, COLOR_WHEEL_SEGMENTS};
pub use losses::{loss_dgm, loss_nm, loss_rec, loss_sm, DgmLosses};
pub use sampler::{sample_pair_indices, sample_self_supervised_pairs};

use crate::autodiff::{Graph, NormMode, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Floor for the per-sample maximum in feature normalisation.
pub const NORMALIZE_FLOOR: f64 = 1e-6;

/// Onset and apex frames of one sample, `[M, h, w]` each with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct FramePair<T> {
    pub onset: Tensor<T>,
    pub apex: Tensor<T>,
    pub subject_id: String,
    /// Class index; `None` for self-supervised pairs.
    pub label: Option<usize>,
}

impl<T: Real> FramePair<T> {
    pub fn new(onset: Tensor<T>, apex: Tensor<T>, subject_id: impl Into<String>, label: Option<usize>) -> Result<Self> {
        if onset.shape() != apex.shape() || onset.ndim() != 3 {
            return Err(Error::shape("frame_pair", format!("onset {:?} vs apex {:?}", onset.shape(), apex.shape())));
        }
        let in_range = |t: &Tensor<T>| t.data().iter().all(|&v| v >= T::zero() && v <= T::one());
        if !in_range(&onset) || !in_range(&apex) {
            return Err(Error::usage("frame pixel values must lie in [0, 1]"));
        }
        Ok(Self { onset, apex, subject_id: subject_id.into(), label })
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.onset.shape();
        (s[0], s[1], s[2])
    }
}

/// Per-pixel displacement in pixels, `values: [h, w, 2]` holding `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField<T> {
    pub values: Tensor<T>,
    pub alpha: f64,
}

impl<T: Real> DisplacementField<T> {
    pub fn zeros(h: usize, w: usize, alpha: f64) -> Self {
        Self { values: Tensor::zeros(&[h, w, 2]), alpha }
    }

    pub fn constant(h: usize, w: usize, dx: f64, dy: f64, alpha: f64) -> Self {
        let mut data = Vec::with_capacity(h * w * 2);
        for _ in 0..h * w {
            data.push(T::of(dx));
            data.push(T::of(dy));
        }
        Self { values: Tensor::new(&[h, w, 2], data).expect("sized"), alpha }
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// Largest admissible component magnitude, `α · max(h, w)`.
    pub fn bound(&self) -> f64 {
        self.alpha * self.height().max(self.width()) as f64
    }

    /// `[1, 2, h, w]` layout used by the graph operations.
    pub fn to_channels_first(&self) -> Tensor<T> {
        let (h, w) = (self.height(), self.width());
        let v = self.values.data();
        let mut out = vec![T::zero(); 2 * h * w];
        for p in 0..h * w {
            out[p] = v[2 * p];
            out[h * w + p] = v[2 * p + 1];
        }
        Tensor::new(&[1, 2, h, w], out).expect("sized")
    }

    /// Inverse of [`DisplacementField::to_channels_first`] for sample `b`.
    pub fn from_channels_first(t: &Tensor<T>, b: usize, alpha: f64) -> Self {
        let s = t.shape();
        let (h, w) = (s[2], s[3]);
        let base = b * 2 * h * w;
        let d = t.data();
        let mut out = Vec::with_capacity(2 * h * w);
        for p in 0..h * w {
            out.push(d[base + p]);
            out.push(d[base + h * w + p]);
        }
        Self { values: Tensor::new(&[h, w, 2], out).expect("sized"), alpha }
    }

    /// Pixel field rescaled into loss units (`Dˣ / w`, `Dʸ / h`).
    pub fn to_loss_units(&self) -> Tensor<T> {
        let (h, w) = (self.height(), self.width());
        let mut t = self.to_channels_first();
        let plane = h * w;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let scale = if i < plane { w } else { h };
            *v = *v / T::of(scale as f64);
        }
        t
    }
}

/// Weights of the combined displacement loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgmLossWeights {
    pub lambda_rec: f64,
    pub lambda_nm: f64,
    pub lambda_sm: f64,
}

impl Default for DgmLossWeights {
    fn default() -> Self {
        Self { lambda_rec: 10.0, lambda_nm: 1.0, lambda_sm: 0.2 }
    }
}

impl DgmLossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_rec, self.lambda_nm, self.lambda_sm].iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgmConfig {
    /// Channels of one frame (1 for grayscale).
    pub image_channels: usize,
    /// Calibrated face resolution the network accepts.
    pub height: usize,
    pub width: usize,
    /// Encoder widths; one stride-2 block per entry, mirrored by the decoder.
    pub widths: Vec<usize>,
    pub alpha: f64,
    /// Divide the classifier features by their per-sample maximum.
    pub normalize: bool,
}

impl Default for DgmConfig {
    fn default() -> Self {
        Self { image_channels: 1, height: 128, width: 128, widths: vec![16, 32, 64, 128], alpha: 0.2, normalize: true }
    }
}

impl DgmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.image_channels == 0 {
            return Err(Error::Config("dgm needs at least one block and one image channel".into()));
        }
        let factor = 1usize << self.widths.len();
        if self.height % factor != 0 || self.width % factor != 0 || self.height < factor || self.width < factor {
            return Err(Error::Config(format!(
                "dgm resolution {}x{} must be a positive multiple of {factor}",
                self.height, self.width
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBlock {
    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: NormMode) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, mode)?;
        Ok(g.relu(y))
    }
}

/// Graph handles produced by one DGM forward pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct DgmOutput {
    /// `tanh` output in `[-1, 1]`, `[B, 2, H, W]`.
    pub unit: Var,
    /// `α·unit`: the field the normalisation and smoothing losses see.
    pub loss_field: Var,
    /// Pixel displacement used for warping.
    pub pixel_field: Var,
    /// Dynamic features passed on to the classifier.
    pub features: Var,
}

/// Encoder–decoder displacement network.
///
/// Encoder: `len(widths)` blocks of stride-2 3×3 conv, batch norm, ReLU.
/// Decoder: the mirror image with nearest-neighbour upsampling before each
/// conv and additive skips from the encoder block of equal resolution, then a
/// 3×3 head to two channels and `tanh`.
#[derive(Clone, Debug)]
pub struct Dgm {
    pub config: DgmConfig,
    encoder: Vec<ConvBlock>,
    decoder: Vec<ConvBlock>,
    head: Conv2d,
}

impl Dgm {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, config: DgmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut encoder = Vec::new();
        let mut cin = 2 * config.image_channels;
        for (i, &c) in config.widths.iter().enumerate() {
            let name = format!("{prefix}.enc{i}");
            encoder.push(ConvBlock {
                conv: Conv2d::new(store, &format!("{name}.conv"), cin, c, 3, 2, 1, false, rng)?,
                bn: BatchNorm::new(store, &format!("{name}.bn"), c, 1)?,
            });
            cin = c;
        }
        let mut decoder = Vec::new();
        let n = config.widths.len();
        for i in 0..n {
            // decoder block i restores resolution of encoder block n-2-i (or the input)
            let cout = if i + 1 < n { config.widths[n - 2 - i] } else { config.widths[0] };
            let name = format!("{prefix}.dec{i}");
            decoder.push(ConvBlock {
                conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, 1, 1, false, rng)?,
                bn: BatchNorm::new(store, &format!("{name}.bn"), cout, 1)?,
            });
            cin = cout;
        }
        let head = Conv2d::new(store, &format!("{prefix}.head"), cin, 2, 3, 1, 1, true, rng)?;
        // start near the zero field
        for v in store.value_mut(head.weight).data_mut() {
            *v = *v * T::of(0.1);
        }
        Ok(Self { config, encoder, decoder, head })
    }

    pub fn check_resolution(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.image_channels || shape[2] != c.height || shape[3] != c.width {
            return Err(Error::Resolution(format!(
                "expected frames [B, {}, {}, {}], got {shape:?}",
                c.image_channels, c.height, c.width
            )));
        }
        Ok(())
    }

    /// Forward pass over a batch of frames `[B, M, H, W]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        onset: Var,
        apex: Var,
        mode: NormMode,
    ) -> Result<DgmOutput> {
        self.check_resolution(g.shape(onset))?;
        self.check_resolution(g.shape(apex))?;
        let mut x = g.concat(&[onset, apex], 1)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            x = block.forward(g, store, x, mode)?;
            skips.push(x);
        }
        let n = self.decoder.len();
        for (i, block) in self.decoder.iter().enumerate() {
            let up = g.upsample_nearest(x, 2)?;
            x = block.forward(g, store, up, mode)?;
            if i + 1 < n {
                x = g.add(x, skips[n - 2 - i])?;
            }
        }
        let raw = self.head.forward(g, store, x)?;
        let unit = g.tanh(raw);
        let alpha = self.config.alpha;
        let loss_field = g.scale(unit, alpha);
        let pixel_field = to_pixels(g, loss_field)?;
        let features = if self.config.normalize { g.max_abs_normalize(unit, NORMALIZE_FLOOR)? } else { unit };
        Ok(DgmOutput { unit, loss_field, pixel_field, features })
    }

    /// Inference on one pair; returns the pixel displacement field.
    pub fn generate_displacement<T: Real>(&self, store: &ParamStore<T>, pair: &FramePair<T>) -> Result<DisplacementField<T>> {
        let mut g = Graph::new();
        let onset = g.input(pair.onset.clone().reshape(&batch_shape(pair.onset.shape()))?);
        let apex = g.input(pair.apex.clone().reshape(&batch_shape(pair.apex.shape()))?);
        let out = self.forward(&mut g, store, onset, apex, NormMode::Eval)?;
        Ok(DisplacementField::from_channels_first(g.value(out.pixel_field), 0, self.config.alpha))
    }
}

fn batch_shape(s: &[usize]) -> Vec<usize> {
    let mut v = vec![1];
    v.extend_from_slice(s);
    v
}

/// Convert a loss-unit field `[B, 2, H, W]` to pixels.
pub fn to_pixels<T: Real>(g: &mut Graph<T>, field: Var) -> Result<Var> {
    let s = g.shape(field).to_vec();
    if s.len() != 4 || s[1] != 2 {
        return Err(Error::shape("to_pixels", format!("{s:?}")));
    }
    let fx = g.narrow(field, 1, 0, 1)?;
    let fy = g.narrow(field, 1, 1, 1)?;
    let fx = g.scale(fx, s[3] as f64);
    let fy = g.scale(fy, s[2] as f64);
    g.concat(&[fx, fy], 1)
}

/// Identity sampling grid `[B, H, W, 2]` of `(x, y)` pixel centres.
pub fn identity_grid<T: Real>(b: usize, h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(b * h * w * 2);
    for _ in 0..b {
        for y in 0..h {
            for x in 0..w {
                data.push(T::of(x as f64));
                data.push(T::of(y as f64));
            }
        }
    }
    Tensor::new(&[b, h, w, 2], data).expect("sized")
}

/// Backward warp of `onset: [B, M, H, W]` by a pixel field `[B, 2, H, W]`.
pub fn warp<T: Real>(g: &mut Graph<T>, onset: Var, pixel_field: Var) -> Result<Var> {
    let s = g.shape(onset).to_vec();
    let f = g.shape(pixel_field).to_vec();
    if s.len() != 4 || f != [s[0], 2, s[2], s[3]] {
        return Err(Error::shape("warp", format!("image {s:?} with field {f:?}")));
    }
    let grid = g.input(identity_grid(s[0], s[2], s[3]));
    let offsets = g.permute(pixel_field, &[0, 2, 3, 1])?;
    let coords = g.add(grid, offsets)?;
    g.grid_sample(onset, coords)
}

/// Eager warp of a single `[M, h, w]` image.
pub fn warp_image<T: Real>(onset: &Tensor<T>, field: &DisplacementField<T>) -> Result<Tensor<T>> {
    let s = onset.shape();
    if s.len() != 3 || s[1] != field.height() || s[2] != field.width() {
        return Err(Error::shape("warp", format!("image {s:?} with field {:?}", field.values.shape())));
    }
    let mut g = Graph::new();
    let img = g.input(onset.clone().reshape(&batch_shape(s))?);
    let f = g.input(field.to_channels_first());
    let out = warp(&mut g, img, f)?;
    g.value(out).clone().reshape(s)
}
