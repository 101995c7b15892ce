//! Transformer fusion classifier: per-region local modules, a global module
//! over the local vectors, a full-face module and the classification head.

mod attention;
mod layer;
mod profile;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{AttnBlock, MultiHeadAttention, PatchEmbed, TransformerLayer};
pub use layer::{FuseAfter, FuseBefore, Fused, FusionLayer};
pub use profile::{profile_fusion, FusionProfile};

use crate::autodiff::{Graph, NormMode, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionVariant {
    /// Mix the queries, then attend once per head.
    Before,
    /// Full attention, then mix the outputs.
    After,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub embed_dim: usize,
    pub heads: usize,
    /// Transformer layers per attention block.
    pub depth: usize,
    /// MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub variant: FusionVariant,
    /// Learned position embeddings on patch tokens.
    pub positional: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            embed_dim: 256,
            heads: 8,
            depth: 2,
            mlp_ratio: 4,
            num_classes: 3,
            variant: FusionVariant::Before,
            positional: true,
        }
    }
}

impl FusionConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.num_classes < 2 || self.mlp_ratio == 0 {
            return Err(Error::Config("need at least 2 classes and a positive mlp_ratio".into()));
        }
        Ok(())
    }
}

/// Which levels of the hierarchy are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSwitches {
    /// Off: each region vector is the mean of its patch embeddings.
    pub local: bool,
    /// Off: the global vector is the mean of the region vectors.
    pub global: bool,
    /// Off: the head sees the global vector alone.
    pub full_face: bool,
}

impl Default for FusionSwitches {
    fn default() -> Self {
        Self { local: true, global: true, full_face: true }
    }
}

/// An attention block followed by a fusion layer: `[B, n, C] → [B, C]`.
#[derive(Clone, Debug)]
pub struct FusionModule {
    pub attn: AttnBlock,
    pub fusion: FusionLayer,
    pub tokens: usize,
}

impl FusionModule {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &FusionConfig,
        tokens: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.embed_dim;
        Ok(Self {
            attn: AttnBlock::new(store, &format!("{name}.attn"), c, cfg.heads, cfg.depth, c * cfg.mlp_ratio, rng)?,
            fusion: FusionLayer::new(store, &format!("{name}.fuse"), cfg.variant, c, cfg.heads, tokens, rng)?,
            tokens,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: NormMode) -> Result<Fused> {
        let h = self.attn.forward(g, store, x)?;
        self.fusion.forward(g, store, h, mode)
    }
}

/// Patch embedding plus (optionally) a fusion module for one image region.
#[derive(Clone, Debug)]
pub struct RegionModule {
    pub embed: PatchEmbed,
    pub module: Option<FusionModule>,
}

impl RegionModule {
    /// `[B, N, P·P·M] → [B, C]` with token weights when a fusion module runs.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        patches: Var,
        mode: NormMode,
    ) -> Result<(Var, Option<Var>)> {
        let tokens = self.embed.forward(g, store, patches)?;
        match &self.module {
            Some(m) => {
                let f = m.forward(g, store, tokens, mode)?;
                Ok((f.vector, Some(f.weights)))
            }
            None => Ok((g.mean_axis(tokens, 1)?, None)),
        }
    }
}

/// Class prediction for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Arg-max class; ties go to the lowest index.
    pub label: usize,
}

impl ClassificationResult {
    pub fn from_logits(logits: &[f64]) -> Self {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut label = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[label] {
                label = i;
            }
        }
        Self { logits: logits.to_vec(), probs: e.iter().map(|v| v / z).collect(), label }
    }

    /// One result per row of `[B, K]` logits.
    pub fn batch<T: Real>(g: &Graph<T>, logits: Var) -> Vec<Self> {
        let t = g.value(logits);
        let k = t.shape()[1];
        t.to_f64_vec().chunks(k).map(Self::from_logits).collect()
    }
}

/// Two fully connected layers on the concatenated global and full-face vectors.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ClassifierHead {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, inputs: &[Var]) -> Result<Var> {
        let x = if inputs.len() == 1 { inputs[0] } else { g.concat(inputs, 1)? };
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Graph handles of one classifier forward pass.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub logits: Var,
    pub local_vectors: Vec<Var>,
    pub global_vector: Var,
    pub face_vector: Option<Var>,
    pub local_weights: Vec<Option<Var>>,
    pub global_weights: Option<Var>,
    pub face_weights: Option<Var>,
}

/// The full three-level classifier.
#[derive(Clone, Debug)]
pub struct TransformerFusion {
    pub config: FusionConfig,
    pub switches: FusionSwitches,
    pub locals: Vec<RegionModule>,
    pub global: Option<FusionModule>,
    pub face: Option<RegionModule>,
    pub head: ClassifierHead,
    pub tokens: usize,
    pub patch_dim: usize,
}

impl TransformerFusion {
    /// `regions` local modules, each over `tokens` patches of `patch_dim` values.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: FusionConfig,
        switches: FusionSwitches,
        regions: usize,
        tokens: usize,
        patch_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if regions == 0 || tokens == 0 {
            return Err(Error::Config("fusion needs at least one region and one token".into()));
        }
        let c = config.embed_dim;
        let region_module = |store: &mut ParamStore<T>, name: String, rng: &mut R, fuse: bool| -> Result<RegionModule> {
            Ok(RegionModule {
                embed: PatchEmbed::new(store, &format!("{name}.embed"), patch_dim, tokens, c, config.positional, rng)?,
                module: if fuse { Some(FusionModule::new(store, &name, &config, tokens, rng)?) } else { None },
            })
        };
        let locals = (0..regions)
            .map(|i| region_module(store, format!("{prefix}.local{i}"), rng, switches.local))
            .collect::<Result<Vec<_>>>()?;
        let global = if switches.global {
            Some(FusionModule::new(store, &format!("{prefix}.global"), &config, regions, rng)?)
        } else {
            None
        };
        let face =
            if switches.full_face { Some(region_module(store, format!("{prefix}.face"), rng, true)?) } else { None };
        let head_in = if switches.full_face { 2 * c } else { c };
        let head = ClassifierHead {
            fc1: Linear::new(store, &format!("{prefix}.head.fc1"), head_in, c, true, rng)?,
            fc2: Linear::new(store, &format!("{prefix}.head.fc2"), c, config.num_classes, true, rng)?,
        };
        Ok(Self { config, switches, locals, global, face, head, tokens, patch_dim })
    }

    pub fn num_regions(&self) -> usize {
        self.locals.len()
    }

    /// Fuse `K` region vectors `[B, C]` into one.
    pub fn global_module<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        locals: &[Var],
        mode: NormMode,
    ) -> Result<(Var, Option<Var>)> {
        if locals.len() != self.num_regions() {
            return Err(Error::usage(format!("global fusion expects {} vectors, got {}", self.num_regions(), locals.len())));
        }
        let c = self.config.embed_dim;
        let rows = locals
            .iter()
            .map(|&v| {
                let b = g.shape(v)[0];
                g.reshape(v, &[b, 1, c])
            })
            .collect::<Result<Vec<_>>>()?;
        let seq = g.concat(&rows, 1)?;
        match &self.global {
            Some(m) => {
                let f = m.forward(g, store, seq, mode)?;
                Ok((f.vector, Some(f.weights)))
            }
            None => Ok((g.mean_axis(seq, 1)?, None)),
        }
    }

    /// `region_patches`: `K` tensors `[B, N, P·P·M]`; `face_patches` likewise.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        region_patches: &[Var],
        face_patches: Option<Var>,
        mode: NormMode,
    ) -> Result<FusionOutput> {
        if region_patches.len() != self.num_regions() {
            return Err(Error::usage(format!(
                "expected {} regions, got {}",
                self.num_regions(),
                region_patches.len()
            )));
        }
        let mut local_vectors = Vec::with_capacity(self.locals.len());
        let mut local_weights = Vec::with_capacity(self.locals.len());
        for (m, &p) in self.locals.iter().zip(region_patches) {
            let (v, w) = m.forward(g, store, p, mode)?;
            local_vectors.push(v);
            local_weights.push(w);
        }
        let (global_vector, global_weights) = self.global_module(g, store, &local_vectors, mode)?;
        let (face_vector, face_weights) = match (&self.face, face_patches) {
            (Some(m), Some(p)) => {
                let (v, w) = m.forward(g, store, p, mode)?;
                (Some(v), w)
            }
            (Some(_), None) => return Err(Error::usage("full-face patches are required")),
            (None, _) => (None, None),
        };
        let mut head_in = vec![global_vector];
        head_in.extend(face_vector);
        let logits = self.head.forward(g, store, &head_in)?;
        Ok(FusionOutput { logits, local_vectors, global_vector, face_vector, local_weights, global_weights, face_weights })
    }
}

/// Per-token importances averaged over batch and heads.
pub fn token_importance<T: Real>(g: &Graph<T>, weights: Var) -> Vec<f64> {
    let t = g.value(weights);
    let n = *t.shape().last().expect("non-scalar weights");
    let rows = t.numel() / n;
    let mut out = vec![0.0; n];
    for row in t.to_f64_vec().chunks(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v / rows as f64;
        }
    }
    out
}

/// Token importances of every fusion layer, for visualisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeightsReport {
    pub region_names: Vec<String>,
    /// Per region, the importance of each patch (absent without local fusion).
    pub local: Vec<Option<Vec<f64>>>,
    /// Importance of each region in the global fusion.
    pub global: Option<Vec<f64>>,
    pub full_face: Option<Vec<f64>>,
}

impl FusionWeightsReport {
    pub fn collect<T: Real>(g: &Graph<T>, out: &FusionOutput, region_names: &[String]) -> Self {
        Self {
            region_names: region_names.to_vec(),
            local: out.local_weights.iter().map(|w| w.map(|w| token_importance(g, w))).collect(),
            global: out.global_weights.map(|w| token_importance(g, w)),
            full_face: out.face_weights.map(|w| token_importance(g, w)),
        }
    }
}

/// Multiply-accumulate counts of one fusion layer over `n` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    /// Query/key/value (and output) projections.
    pub projections: u64,
    /// Mixing the `m` queries into one (before-attention only).
    pub query_mix: u64,
    /// Query–key products.
    pub scores: u64,
    /// Probability-weighted sums of values.
    pub weighted_values: u64,
    /// Combining the `n` attention outputs (after-attention only).
    pub token_mix: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.projections + self.query_mix + self.scores + self.weighted_values + self.token_mix
    }
}

/// Symbolic MAC count of one fusion layer over a batch of `batch` sequences
/// of `n` tokens (`m = n` queries).
pub fn flop_count(cfg: &FusionConfig, variant: FusionVariant, n: usize, batch: usize) -> FlopCount {
    let (b, n, c_all, h) = (batch as u64, n as u64, cfg.embed_dim as u64, cfg.heads as u64);
    let c = c_all / h;
    match variant {
        FusionVariant::Before => FlopCount {
            projections: 3 * b * n * c_all * c_all,
            query_mix: b * h * n * c,
            scores: b * h * n * c,
            weighted_values: b * h * n * c,
            token_mix: 0,
        },
        FusionVariant::After => FlopCount {
            projections: 4 * b * n * c_all * c_all,
            query_mix: 0,
            scores: b * h * n * n * c,
            weighted_values: b * h * n * n * c,
            token_mix: b * n * c_all,
        },
    }
}
