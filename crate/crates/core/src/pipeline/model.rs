use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, LoadMode};
use crate::autodiff::{Graph, NormMode, Var};
use crate::dgm::{Dgm, DgmConfig, DgmOutput, FramePair, NORMALIZE_FLOOR};
use crate::error::{Error, Result};
use crate::fusion::{ClassificationResult, FusionConfig, FusionOutput, FusionSwitches, FusionVariant, TransformerFusion};
use crate::params::ParamStore;
use crate::regions::{compute_au_boxes, crop_resize_batch, grid_boxes, patch_tokens, AuGeometry, AuRegionSet, LandmarkSet};
use crate::tensor::{Real, Tensor};

/// How the face is split into local regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionMode {
    /// Landmark-anchored action-unit boxes.
    Au,
    /// Uniform 3×3 split of the full-face box.
    Grid3x3,
}

/// Source of the dynamic feature channels stacked with the frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    /// Learned displacement.
    Dgm,
    /// Displacement loaded from the sample's flow file, in pixels.
    OpticalFlow,
    /// Loaded displacement divided by its per-sample maximum.
    OpticalFlowNorm,
    /// Approximate rank pooling of the frames up to the apex.
    DynamicImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dgm: DgmConfig,
    pub fusion: FusionConfig,
    pub switches: FusionSwitches,
    pub regions: RegionMode,
    /// Side of the square every region is resized to.
    pub region_size: usize,
    pub patch_size: usize,
    pub features: FeatureSource,
    pub geometry: AuGeometry,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dgm: DgmConfig::default(),
            fusion: FusionConfig::default(),
            switches: FusionSwitches::default(),
            regions: RegionMode::Au,
            region_size: 90,
            patch_size: 18,
            features: FeatureSource::Dgm,
            geometry: AuGeometry::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.dgm.validate()?;
        self.fusion.validate()?;
        self.geometry.validate()?;
        if self.patch_size == 0 || self.region_size == 0 || self.region_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "region size {} must be a positive multiple of patch size {}",
                self.region_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        match self.features {
            FeatureSource::DynamicImage => self.dgm.image_channels,
            _ => 2,
        }
    }

    /// Channels of the stacked onset, apex and feature map.
    pub fn stack_channels(&self) -> usize {
        2 * self.dgm.image_channels + self.feature_channels()
    }

    pub fn num_regions(&self) -> usize {
        match self.regions {
            RegionMode::Au => self.geometry.num_regions(),
            RegionMode::Grid3x3 => 9,
        }
    }

    pub fn tokens(&self) -> usize {
        (self.region_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.stack_channels()
    }

    /// Local boxes and full-face box of one face.
    pub fn regions_for(&self, landmarks: &LandmarkSet) -> Result<AuRegionSet> {
        let au = compute_au_boxes(landmarks, &self.geometry)?;
        Ok(match self.regions {
            RegionMode::Au => au,
            RegionMode::Grid3x3 => grid_boxes(&au.full_face, 3),
        })
    }

    /// Text identifying the architecture, stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }
}

/// The structural variants of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    M0,
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    M7,
    M8,
    M9,
}

impl Ablation {
    pub const ALL: [Ablation; 10] = [
        Ablation::M0,
        Ablation::M1,
        Ablation::M2,
        Ablation::M3,
        Ablation::M4,
        Ablation::M5,
        Ablation::M6,
        Ablation::M7,
        Ablation::M8,
        Ablation::M9,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| format!("{a:?}").eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::usage(format!("unknown ablation {s:?}; expected M0..M9")))
    }

    pub fn description(self) -> &'static str {
        match self {
            Ablation::M0 => "optical flow instead of the learned displacement",
            Ablation::M1 => "normalised optical flow instead of the learned displacement",
            Ablation::M2 => "dynamic image instead of the learned displacement",
            Ablation::M3 => "without self-supervised displacement training",
            Ablation::M4 => "fusion after attention",
            Ablation::M5 => "3x3 image patches instead of action-unit regions",
            Ablation::M6 => "without full-face fusion",
            Ablation::M7 => "without local fusion",
            Ablation::M8 => "without global fusion",
            Ablation::M9 => "full model",
        }
    }

    /// Apply this variant to a full-model configuration.
    pub fn apply(self, model: &mut ModelConfig, self_supervised: &mut bool) {
        match self {
            Ablation::M0 => model.features = FeatureSource::OpticalFlow,
            Ablation::M1 => model.features = FeatureSource::OpticalFlowNorm,
            Ablation::M2 => model.features = FeatureSource::DynamicImage,
            Ablation::M3 => *self_supervised = false,
            Ablation::M4 => model.fusion.variant = FusionVariant::After,
            Ablation::M5 => model.regions = RegionMode::Grid3x3,
            Ablation::M6 => model.switches.full_face = false,
            Ablation::M7 => model.switches.local = false,
            Ablation::M8 => model.switches.global = false,
            Ablation::M9 => {}
        }
    }
}

/// Model inputs for a batch of samples.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[B, M, H, W]`.
    pub onset: Tensor<T>,
    pub apex: Tensor<T>,
    pub labels: Vec<usize>,
    pub regions: Vec<AuRegionSet>,
    /// Loaded or precomputed feature channels `[B, F, H, W]`.
    pub external: Option<Tensor<T>>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Graph handles of one full forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    pub onset: Var,
    pub apex: Var,
    pub dgm: Option<DgmOutput>,
    pub fusion: FusionOutput,
}

/// Displacement generation followed by transformer fusion.
#[derive(Clone, Debug)]
pub struct FrlDgt {
    pub config: ModelConfig,
    pub dgm: Option<Dgm>,
    pub fusion: TransformerFusion,
}

impl FrlDgt {
    /// Parameters are registered under `dgm.` and `fusion.`.
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dgm = match config.features {
            FeatureSource::Dgm => Some(Dgm::new(store, "dgm", config.dgm.clone(), rng)?),
            _ => None,
        };
        let fusion = TransformerFusion::new(
            store,
            "fusion",
            config.fusion.clone(),
            config.switches,
            config.num_regions(),
            config.tokens(),
            config.patch_dim(),
            rng,
        )?;
        Ok(Self { config, dgm, fusion })
    }

    /// Assemble a batch from dataset samples. In training mode the apex may be
    /// jittered; evaluation always uses the labelled apex.
    pub fn batch<T: Real, R: Rng + ?Sized>(
        &self,
        data: &Dataset<T>,
        indices: &[usize],
        mode: LoadMode,
        jitter: bool,
        rng: &mut R,
    ) -> Result<Batch<T>> {
        if indices.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        let mut onsets = Vec::with_capacity(indices.len());
        let mut apexes = Vec::with_capacity(indices.len());
        let mut externals = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        let mut regions = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &data.samples[i];
            let apex = s.load_apex(mode, jitter, rng)?;
            onsets.push(&s.frames[0]);
            apexes.push(&s.frames[apex]);
            labels.push(s.label);
            regions.push(self.config.regions_for(&s.landmarks)?);
            match self.config.features {
                FeatureSource::Dgm => {}
                FeatureSource::OpticalFlow | FeatureSource::OpticalFlowNorm => {
                    let flow =
                        s.flow.as_ref().ok_or_else(|| Error::usage(format!("sample {} has no flow file", s.id)))?;
                    let mut f = flow.clone();
                    if self.config.features == FeatureSource::OpticalFlowNorm {
                        let m = f.max_abs().f64().max(NORMALIZE_FLOOR);
                        f = f.map(|v| v / T::of(m));
                    }
                    externals.push(f);
                }
                FeatureSource::DynamicImage => externals.push(dynamic_image(&s.frames[..=apex])),
            }
        }
        let external = if externals.is_empty() { None } else { Some(Tensor::stack(&externals.iter().collect::<Vec<_>>())?) };
        Ok(Batch { onset: Tensor::stack(&onsets)?, apex: Tensor::stack(&apexes)?, labels, regions, external })
    }

    /// Full forward pass. `cls_grad_scale` multiplies the gradient that flows
    /// from the classifier back into the displacement network.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &Batch<T>,
        mode: NormMode,
        cls_grad_scale: f64,
    ) -> Result<ModelOutput> {
        let onset = g.input(batch.onset.clone());
        let apex = g.input(batch.apex.clone());
        let (features, dgm) = match &self.dgm {
            Some(dgm) => {
                let out = dgm.forward(g, store, onset, apex, mode)?;
                (g.grad_scale(out.features, cls_grad_scale), Some(out))
            }
            None => {
                let ext = batch.external.clone().ok_or_else(|| Error::usage("batch lacks external features"))?;
                (g.input(ext), None)
            }
        };
        let stack = g.concat(&[onset, apex, features], 1)?;
        let m = 2 * self.config.dgm.image_channels;
        let displacement = match self.config.features {
            FeatureSource::DynamicImage => None,
            _ => Some((m, m + 1)),
        };
        let size = (self.config.region_size, self.config.region_size);
        let p = self.config.patch_size;
        let mut region_patches = Vec::with_capacity(self.config.num_regions());
        for r in 0..self.config.num_regions() {
            let boxes: Vec<_> = batch.regions.iter().map(|set| set.boxes[r]).collect();
            let crop = crop_resize_batch(g, stack, &boxes, size, displacement)?;
            region_patches.push(patch_tokens(g, crop, p)?);
        }
        let face = if self.config.switches.full_face {
            let boxes: Vec<_> = batch.regions.iter().map(|set| set.full_face).collect();
            let crop = crop_resize_batch(g, stack, &boxes, size, displacement)?;
            Some(patch_tokens(g, crop, p)?)
        } else {
            None
        };
        let fusion = self.fusion.forward(g, store, &region_patches, face, mode)?;
        Ok(ModelOutput { logits: fusion.logits, onset, apex, dgm, fusion })
    }

    /// Inference on one calibrated pair.
    pub fn forward_full<T: Real>(
        &self,
        store: &ParamStore<T>,
        pair: &FramePair<T>,
        landmarks: &LandmarkSet,
        external: Option<&Tensor<T>>,
    ) -> Result<ClassificationResult> {
        let add_batch = |t: &Tensor<T>| {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.clone().reshape(&s)
        };
        let batch = Batch {
            onset: add_batch(&pair.onset)?,
            apex: add_batch(&pair.apex)?,
            labels: vec![pair.label.unwrap_or(0)],
            regions: vec![self.config.regions_for(landmarks)?],
            external: external.map(add_batch).transpose()?,
        };
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, &batch, NormMode::Eval, 0.0)?;
        Ok(ClassificationResult::batch(&g, out.logits).remove(0))
    }
}

/// Approximate rank pooling of `frames` (`Σ (2t − T − 1)·frame_t`, `t` from 1),
/// divided by its maximum absolute value.
pub fn dynamic_image<T: Real>(frames: &[Tensor<T>]) -> Tensor<T> {
    let n = frames.len();
    let mut out = Tensor::<T>::zeros(frames[0].shape());
    for (t, f) in frames.iter().enumerate() {
        let w = T::of((2 * (t + 1)) as f64 - n as f64 - 1.0);
        for (o, &v) in out.data_mut().iter_mut().zip(f.data()) {
            *o = *o + w * v;
        }
    }
    let m = out.max_abs().f64().max(NORMALIZE_FLOOR);
    out.map(|v| v / T::of(m))
}
