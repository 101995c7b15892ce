use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, LoadMode};
use super::metrics::{compute_metrics, Metrics};
use super::model::{Batch, FrlDgt, ModelConfig};
use crate::autodiff::{Gradients, Graph, NormMode};
use crate::checkpoint;
use crate::dgm::{loss_dgm, sample_self_supervised_pairs, DgmLossWeights, FramePair};
use crate::error::{Error, Result};
use crate::fusion::ClassificationResult;
use crate::optim::{cosine_anneal, Adam};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Constant Adam learning rate of the displacement network.
    pub dgm_lr: f64,
    /// Initial Adam learning rate of the classifier, cosine-annealed to 0.
    pub fusion_lr: f64,
    /// Multiplier on the classification gradient entering the displacement network.
    pub cls_grad_scale: f64,
    pub loss_weights: DgmLossWeights,
    pub seed: u64,
    /// Interleave one self-supervised displacement step per supervised step.
    pub self_supervised: bool,
    /// Frame pairs drawn for each self-supervised step.
    pub self_supervised_pairs: usize,
    /// Replace the apex by a random neighbour when loading training samples.
    pub apex_jitter: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            dgm_lr: 0.002,
            fusion_lr: 1e-3,
            cls_grad_scale: 1e-6,
            loss_weights: DgmLossWeights::default(),
            seed: 0,
            self_supervised: true,
            self_supervised_pairs: 8,
            apex_jitter: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.cls_grad_scale >= 0.0) {
            return Err(Error::Config(format!("cls_grad_scale must be non-negative, got {}", self.cls_grad_scale)));
        }
        if !(self.dgm_lr >= 0.0 && self.fusion_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        self.loss_weights.validate()
    }
}

/// Scalar losses of one supervised step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub cls: f64,
    /// `(rec, nm, sm, weighted total)` of the displacement loss, if a DGM is present.
    pub dgm: Option<[f64; 4]>,
    pub total: f64,
}

/// Mean losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub cls: f64,
    pub dgm: f64,
    pub self_supervised: f64,
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{what} is {v}")))
    }
}

/// Model, parameters and optimiser state of one training run.
pub struct Trainer<T> {
    pub model: FrlDgt,
    pub store: ParamStore<T>,
    pub config: TrainConfig,
    dgm_ids: Vec<ParamId>,
    fusion_ids: Vec<ParamId>,
    dgm_opt: Adam<T>,
    fusion_opt: Adam<T>,
    step: usize,
    total_steps: usize,
    rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let model = FrlDgt::new(&mut store, model, &mut rng)?;
        let dgm_ids = store.trainable_with_prefix("dgm.");
        let fusion_ids = store.trainable_with_prefix("fusion.");
        Ok(Self {
            model,
            store,
            config,
            dgm_opt: Adam::new(dgm_ids.clone()),
            fusion_opt: Adam::new(fusion_ids.clone()),
            dgm_ids,
            fusion_ids,
            step: 0,
            total_steps: 0,
            rng,
        })
    }

    pub fn dgm_params(&self) -> &[ParamId] {
        &self.dgm_ids
    }

    pub fn fusion_params(&self) -> &[ParamId] {
        &self.fusion_ids
    }

    /// Steps over which the classifier learning rate is annealed.
    pub fn set_schedule(&mut self, total_steps: usize) {
        self.total_steps = total_steps;
    }

    pub fn fusion_lr(&self) -> f64 {
        cosine_anneal(self.step, self.total_steps, self.config.fusion_lr)
    }

    pub fn batch(&mut self, data: &Dataset<T>, indices: &[usize], mode: LoadMode) -> Result<Batch<T>> {
        let jitter = self.config.apex_jitter;
        self.model.batch(data, indices, mode, jitter, &mut self.rng)
    }

    /// Gradients of `L_cls + L_DGM` on a labelled batch without updating anything.
    /// Also returns the running-statistics updates the step would apply.
    pub fn gradients(
        &self,
        batch: &Batch<T>,
        cls_grad_scale: f64,
    ) -> Result<(Gradients<T>, StepLosses, Vec<(ParamId, Tensor<T>)>)> {
        if batch.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        let mut g = Graph::new();
        let out = self.model.forward(&mut g, &self.store, batch, NormMode::Train, cls_grad_scale)?;
        let cls = g.cross_entropy(out.logits, &batch.labels)?;
        let (loss, dgm) = match &out.dgm {
            Some(d) => {
                let l = loss_dgm(&mut g, out.onset, out.apex, d, &self.config.loss_weights)?;
                (g.add(cls, l.total)?, Some(l.values(&g)))
            }
            None => (cls, None),
        };
        let losses = StepLosses {
            cls: check_finite(g.value(cls).item().f64(), "classification loss")?,
            dgm,
            total: check_finite(g.value(loss).item().f64(), "training loss")?,
        };
        let grads = g.backward(loss)?;
        Ok((grads, losses, g.take_buffer_updates()))
    }

    fn apply_buffers(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, t) in updates {
            *self.store.value_mut(id) = t;
        }
    }

    /// One supervised step: both parameter groups take an Adam step.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<StepLosses> {
        let (grads, losses, updates) = self.gradients(batch, self.config.cls_grad_scale)?;
        let lr = self.fusion_lr();
        self.dgm_opt.step(&mut self.store, &grads, self.config.dgm_lr);
        self.fusion_opt.step(&mut self.store, &grads, lr);
        self.apply_buffers(updates);
        self.step += 1;
        Ok(losses)
    }

    /// One displacement-only step on unlabelled pairs; the classifier is not touched.
    pub fn self_supervised_step(&mut self, pairs: &[FramePair<T>]) -> Result<[f64; 4]> {
        let Some(dgm) = &self.model.dgm else {
            return Err(Error::usage("self-supervised training needs the displacement network"));
        };
        if pairs.is_empty() {
            return Err(Error::usage("no self-supervised pairs"));
        }
        let onset = Tensor::stack(&pairs.iter().map(|p| &p.onset).collect::<Vec<_>>())?;
        let apex = Tensor::stack(&pairs.iter().map(|p| &p.apex).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let (o, a) = (g.input(onset), g.input(apex));
        let out = dgm.forward(&mut g, &self.store, o, a, NormMode::Train)?;
        let l = loss_dgm(&mut g, o, a, &out, &self.config.loss_weights)?;
        let values = l.values(&g);
        check_finite(values[3], "displacement loss")?;
        let grads = g.backward(l.total)?;
        self.dgm_opt.step(&mut self.store, &grads, self.config.dgm_lr);
        let updates = g.take_buffer_updates();
        self.apply_buffers(updates);
        Ok(values)
    }

    /// Random ordered frame pairs from the sequences of the given samples.
    pub fn sample_pairs(&mut self, data: &Dataset<T>, indices: &[usize], count: usize) -> Result<Vec<FramePair<T>>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let s = &data.samples[indices[self.rng.random_range(0..indices.len())]];
            out.extend(sample_self_supervised_pairs(&s.frames, &s.subject, 1, &mut self.rng)?);
        }
        Ok(out)
    }

    /// Train on `indices` for the configured number of epochs.
    pub fn fit(&mut self, data: &Dataset<T>, indices: &[usize]) -> Result<Vec<EpochLog>> {
        if indices.is_empty() {
            return Err(Error::usage("no training samples"));
        }
        let batches = batch_plan(indices.len(), self.config.batch_size);
        self.set_schedule(self.config.epochs * batches.len());
        let use_ss = self.config.self_supervised && self.model.dgm.is_some() && self.config.self_supervised_pairs > 0;
        let mut logs = Vec::with_capacity(self.config.epochs);
        let mut order = indices.to_vec();
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut self.rng);
            let (mut cls, mut dgm, mut ss) = (0.0, 0.0, 0.0);
            for range in &batches {
                let batch = self.batch(data, &order[range.clone()], LoadMode::Train)?;
                let l = self.train_step(&batch)?;
                cls += l.cls;
                dgm += l.dgm.map_or(0.0, |d| d[3]);
                if use_ss {
                    let pairs = self.sample_pairs(data, indices, self.config.self_supervised_pairs)?;
                    ss += self.self_supervised_step(&pairs)?[3];
                }
            }
            let n = batches.len() as f64;
            logs.push(EpochLog { epoch, cls: cls / n, dgm: dgm / n, self_supervised: ss / n });
        }
        Ok(logs)
    }

    /// Inference in evaluation mode, `chunk` samples at a time.
    pub fn predict(&self, data: &Dataset<T>, indices: &[usize]) -> Result<Vec<ClassificationResult>> {
        let mut out = Vec::with_capacity(indices.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for chunk in indices.chunks(16) {
            let batch = self.model.batch(data, chunk, LoadMode::Eval, false, &mut rng)?;
            let mut g = Graph::new();
            let o = self.model.forward(&mut g, &self.store, &batch, NormMode::Eval, 0.0)?;
            out.extend(ClassificationResult::batch(&g, o.logits));
        }
        Ok(out)
    }

    pub fn evaluate(&self, data: &Dataset<T>, indices: &[usize]) -> Result<Metrics> {
        let preds: Vec<usize> = self.predict(data, indices)?.iter().map(|r| r.label).collect();
        compute_metrics(&preds, &data.labels(indices), self.model.config.fusion.num_classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.store, &self.model.config.fingerprint())
    }

    /// Replace all parameters from a checkpoint written for the same model configuration.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        checkpoint::read(path)?.restore(&mut self.store, &self.model.config.fingerprint())
    }
}

/// Contiguous batch ranges over `n` items; a trailing batch of one sample is
/// merged into its predecessor so batch statistics stay defined.
pub fn batch_plan(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(batch_size.max(1)).map(|s| s..(s + batch_size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}
