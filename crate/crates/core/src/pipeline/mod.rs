//! End-to-end assembly: datasets, the synthetic generator, the full model,
//! training loops, LOSO evaluation and metrics.

mod dataset;
mod loso;
mod metrics;
mod model;
mod synthetic;
mod train;

pub use dataset::{
    apex_jitter, class_index, jitter_index, load_dataset, loso_split, read_image, read_manifest, to_byte, write_image,
    write_manifest, Dataset, Fold, LoadMode, ManifestRow, Sample, CLASS_NAMES,
};
pub use metrics::{compute_metrics, from_confusion, pool_confusion, Metrics};
pub use synthetic::{generate_synthetic_dataset, write_synthetic_dataset, DomainSpec, SyntheticDataset, SyntheticSpec};
pub use model::{dynamic_image, Ablation, Batch, FeatureSource, FrlDgt, ModelConfig, ModelOutput, RegionMode};
pub use train::{batch_plan, EpochLog, StepLosses, TrainConfig, Trainer};
pub use loso::{fold_seed, run_loso, ExperimentConfig, FoldReport, LosoReport};
