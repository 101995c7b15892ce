use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{flop_count, FusionConfig, FusionLayer, FusionVariant};
use crate::autodiff::{Graph, NormMode};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Cost of one fusion layer forward pass over `[batch, tokens, C]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionProfile {
    pub variant: FusionVariant,
    pub tokens: usize,
    pub batch: usize,
    pub macs: u64,
    pub median_ms: f64,
    pub runs: usize,
}

/// Symbolic MACs and median wall-clock of both fusion variants, in evaluation mode.
pub fn profile_fusion(cfg: &FusionConfig, tokens: &[usize], batch: usize, runs: usize) -> Result<Vec<FusionProfile>> {
    cfg.validate()?;
    if runs == 0 || batch == 0 {
        return Err(Error::usage("profiling needs at least one run and one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::new();
    for &n in tokens {
        for variant in [FusionVariant::Before, FusionVariant::After] {
            let mut store = ParamStore::<f32>::new();
            let layer = FusionLayer::new(&mut store, "fuse", variant, cfg.embed_dim, cfg.heads, n, &mut rng)?;
            let x = Tensor::<f32>::full(&[batch, n, cfg.embed_dim], 0.1);
            let mut times = Vec::with_capacity(runs);
            for _ in 0..runs {
                let start = Instant::now();
                let mut g = Graph::new();
                let v = g.input(x.clone());
                std::hint::black_box(layer.forward(&mut g, &store, v, NormMode::Eval)?);
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            times.sort_by(f64::total_cmp);
            out.push(FusionProfile {
                variant,
                tokens: n,
                batch,
                macs: flop_count(cfg, variant, n, batch).total(),
                median_ms: times[runs / 2],
                runs,
            });
        }
    }
    Ok(out)
}
