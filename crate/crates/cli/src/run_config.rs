//! Declarative run configuration: a JSON file whose values seed the
//! command-line defaults. Flags always win over the file.
//!
//! Schema (all keys optional):
//! ```json
//! {
//!   "seed": 7,
//!   "workers": 2,
//!   "train": {
//!     "epochs": 20, "segment_seconds": 1.0, "lr_start": 1e-3,
//!     "lr_end": 2.5e-5, "batch_size": 4, "grad_clip": 5.0,
//!     "mean_subtract": false, "max_steps": null
//!   },
//!   "features": {
//!     "tf_map": "emb" | "spec" | "off",
//!     "contextual": true, "speaker_embedding": false, "d_k": 16
//!   },
//!   "encoder": { "d_e": 16, "freeze": false, "precomputed_dir": "path" }
//! }
//! ```

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;
use tse_core::encoder::EncoderMode;
use tse_core::features::SimilarityMode;
use tse_core::model::ModelSpec;
use tse_core::train::TrainConfig;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub train: Option<TrainPatch>,
    pub features: Option<FeaturesPatch>,
    pub encoder: Option<EncoderPatch>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPatch {
    pub epochs: Option<usize>,
    pub segment_seconds: Option<f64>,
    pub lr_start: Option<f64>,
    pub lr_end: Option<f64>,
    pub batch_size: Option<usize>,
    pub grad_clip: Option<f64>,
    pub mean_subtract: Option<bool>,
    pub max_steps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesPatch {
    pub tf_map: Option<String>,
    pub contextual: Option<bool>,
    pub speaker_embedding: Option<bool>,
    pub d_k: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderPatch {
    pub d_e: Option<usize>,
    pub freeze: Option<bool>,
    pub precomputed_dir: Option<String>,
}

impl RunFile {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        if let Some(t) = &self.train {
            if let Some(v) = t.epochs {
                cfg.epochs = v;
            }
            if let Some(v) = t.segment_seconds {
                cfg.segment_seconds = v;
            }
            if let Some(v) = t.lr_start {
                cfg.lr_start = v;
            }
            if let Some(v) = t.lr_end {
                cfg.lr_end = v;
            }
            if let Some(v) = t.batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = t.grad_clip {
                cfg.grad_clip = v;
            }
            if let Some(v) = t.mean_subtract {
                cfg.mean_subtract = v;
            }
            if t.max_steps.is_some() {
                cfg.max_steps = t.max_steps;
            }
        }
        cfg
    }

    pub fn apply_to_spec(&self, spec: &mut ModelSpec) {
        if let Some(f) = &self.features {
            if let Some(tf) = &f.tf_map {
                spec.features.selection.tf_map = match tf.as_str() {
                    "spec" | "spectral" => Some(SimilarityMode::Spectral),
                    "emb" | "embedding" => Some(SimilarityMode::Embedding),
                    _ => None,
                };
            }
            if let Some(v) = f.contextual {
                spec.features.selection.contextual = v;
            }
            if let Some(v) = f.speaker_embedding {
                spec.features.selection.speaker_embedding = v;
            }
            if let Some(v) = f.d_k {
                spec.features.d_k = v;
            }
        }
        if let Some(e) = &self.encoder {
            if let Some(v) = e.d_e {
                spec.encoder.d_e = v;
            }
            if let Some(v) = e.freeze {
                spec.encoder.freeze = v;
            }
            if let Some(dir) = &e.precomputed_dir {
                spec.encoder.mode = EncoderMode::Precomputed { dir: dir.into() };
            }
        }
    }
}
