//! The full extraction model: speaker encoder, feature construction and the
//! band-split extractor composed into one differentiable forward pass.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bands::BandSplitScheme;
use crate::dsp::{self, StftConfig, Waveform};
use crate::encoder::{
    self, EncoderConfig, EncoderMode, FrameEmbeddings, ToyEncoderParams, ENCODER_PARAM_PREFIX,
};
use crate::extractor::{
    self, BandEncoderParams, BlockParams, ExtractorConfig, FusionGate, MaskDecoderParams,
    QuerySource,
};
use crate::features::{self, FeatureConfig, SimilarityMode};
use crate::rng;
use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Error, Debug)]
pub enum ModelError {
    #[error(transparent)]
    Dsp(#[from] dsp::DspError),
    #[error(transparent)]
    Encoder(#[from] encoder::EncoderError),
    #[error(transparent)]
    Feature(#[from] features::FeatureError),
    #[error(transparent)]
    Extractor(#[from] extractor::ExtractorError),
    #[error(transparent)]
    Bands(#[from] crate::bands::BandError),
    #[error("waveform sample rate {got} Hz does not match the model's {expected} Hz")]
    SampleRate { expected: u32, got: u32 },
    #[error("precomputed-embedding mode needs utterance ids for the mixture and enrollment")]
    MissingUtteranceIds,
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
}

/// Everything needed to rebuild a model deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub sample_rate: u32,
    pub stft: StftConfig,
    pub extractor: ExtractorConfig,
    pub encoder: EncoderConfig,
    pub features: FeatureConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl ModelSpec {
    /// 16 kHz configuration with the published band plan.
    pub fn full_scale() -> Self {
        Self {
            sample_rate: 16000,
            stft: StftConfig::default(),
            extractor: ExtractorConfig::default(),
            encoder: EncoderConfig::default(),
            features: FeatureConfig::default(),
        }
    }

    /// Minutes-scale 8 kHz preset: same code paths, small dimensions.
    pub fn desk() -> Self {
        Self {
            sample_rate: 8000,
            stft: StftConfig::new(256, 64, crate::dsp::Window::Hann),
            extractor: ExtractorConfig {
                d_x: 32,
                rnn_hidden: 48,
                n_blocks: 3,
                mask_hidden: 128,
                scheme: extractor::BandSchemeSpec::Uniform { n_bands: 8 },
                query_source: QuerySource::BandMean,
                fuse_per_block: false,
            },
            encoder: EncoderConfig {
                d_e: 16,
                ..EncoderConfig::default()
            },
            features: FeatureConfig {
                d_k: 16,
                ..FeatureConfig::default()
            },
        }
    }

    /// Seconds-scale configuration for gradient checks and unit tests:
    /// float64 everywhere, 2 bands, 8 features per band, every speaker
    /// feature enabled.
    pub fn tiny() -> Self {
        Self {
            sample_rate: 8000,
            stft: StftConfig::new(64, 16, crate::dsp::Window::Hann),
            extractor: ExtractorConfig {
                d_x: 8,
                rnn_hidden: 6,
                n_blocks: 1,
                mask_hidden: 12,
                scheme: extractor::BandSchemeSpec::Uniform { n_bands: 2 },
                query_source: QuerySource::BandMean,
                fuse_per_block: false,
            },
            encoder: EncoderConfig {
                d_e: 6,
                ..EncoderConfig::default()
            },
            features: FeatureConfig {
                selection: features::FeatureSelection {
                    tf_map: Some(SimilarityMode::Embedding),
                    contextual: true,
                    speaker_embedding: true,
                },
                d_k: 4,
                ..FeatureConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.stft.validate()?;
        if self.extractor.n_blocks == 0 {
            return Err(ModelError::InvalidSpec("n_blocks must be >= 1".into()));
        }
        if self.encoder.d_e == 0 || self.features.d_k == 0 {
            return Err(ModelError::InvalidSpec("d_e and d_k must be >= 1".into()));
        }
        self.extractor.scheme.build(self.sample_rate, &self.stft)?;
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("spec serializes");
        config_hash(&value)
    }
}

/// FNV-1a over the canonical (sorted-key) JSON encoding; stable across runs
/// and key order.
pub fn config_hash(value: &serde_json::Value) -> String {
    let canonical = canonicalize(value).to_string();
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in canonical.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    format!("{hash:016x}")
}

fn canonicalize(value: &serde_json::Value) -> serde_json::Value {
    match value {
        serde_json::Value::Object(map) => {
            // serde_json's default map is already sorted; rebuild anyway so
            // the hash does not depend on build features.
            let mut sorted: Vec<(&String, &serde_json::Value)> = map.iter().collect();
            sorted.sort_by_key(|(k, _)| k.as_str());
            serde_json::Value::Object(
                sorted
                    .into_iter()
                    .map(|(k, v)| (k.clone(), canonicalize(v)))
                    .collect(),
            )
        }
        serde_json::Value::Array(items) => {
            serde_json::Value::Array(items.iter().map(canonicalize).collect())
        }
        other => other.clone(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParamIds {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub encoder: Option<ToyEncoderParams>,
    pub attention: Option<AttentionParamIds>,
    pub gate_contextual: Option<FusionGate>,
    pub gate_spk: Option<FusionGate>,
    pub band_encoder: BandEncoderParams,
    pub blocks: Vec<BlockParams>,
    pub decoder: MaskDecoderParams,
}

/// A buildable, trainable extraction model.
pub struct TseModel {
    pub spec: ModelSpec,
    pub scheme: BandSplitScheme,
    pub store: ParamStore,
    pub params: ModelParams,
}

/// Utterance ids, required when embeddings come from a precomputed archive.
#[derive(Debug, Clone, Copy)]
pub struct ExampleIds<'a> {
    pub mixture: &'a str,
    pub enrollment: &'a str,
}

/// Forward-pass outputs: the estimate plus the speaker features that
/// conditioned it (tape variables, `(T, ...)` rows=frames).
pub struct ForwardArtifacts {
    pub estimate: Var,
    pub tf_map: Option<Var>,
    pub contextual: Option<Var>,
    pub speaker_embedding: Option<Var>,
}

impl TseModel {
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let scheme = spec.extractor.scheme.build(spec.sample_rate, &spec.stft)?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[0x1135]);
        let selection = spec.features.selection;

        let encoder_params = if selection.needs_encoder() && spec.encoder.mode == EncoderMode::Toy
        {
            Some(ToyEncoderParams::declare(
                &mut store,
                &mut r,
                &spec.encoder,
                spec.sample_rate,
            ))
        } else {
            None
        };
        let attention = selection.contextual.then(|| {
            let d_q = match spec.extractor.query_source {
                QuerySource::BandMean => spec.extractor.d_x,
                QuerySource::PreEncoderMagnitude => spec.stft.bins(),
            };
            let d_k = spec.features.d_k;
            let d_e = spec.encoder.d_e;
            AttentionParamIds {
                w_q: store.declare(
                    "attn.w_q",
                    crate::tensor::nn::xavier_uniform(&mut r, d_q, d_k, d_q, d_k),
                ),
                w_k: store.declare(
                    "attn.w_k",
                    crate::tensor::nn::xavier_uniform(&mut r, d_e, d_k, d_e, d_k),
                ),
                w_v: store.declare(
                    "attn.w_v",
                    crate::tensor::nn::xavier_uniform(&mut r, d_e, d_k, d_e, d_k),
                ),
            }
        });
        let gate_contextual = selection.contextual.then(|| {
            FusionGate::declare(
                &mut store,
                &mut r,
                "gate.contextual",
                spec.features.d_k,
                spec.extractor.d_x,
            )
        });
        let gate_spk = selection.speaker_embedding.then(|| {
            FusionGate::declare(
                &mut store,
                &mut r,
                "gate.spk",
                spec.encoder.pooled_dim(),
                spec.extractor.d_x,
            )
        });
        let band_encoder = BandEncoderParams::declare(
            &mut store,
            &mut r,
            &scheme,
            spec.extractor.d_x,
            selection.tf_map.is_some(),
        );
        let blocks = (0..spec.extractor.n_blocks)
            .map(|i| {
                BlockParams::declare(
                    &mut store,
                    &mut r,
                    i,
                    spec.extractor.d_x,
                    spec.extractor.rnn_hidden,
                )
            })
            .collect();
        let decoder = MaskDecoderParams::declare(
            &mut store,
            &mut r,
            &scheme,
            spec.extractor.d_x,
            spec.extractor.mask_hidden,
        );
        if spec.encoder.freeze {
            store.freeze_prefix(ENCODER_PARAM_PREFIX);
        }
        Ok(Self {
            spec,
            scheme,
            store,
            params: ModelParams {
                encoder: encoder_params,
                attention,
                gate_contextual,
                gate_spk,
                band_encoder,
                blocks,
                decoder,
            },
        })
    }

    pub fn config_hash(&self) -> String {
        self.spec.config_hash()
    }

    /// Eval-mode frame embeddings for a waveform (detached from any tape).
    fn frame_embeddings(
        &self,
        w: &Waveform,
        id: Option<&str>,
    ) -> Result<FrameEmbeddings, ModelError> {
        match &self.spec.encoder.mode {
            EncoderMode::Toy => {
                let params = self
                    .params
                    .encoder
                    .as_ref()
                    .expect("toy encoder params exist when features need them");
                Ok(encoder::encode_frames(
                    &self.store,
                    params,
                    &self.spec.encoder,
                    w,
                )?)
            }
            EncoderMode::Precomputed { dir } => {
                let id = id.ok_or(ModelError::MissingUtteranceIds)?;
                Ok(encoder::load_precomputed_checked(
                    dir,
                    id,
                    &self.spec.encoder,
                )?)
            }
        }
    }

    /// Enrollment embeddings as a `(T_e, d_e)` tape variable. Toy-mode
    /// embeddings run on the tape (gradients flow unless frozen);
    /// precomputed ones enter as constants.
    fn enrollment_embeddings_on_tape(
        &self,
        tape: &mut Tape,
        enrollment: &Waveform,
        id: Option<&str>,
    ) -> Result<Var, ModelError> {
        match &self.spec.encoder.mode {
            EncoderMode::Toy => {
                let params = self
                    .params
                    .encoder
                    .as_ref()
                    .expect("toy encoder params exist when features need them");
                Ok(encoder::encode_tape(
                    tape,
                    &self.store,
                    params,
                    &self.spec.encoder,
                    enrollment,
                )?)
            }
            EncoderMode::Precomputed { .. } => {
                let e = self.frame_embeddings(enrollment, id)?;
                Ok(tape.constant2(e.values.t().to_owned()))
            }
        }
    }

    /// Record the full forward pass and return the estimate variable.
    pub fn forward(
        &self,
        tape: &mut Tape,
        mixture: &Waveform,
        enrollment: &Waveform,
        ids: Option<ExampleIds<'_>>,
    ) -> Result<Var, ModelError> {
        Ok(self
            .forward_with_artifacts(tape, mixture, enrollment, ids)?
            .estimate)
    }

    /// Record the full forward pass for one (mixture, enrollment) pair and
    /// return the estimate waveform variable (same length as the mixture)
    /// together with the constructed speaker features.
    ///
    /// The TF-map feature is constructed outside the tape from detached
    /// embeddings, matching the frozen-encoder reading of the similarity
    /// matrix; contextual and utterance-embedding paths run on the tape.
    pub fn forward_with_artifacts(
        &self,
        tape: &mut Tape,
        mixture: &Waveform,
        enrollment: &Waveform,
        ids: Option<ExampleIds<'_>>,
    ) -> Result<ForwardArtifacts, ModelError> {
        for w in [mixture, enrollment] {
            if w.sample_rate != self.spec.sample_rate {
                return Err(ModelError::SampleRate {
                    expected: self.spec.sample_rate,
                    got: w.sample_rate,
                });
            }
        }
        let selection = self.spec.features.selection;
        let spec_x = dsp::stft(mixture, &self.spec.stft)?;
        let t_x = spec_x.frames();
        let spec_re = tape.constant2(spec_x.re.t().to_owned());
        let spec_im = tape.constant2(spec_x.im.t().to_owned());

        // TF-map conditioning (detached).
        let tf_feature = match selection.tf_map {
            None => None,
            Some(mode) => {
                let b_x = dsp::magnitude(&spec_x);
                let b_e = dsp::magnitude(&dsp::stft(enrollment, &self.spec.stft)?);
                let h = match mode {
                    SimilarityMode::Spectral => features::weight_matrix_spectral(
                        &b_e,
                        &b_x,
                        self.spec.features.softmax_axis,
                    )?,
                    SimilarityMode::Embedding => {
                        // Both embedding sequences are aligned to their
                        // signal's STFT frame grid so H conforms with the
                        // enrollment basis frames.
                        let stft_hop = self.spec.stft.hop as f64 / self.spec.sample_rate as f64;
                        let e_e_raw =
                            self.frame_embeddings(enrollment, ids.map(|i| i.enrollment))?;
                        let e_e = FrameEmbeddings {
                            values: encoder::align_to_stft_frames(
                                &e_e_raw,
                                &self.spec.stft,
                                self.spec.sample_rate,
                                b_e.frames(),
                            ),
                            frame_hop: stft_hop,
                        };
                        let e_x_raw = self.frame_embeddings(mixture, ids.map(|i| i.mixture))?;
                        let e_x = FrameEmbeddings {
                            values: encoder::align_to_stft_frames(
                                &e_x_raw,
                                &self.spec.stft,
                                self.spec.sample_rate,
                                t_x,
                            ),
                            frame_hop: stft_hop,
                        };
                        features::weight_matrix_embedding(
                            &e_e,
                            &e_x,
                            self.spec.features.softmax_axis,
                        )?
                    }
                };
                let f = features::tf_map(&b_e, &h, &b_x, mode, self.spec.features.energy_recovery)?;
                Some(tape.constant2(f.values.t().to_owned()))
            }
        };

        let encoded = extractor::band_split_encode(
            tape,
            &self.store,
            &self.params.band_encoder,
            &self.scheme,
            spec_re,
            spec_im,
            tf_feature,
            self.spec.extractor.d_x,
        )?;

        // Speaker features for the multiplicative gates.
        let enroll_emb = if selection.contextual || selection.speaker_embedding {
            Some(self.enrollment_embeddings_on_tape(
                tape,
                enrollment,
                ids.map(|i| i.enrollment),
            )?)
        } else {
            None
        };
        let contextual_feature = if selection.contextual {
            let attn = self.params.attention.as_ref().expect("attention params");
            let queries_src = match self.spec.extractor.query_source {
                QuerySource::BandMean => extractor::band_mean(tape, encoded),
                QuerySource::PreEncoderMagnitude => {
                    let b_x = dsp::magnitude(&spec_x);
                    tape.constant2(b_x.values.t().to_owned())
                }
            };
            let e_e = enroll_emb.expect("enrollment embeddings");
            let w_q = tape.param(&self.store, attn.w_q);
            let w_k = tape.param(&self.store, attn.w_k);
            let w_v = tape.param(&self.store, attn.w_v);
            let q = tape.matmul(queries_src, w_q);
            let k = tape.matmul(e_e, w_k);
            let v = tape.matmul(e_e, w_v);
            let k_t = tape.transpose(k);
            let scores = tape.matmul(q, k_t);
            let scores = tape.scale(scores, 1.0 / (self.spec.features.d_k as f64).sqrt());
            let attn_w = tape.softmax_rows(scores);
            Some(tape.matmul(attn_w, v))
        } else {
            None
        };
        let spk_feature = if selection.speaker_embedding {
            let e_e = enroll_emb.expect("enrollment embeddings");
            let pooled = encoder::pool_tape(tape, e_e, self.spec.encoder.pooling);
            Some(tape.tile_rows(pooled, t_x))
        } else {
            None
        };

        let apply_gates = |tape: &mut Tape, x: extractor::BandFeatures| -> Result<extractor::BandFeatures, ModelError> {
            let mut x = x;
            if let (Some(gate), Some(f)) = (&self.params.gate_contextual, contextual_feature) {
                x = gate.apply(tape, &self.store, x, f)?;
            }
            if let (Some(gate), Some(f)) = (&self.params.gate_spk, spk_feature) {
                x = gate.apply(tape, &self.store, x, f)?;
            }
            Ok(x)
        };

        let mut x = encoded;
        if self.spec.extractor.fuse_per_block {
            for block in &self.params.blocks {
                x = apply_gates(tape, x)?;
                x = extractor::sequence_model(tape, &self.store, std::slice::from_ref(block), x);
            }
        } else {
            x = apply_gates(tape, x)?;
            x = extractor::sequence_model(tape, &self.store, &self.params.blocks, x);
        }

        let (mask_re, mask_im) =
            extractor::decode_mask(tape, &self.store, &self.params.decoder, &self.scheme, x);
        let estimate = extractor::apply_mask_and_synthesize(
            tape,
            mask_re,
            mask_im,
            spec_re,
            spec_im,
            &self.spec.stft,
            mixture.len(),
        );
        Ok(ForwardArtifacts {
            estimate,
            tf_map: tf_feature,
            contextual: contextual_feature,
            speaker_embedding: spk_feature,
        })
    }

    /// Eval-mode convenience: run the forward pass and return the estimate.
    pub fn estimate(
        &self,
        mixture: &Waveform,
        enrollment: &Waveform,
        ids: Option<ExampleIds<'_>>,
    ) -> Result<Waveform, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, mixture, enrollment, ids)?;
        let samples: Vec<f64> = tape.value(out).iter().cloned().collect();
        Ok(Waveform::new(samples, self.spec.sample_rate))
    }
}

/// Reference contextual-embedding weights extracted from the store, for
/// checking the tape path against the pure implementation.
pub fn attention_weights(model: &TseModel) -> Option<features::AttentionWeights> {
    let ids = model.params.attention.as_ref()?;
    let get = |id: ParamId| -> Array2<f64> {
        model
            .store
            .value(id)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    };
    Some(features::AttentionWeights {
        w_q: get(ids.w_q),
        w_k: get(ids.w_k),
        w_v: get(ids.w_v),
    })
}
