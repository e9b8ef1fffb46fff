//! Multi-level speaker features built from an enrollment utterance.
//!
//! Three conditioning levels feed the extractor:
//! * a TF-map spectral feature: every enrollment magnitude frame acts as a
//!   non-negative basis vector, combined per mixture frame by a
//!   similarity-derived column-stochastic weighting matrix, with the frame
//!   energy recovered from the mixture;
//! * a contextual embedding: cross-attention from the encoded mixture
//!   (queries) over enrollment frame-level embeddings (keys/values);
//! * a tiled utterance-level speaker embedding.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{length_normalize_columns, MagnitudeSpectrogram};
use crate::encoder::{FrameEmbeddings, UtteranceEmbedding};

#[derive(Error, Debug)]
pub enum FeatureError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Which similarity space produces the weighting matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilarityMode {
    Spectral,
    Embedding,
}

/// Softmax axis for the weighting matrix. `Enrollment` (default) makes each
/// mixture frame's weights a distribution over enrollment frames;
/// `Mixture` is kept for the ablation harness and is row-stochastic instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SoftmaxAxis {
    Enrollment,
    Mixture,
}

/// How the TF-map recovers mixture-frame energy. `Projection` projects the
/// mixture frame orthogonally onto the unit feature direction;
/// `NormMatch` rescales the unit feature column to the mixture column norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnergyRecovery {
    Projection,
    NormMatch,
}

/// Which speaker features condition the extractor. The three flags mirror
/// the ablation axes: TF-map (off / spectral / embedding similarity),
/// contextual embedding, and tiled utterance-level speaker embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub tf_map: Option<SimilarityMode>,
    pub contextual: bool,
    pub speaker_embedding: bool,
}

impl FeatureSelection {
    pub fn none() -> Self {
        Self {
            tf_map: None,
            contextual: false,
            speaker_embedding: false,
        }
    }

    pub fn needs_encoder(&self) -> bool {
        self.tf_map == Some(SimilarityMode::Embedding) || self.contextual || self.speaker_embedding
    }

    pub fn any(&self) -> bool {
        self.tf_map.is_some() || self.contextual || self.speaker_embedding
    }

    /// Short label used in reports, e.g. `tfmap-emb+ctx`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        match self.tf_map {
            Some(SimilarityMode::Spectral) => parts.push("tfmap-spec".to_string()),
            Some(SimilarityMode::Embedding) => parts.push("tfmap-emb".to_string()),
            None => {}
        }
        if self.contextual {
            parts.push("ctx".to_string());
        }
        if self.speaker_embedding {
            parts.push("spk".to_string());
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub selection: FeatureSelection,
    /// Attention dimension for the contextual embedding.
    pub d_k: usize,
    pub softmax_axis: SoftmaxAxis,
    pub energy_recovery: EnergyRecovery,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            selection: FeatureSelection {
                tf_map: Some(SimilarityMode::Embedding),
                contextual: true,
                speaker_embedding: false,
            },
            d_k: 128,
            softmax_axis: SoftmaxAxis::Enrollment,
            energy_recovery: EnergyRecovery::Projection,
        }
    }
}

/// Non-negative `T_e x T_x` weighting matrix; every column sums to one
/// under the default enrollment-axis softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub values: Array2<f64>,
}

impl WeightMatrix {
    pub fn enrollment_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn mixture_frames(&self) -> usize {
        self.values.ncols()
    }

    /// Largest deviation of any column sum from one.
    pub fn column_sum_error(&self) -> f64 {
        self.values
            .axis_iter(Axis(1))
            .map(|c| (c.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Spectral-level conditioning feature, `D_f x T_x`, non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct TfMapFeature {
    pub values: Array2<f64>,
    pub similarity_mode: SimilarityMode,
}

/// Time-varying embedding-level feature, `T_x x d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualEmbeddingFeature {
    pub values: Array2<f64>,
}

/// Utterance embedding tiled along time, `T_x x D_e`; all rows identical.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbeddingFeature {
    pub values: Array2<f64>,
}

/// Plain-array attention weights for the reference computation. The trained
/// model holds the same three matrices as tape parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

impl AttentionWeights {
    pub fn d_k(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn validate(&self, d_x: usize, d_e: usize) -> Result<(), FeatureError> {
        let d_k = self.w_q.ncols();
        if self.w_q.nrows() != d_x || self.w_k.nrows() != d_e || self.w_v.nrows() != d_e {
            return Err(FeatureError::DimensionMismatch(format!(
                "attention weights expect d_x={d_x}, d_e={d_e}; got w_q {:?}, w_k {:?}, w_v {:?}",
                self.w_q.dim(),
                self.w_k.dim(),
                self.w_v.dim()
            )));
        }
        if self.w_k.ncols() != d_k || self.w_v.ncols() != d_k {
            return Err(FeatureError::DimensionMismatch(format!(
                "attention d_k disagrees: {} / {} / {}",
                d_k,
                self.w_k.ncols(),
                self.w_v.ncols()
            )));
        }
        Ok(())
    }
}

/// Column-wise softmax (each column becomes a distribution).
fn softmax_columns(mut scores: Array2<f64>) -> Array2<f64> {
    for mut col in scores.axis_iter_mut(Axis(1)) {
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        col.mapv_inplace(|x| (x - max).exp());
        let sum: f64 = col.sum();
        col.mapv_inplace(|x| x / sum);
    }
    scores
}

fn softmax_rows(mut scores: Array2<f64>) -> Array2<f64> {
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    scores
}

fn weight_matrix_from_arrays(
    enroll: &Array2<f64>,
    mixture: &Array2<f64>,
    axis: SoftmaxAxis,
    what: &str,
) -> Result<WeightMatrix, FeatureError> {
    if enroll.nrows() != mixture.nrows() {
        return Err(FeatureError::DimensionMismatch(format!(
            "{what}: enrollment has {} rows, mixture has {}",
            enroll.nrows(),
            mixture.nrows()
        )));
    }
    let e_hat = length_normalize_columns(enroll);
    let x_hat = length_normalize_columns(mixture);
    let scores = e_hat.t().dot(&x_hat);
    let values = match axis {
        SoftmaxAxis::Enrollment => softmax_columns(scores),
        SoftmaxAxis::Mixture => softmax_rows(scores),
    };
    Ok(WeightMatrix { values })
}

/// Weighting matrix from cosine similarity between spectral frames.
pub fn weight_matrix_spectral(
    b_e: &MagnitudeSpectrogram,
    b_x: &MagnitudeSpectrogram,
    axis: SoftmaxAxis,
) -> Result<WeightMatrix, FeatureError> {
    weight_matrix_from_arrays(&b_e.values, &b_x.values, axis, "spectral similarity")
}

/// Weighting matrix from cosine similarity between frame-level embeddings.
/// `e_x` must already be aligned to the mixture's STFT frame count.
pub fn weight_matrix_embedding(
    e_e: &FrameEmbeddings,
    e_x: &FrameEmbeddings,
    axis: SoftmaxAxis,
) -> Result<WeightMatrix, FeatureError> {
    weight_matrix_from_arrays(&e_e.values, &e_x.values, axis, "embedding similarity")
}

/// TF-map: combine enrollment frames by the weighting matrix, then recover
/// per-frame energy from the mixture. All-zero raw columns pass through as
/// zero.
pub fn tf_map(
    b_e: &MagnitudeSpectrogram,
    h: &WeightMatrix,
    b_x: &MagnitudeSpectrogram,
    mode: SimilarityMode,
    energy: EnergyRecovery,
) -> Result<TfMapFeature, FeatureError> {
    if b_e.frames() != h.enrollment_frames() {
        return Err(FeatureError::DimensionMismatch(format!(
            "tf_map: enrollment has {} frames but H has {} rows",
            b_e.frames(),
            h.enrollment_frames()
        )));
    }
    if b_x.frames() != h.mixture_frames() {
        return Err(FeatureError::DimensionMismatch(format!(
            "tf_map: mixture has {} frames but H has {} columns",
            b_x.frames(),
            h.mixture_frames()
        )));
    }
    if b_e.bins() != b_x.bins() {
        return Err(FeatureError::DimensionMismatch(format!(
            "tf_map: enrollment has {} bins, mixture has {}",
            b_e.bins(),
            b_x.bins()
        )));
    }
    let raw = b_e.values.dot(&h.values);
    let mut values = Array2::zeros(raw.dim());
    for t in 0..raw.ncols() {
        let col = raw.column(t);
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let mix_col = b_x.values.column(t);
        let scale = match energy {
            EnergyRecovery::Projection => {
                col.iter().zip(mix_col).map(|(r, m)| r * m).sum::<f64>() / (norm * norm)
            }
            EnergyRecovery::NormMatch => {
                mix_col.iter().map(|x| x * x).sum::<f64>().sqrt() / norm
            }
        };
        let mut out_col = values.column_mut(t);
        out_col.assign(&col.mapv(|x| x * scale));
    }
    Ok(TfMapFeature {
        values,
        similarity_mode: mode,
    })
}

/// Cross-attention contextual embedding: queries from the encoded mixture
/// `x (D_x x T_x)`, keys/values from enrollment frame embeddings.
pub fn contextual_embedding(
    x: &Array2<f64>,
    e_e: &FrameEmbeddings,
    w: &AttentionWeights,
) -> Result<ContextualEmbeddingFeature, FeatureError> {
    w.validate(x.nrows(), e_e.dim())?;
    let d_k = w.d_k();
    let q = x.t().dot(&w.w_q);
    let k = e_e.values.t().dot(&w.w_k);
    let v = e_e.values.t().dot(&w.w_v);
    let scores = q.dot(&k.t()).mapv(|s| s / (d_k as f64).sqrt());
    let attn = softmax_rows(scores);
    Ok(ContextualEmbeddingFeature {
        values: attn.dot(&v),
    })
}

/// Replicate an utterance embedding along the time axis.
pub fn tile_speaker_embedding(e: &UtteranceEmbedding, t_x: usize) -> SpeakerEmbeddingFeature {
    assert!(t_x >= 1, "need at least one frame");
    let d = e.values.len();
    let mut values = Array2::zeros((t_x, d));
    for mut row in values.axis_iter_mut(Axis(0)) {
        row.assign(&e.values);
    }
    SpeakerEmbeddingFeature { values }
}

/// Convenience constructor for tests and dumps.
pub fn utterance_embedding(values: Vec<f64>) -> UtteranceEmbedding {
    UtteranceEmbedding {
        values: Array1::from_vec(values),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;
    use crate::rng;
    use proptest::prelude::*;
    use rand::RngExt;

    fn mag(values: Array2<f64>) -> MagnitudeSpectrogram {
        MagnitudeSpectrogram {
            values,
            config: StftConfig::default(),
        }
    }

    fn emb(values: Array2<f64>) -> FrameEmbeddings {
        FrameEmbeddings {
            values,
            frame_hop: 0.02,
        }
    }

    fn random_mag(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
        let mut r = rng::stream(seed, &[0xf0]);
        Array2::from_shape_fn((rows, cols), |_| r.random_range(0.0..2.0))
    }

    fn random_arr(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
        let mut r = rng::stream(seed, &[0xf1]);
        Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.5..1.5))
    }

    /// Scalar-loop reference for the weighting matrix.
    fn weight_matrix_oracle(enroll: &Array2<f64>, mixture: &Array2<f64>) -> Array2<f64> {
        let (d, te) = enroll.dim();
        let tx = mixture.ncols();
        let mut cos = Array2::<f64>::zeros((te, tx));
        for i in 0..te {
            for j in 0..tx {
                let mut dot = 0.0;
                let mut ne = 0.0;
                let mut nx = 0.0;
                for k in 0..d {
                    dot += enroll[[k, i]] * mixture[[k, j]];
                    ne += enroll[[k, i]] * enroll[[k, i]];
                    nx += mixture[[k, j]] * mixture[[k, j]];
                }
                cos[[i, j]] = if ne > 0.0 && nx > 0.0 {
                    dot / (ne.sqrt() * nx.sqrt())
                } else {
                    0.0
                };
            }
        }
        for j in 0..tx {
            let mut sum = 0.0;
            for i in 0..te {
                cos[[i, j]] = cos[[i, j]].exp();
                sum += cos[[i, j]];
            }
            for i in 0..te {
                cos[[i, j]] /= sum;
            }
        }
        cos
    }

    #[test]
    fn single_enrollment_frame_gives_all_ones_row() {
        let b_e = mag(random_mag(1, 5, 1));
        let b_x = mag(random_mag(2, 5, 4));
        let h = weight_matrix_spectral(&b_e, &b_x, SoftmaxAxis::Enrollment).unwrap();
        assert_eq!(h.values.dim(), (1, 4));
        assert!(h.values.iter().all(|&x| (x - 1.0).abs() < 1e-15));

        let e_e = emb(random_arr(3, 6, 1));
        let e_x = emb(random_arr(4, 6, 3));
        let h = weight_matrix_embedding(&e_e, &e_x, SoftmaxAxis::Enrollment).unwrap();
        assert!(h.values.iter().all(|&x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn two_frame_closed_form_softmax() {
        let b_e = mag(ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        let b_x = mag(ndarray::arr2(&[[1.0], [0.0]]));
        let h = weight_matrix_spectral(&b_e, &b_x, SoftmaxAxis::Enrollment).unwrap();
        // cosine sims are [1, 0]; softmax over the enrollment axis.
        let e = 1f64.exp();
        assert!((h.values[[0, 0]] - e / (e + 1.0)).abs() < 1e-12);
        assert!((h.values[[1, 0]] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((h.values[[0, 0]] - 0.7311).abs() < 1e-4);
        assert!((h.values[[1, 0]] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn orthonormal_embeddings_peak_on_matching_index() {
        let eye = Array2::<f64>::eye(4);
        let e_e = emb(eye.clone());
        let e_x = emb(eye);
        let h = weight_matrix_embedding(&e_e, &e_x, SoftmaxAxis::Enrollment).unwrap();
        let e = 1f64.exp();
        let peak = e / (e + 3.0);
        let off = 1.0 / (e + 3.0);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { peak } else { off };
                assert!((h.values[[i, j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weight_matrices_match_loop_oracle() {
        let b_e = random_mag(5, 6, 5);
        let b_x = random_mag(6, 6, 4);
        let h = weight_matrix_spectral(&mag(b_e.clone()), &mag(b_x.clone()), SoftmaxAxis::Enrollment)
            .unwrap();
        let oracle = weight_matrix_oracle(&b_e, &b_x);
        for (a, b) in h.values.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let e_e = random_arr(7, 5, 5);
        let e_x = random_arr(8, 5, 4);
        let h = weight_matrix_embedding(&emb(e_e.clone()), &emb(e_x.clone()), SoftmaxAxis::Enrollment)
            .unwrap();
        let oracle = weight_matrix_oracle(&e_e, &e_x);
        for (a, b) in h.values.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let b_e = mag(random_mag(9, 5, 2));
        let b_x = mag(random_mag(10, 6, 3));
        assert!(weight_matrix_spectral(&b_e, &b_x, SoftmaxAxis::Enrollment).is_err());
    }

    #[test]
    fn tf_map_identity_case_returns_enrollment() {
        let b = random_mag(11, 5, 3);
        let h = WeightMatrix {
            values: Array2::eye(3),
        };
        let f = tf_map(
            &mag(b.clone()),
            &h,
            &mag(b.clone()),
            SimilarityMode::Spectral,
            EnergyRecovery::Projection,
        )
        .unwrap();
        for (a, b) in f.values.iter().zip(b.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tf_map_single_basis_frame_scales_by_projection() {
        let b_e = mag(ndarray::arr2(&[[3.0], [4.0]]));
        // Any column-stochastic H with one enrollment frame is all-ones.
        let h = WeightMatrix {
            values: Array2::from_elem((1, 2), 1.0),
        };
        let b_x = mag(ndarray::arr2(&[[5.0, 0.0], [0.0, 5.0]]));
        let f = tf_map(&b_e, &h, &b_x, SimilarityMode::Spectral, EnergyRecovery::Projection)
            .unwrap();
        // unit basis direction is [0.6, 0.8]; projections are 3 and 4.
        assert!((f.values[[0, 0]] - 0.6 * 3.0).abs() < 1e-12);
        assert!((f.values[[1, 0]] - 0.8 * 3.0).abs() < 1e-12);
        assert!((f.values[[0, 1]] - 0.6 * 4.0).abs() < 1e-12);
        assert!((f.values[[1, 1]] - 0.8 * 4.0).abs() < 1e-12);
    }

    #[test]
    fn tf_map_matches_loop_oracle_and_stays_collinear() {
        let b_e = random_mag(12, 6, 4);
        let b_x = random_mag(13, 6, 3);
        let h = weight_matrix_spectral(&mag(b_e.clone()), &mag(b_x.clone()), SoftmaxAxis::Enrollment)
            .unwrap();
        let f = tf_map(
            &mag(b_e.clone()),
            &h,
            &mag(b_x.clone()),
            SimilarityMode::Spectral,
            EnergyRecovery::Projection,
        )
        .unwrap();
        // loop oracle
        let (d, te) = b_e.dim();
        let tx = b_x.ncols();
        for t in 0..tx {
            let mut raw = vec![0.0f64; d];
            for k in 0..d {
                for i in 0..te {
                    raw[k] += b_e[[k, i]] * h.values[[i, t]];
                }
            }
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            let proj: f64 = raw
                .iter()
                .enumerate()
                .map(|(k, r)| r / norm * b_x[[k, t]])
                .sum();
            for k in 0..d {
                let expect = raw[k] / norm * proj;
                assert!((f.values[[k, t]] - expect).abs() < 1e-6);
                assert!(f.values[[k, t]] >= 0.0);
            }
            // collinearity: output column is a non-negative multiple of raw
            let scale = f.values[[0, t]] / raw[0];
            assert!(scale >= 0.0);
            for k in 1..d {
                assert!((f.values[[k, t]] - scale * raw[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tf_map_norm_match_variant_matches_mixture_norm() {
        let b_e = random_mag(14, 5, 3);
        let b_x = random_mag(15, 5, 2);
        let h = weight_matrix_spectral(&mag(b_e.clone()), &mag(b_x.clone()), SoftmaxAxis::Enrollment)
            .unwrap();
        let f = tf_map(
            &mag(b_e),
            &h,
            &mag(b_x.clone()),
            SimilarityMode::Spectral,
            EnergyRecovery::NormMatch,
        )
        .unwrap();
        for t in 0..2 {
            let fn2: f64 = f.values.column(t).iter().map(|x| x * x).sum();
            let xn2: f64 = b_x.column(t).iter().map(|x| x * x).sum();
            assert!((fn2.sqrt() - xn2.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn contextual_single_key_copies_value_row() {
        let x = random_arr(16, 4, 3); // D_x=4, T_x=3
        let e_e = emb(random_arr(17, 5, 1)); // T_e = 1
        let w = AttentionWeights {
            w_q: random_arr(18, 4, 2),
            w_k: random_arr(19, 5, 2),
            w_v: random_arr(20, 5, 2),
        };
        let f = contextual_embedding(&x, &e_e, &w).unwrap();
        let v = e_e.values.t().dot(&w.w_v);
        for t in 0..3 {
            for c in 0..2 {
                assert!((f.values[[t, c]] - v[[0, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn contextual_matches_triple_loop_oracle() {
        let d_x = 4;
        let d_e = 5;
        let d_k = 2;
        let t_x = 3;
        let t_e = 4;
        let x = random_arr(21, d_x, t_x);
        let e_e = random_arr(22, d_e, t_e);
        let w = AttentionWeights {
            w_q: random_arr(23, d_x, d_k),
            w_k: random_arr(24, d_e, d_k),
            w_v: random_arr(25, d_e, d_k),
        };
        let f = contextual_embedding(&x, &emb(e_e.clone()), &w).unwrap();
        // scalar loops
        let mut q = Array2::<f64>::zeros((t_x, d_k));
        let mut k_m = Array2::<f64>::zeros((t_e, d_k));
        let mut v_m = Array2::<f64>::zeros((t_e, d_k));
        for t in 0..t_x {
            for c in 0..d_k {
                for d in 0..d_x {
                    q[[t, c]] += x[[d, t]] * w.w_q[[d, c]];
                }
            }
        }
        for t in 0..t_e {
            for c in 0..d_k {
                for d in 0..d_e {
                    k_m[[t, c]] += e_e[[d, t]] * w.w_k[[d, c]];
                    v_m[[t, c]] += e_e[[d, t]] * w.w_v[[d, c]];
                }
            }
        }
        for t in 0..t_x {
            let mut scores = vec![0.0f64; t_e];
            for (j, s) in scores.iter_mut().enumerate() {
                for c in 0..d_k {
                    *s += q[[t, c]] * k_m[[j, c]];
                }
                *s /= (d_k as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for c in 0..d_k {
                let mut out = 0.0;
                for j in 0..t_e {
                    out += exps[j] / sum * v_m[[j, c]];
                }
                assert!((f.values[[t, c]] - out).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn tile_examples() {
        let e = utterance_embedding(vec![1.0, 2.0]);
        let f = tile_speaker_embedding(&e, 3);
        assert_eq!(f.values.dim(), (3, 2));
        for row in f.values.rows() {
            assert_eq!(row.to_vec(), vec![1.0, 2.0]);
        }
        let f1 = tile_speaker_embedding(&e, 1);
        assert_eq!(f1.values.dim(), (1, 2));
    }

    fn permute_columns(a: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros(a.raw_dim());
        for (j, &p) in perm.iter().enumerate() {
            out.column_mut(j).assign(&a.column(p));
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn columns_are_stochastic_and_bounded(
            seed in 0u64..1000, d in 2usize..8, te in 1usize..8, tx in 1usize..8
        ) {
            let b_e = mag(random_mag(seed, d, te));
            let b_x = mag(random_mag(seed + 5000, d, tx));
            let h = weight_matrix_spectral(&b_e, &b_x, SoftmaxAxis::Enrollment).unwrap();
            prop_assert!(h.column_sum_error() < 1e-6);
            prop_assert!(h.values.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn tf_map_is_non_negative(
            seed in 0u64..1000, d in 2usize..8, te in 1usize..8, tx in 1usize..8
        ) {
            let b_e = mag(random_mag(seed, d, te));
            let b_x = mag(random_mag(seed + 7000, d, tx));
            let h = weight_matrix_spectral(&b_e, &b_x, SoftmaxAxis::Enrollment).unwrap();
            let f = tf_map(&b_e, &h, &b_x, SimilarityMode::Spectral, EnergyRecovery::Projection)
                .unwrap();
            prop_assert!(f.values.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn enrollment_scale_invariance(
            seed in 0u64..1000, frame in 0usize..4, alpha in 0.1f64..10.0
        ) {
            let b_e = random_mag(seed, 5, 4);
            let b_x = mag(random_mag(seed + 9000, 5, 3));
            let h0 = weight_matrix_spectral(&mag(b_e.clone()), &b_x, SoftmaxAxis::Enrollment)
                .unwrap();
            let mut scaled = b_e.clone();
            scaled.column_mut(frame).mapv_inplace(|x| alpha * x);
            let h1 = weight_matrix_spectral(&mag(scaled), &b_x, SoftmaxAxis::Enrollment).unwrap();
            for (a, b) in h0.values.iter().zip(h1.values.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn enrollment_permutation_invariance(seed in 0u64..1000) {
            let mut r = rng::stream(seed, &[0xfe]);
            let te = 5usize;
            let mut perm: Vec<usize> = (0..te).collect();
            for i in (1..te).rev() {
                let j = r.random_range(0..=i);
                perm.swap(i, j);
            }
            // tf_map path
            let b_e = random_mag(seed + 100, 6, te);
            let b_x = mag(random_mag(seed + 200, 6, 3));
            let h0 = weight_matrix_spectral(&mag(b_e.clone()), &b_x, SoftmaxAxis::Enrollment)
                .unwrap();
            let f0 = tf_map(&mag(b_e.clone()), &h0, &b_x, SimilarityMode::Spectral,
                EnergyRecovery::Projection).unwrap();
            let b_e_p = permute_columns(&b_e, &perm);
            let h1 = weight_matrix_spectral(&mag(b_e_p.clone()), &b_x, SoftmaxAxis::Enrollment)
                .unwrap();
            let f1 = tf_map(&mag(b_e_p), &h1, &b_x, SimilarityMode::Spectral,
                EnergyRecovery::Projection).unwrap();
            for (a, b) in f0.values.iter().zip(f1.values.iter()) {
                prop_assert!((a - b).abs() <= 1e-5);
            }
            // contextual path
            let x = random_arr(seed + 300, 4, 3);
            let e_e = random_arr(seed + 400, 5, te);
            let w = AttentionWeights {
                w_q: random_arr(seed + 500, 4, 2),
                w_k: random_arr(seed + 600, 5, 2),
                w_v: random_arr(seed + 700, 5, 2),
            };
            let c0 = contextual_embedding(&x, &emb(e_e.clone()), &w).unwrap();
            let c1 = contextual_embedding(&x, &emb(permute_columns(&e_e, &perm)), &w).unwrap();
            for (a, b) in c0.values.iter().zip(c1.values.iter()) {
                prop_assert!((a - b).abs() <= 1e-5);
            }
        }

        #[test]
        fn tiled_rows_are_identical(seed in 0u64..1000, t_x in 1usize..10) {
            let mut r = rng::stream(seed, &[0xf2]);
            let e = utterance_embedding((0..6).map(|_| r.random_range(-2.0..2.0)).collect());
            let f = tile_speaker_embedding(&e, t_x);
            let first = f.values.row(0).to_owned();
            for row in f.values.rows() {
                for (a, b) in row.iter().zip(first.iter()) {
                    prop_assert!(a == b);
                }
            }
        }
    }
}
