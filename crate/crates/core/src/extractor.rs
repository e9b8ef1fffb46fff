//! Band-split recurrent mask extractor.
//!
//! The mixture spectrogram is split into subbands; each band's real/imag
//! channels are normalized and projected to a shared feature dimension.
//! Speaker features gate the encoded bands multiplicatively, a stack of
//! dual-path bidirectional recurrent blocks alternates along time and band
//! axes, and per-band decoders emit a complex mask that is applied to the
//! mixture before synthesis.
//!
//! Band features are carried as one `(n_bands * T, d_x)` band-major matrix:
//! row `b * T + t` holds band `b` at frame `t`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bands::{BandError, BandSplitScheme};
use crate::dsp::StftConfig;
use crate::tensor::nn::{BiasInit, Linear, Lstm, RmsNorm};
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Error, Debug)]
pub enum ExtractorError {
    #[error("band scheme: {0}")]
    Bands(#[from] BandError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BandSchemeSpec {
    /// The published 100/200/500 Hz + 6-8 kHz plan.
    Published { nyquist_own_band: bool },
    /// Near-uniform split, used by the desk-scale preset.
    Uniform { n_bands: usize },
}

impl BandSchemeSpec {
    pub fn build(&self, sample_rate: u32, stft: &StftConfig) -> Result<BandSplitScheme, BandError> {
        match self {
            BandSchemeSpec::Published { nyquist_own_band } => {
                crate::bands::build_band_scheme(sample_rate, stft, *nyquist_own_band)
            }
            BandSchemeSpec::Uniform { n_bands } => {
                BandSplitScheme::uniform(stft.bins(), *n_bands)
            }
        }
    }
}

/// Where attention queries come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuerySource {
    /// Mean over bands of the encoded mixture (`d_x` features per frame).
    BandMean,
    /// The raw magnitude spectrogram (`n_fft/2+1` features per frame).
    PreEncoderMagnitude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub d_x: usize,
    pub rnn_hidden: usize,
    pub n_blocks: usize,
    pub mask_hidden: usize,
    pub scheme: BandSchemeSpec,
    pub query_source: QuerySource,
    /// Re-apply the multiplicative speaker gates before every block instead
    /// of once before the first.
    pub fuse_per_block: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            d_x: 128,
            rnn_hidden: 192,
            n_blocks: 6,
            mask_hidden: 512,
            scheme: BandSchemeSpec::Published {
                nyquist_own_band: true,
            },
            query_source: QuerySource::BandMean,
            fuse_per_block: false,
        }
    }
}

/// Encoded mixture bands on the tape plus their logical shape.
#[derive(Debug, Clone, Copy)]
pub struct BandFeatures {
    pub values: Var,
    pub n_bands: usize,
    pub d_x: usize,
    pub t_x: usize,
}

/// Per-band input encoder: separate norms for spectrogram channels and
/// TF-map channels, then a linear projection to `d_x`.
///
/// The spectrogram group carries `[re, im, |X|]` per bin: the magnitude
/// channel is redundant with re/im but phase-invariant, which is what the
/// mask mostly depends on; without it the recurrent stack spends most of its
/// training budget learning to undo the per-frame phase rotation.
#[derive(Debug, Clone)]
pub struct BandEncoderParams {
    pub norm_spec: Vec<RmsNorm>,
    pub norm_tf: Option<Vec<RmsNorm>>,
    pub proj: Vec<Linear>,
}

/// Spectrogram channel groups per bin (re, im, magnitude).
pub const SPEC_CHANNELS: usize = 3;

impl BandEncoderParams {
    pub fn declare(
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
        scheme: &BandSplitScheme,
        d_x: usize,
        with_tf_map: bool,
    ) -> Self {
        let mut norm_spec = Vec::new();
        let mut norm_tf = with_tf_map.then(Vec::new);
        let mut proj = Vec::new();
        for (b, _) in scheme.bands.iter().enumerate() {
            let w = scheme.width(b);
            norm_spec.push(RmsNorm::declare(
                store,
                &format!("enc.band{b}.norm_spec"),
                SPEC_CHANNELS * w,
            ));
            if let Some(nt) = norm_tf.as_mut() {
                nt.push(RmsNorm::declare(store, &format!("enc.band{b}.norm_tf"), w));
            }
            let channels = if with_tf_map {
                (SPEC_CHANNELS + 1) * w
            } else {
                SPEC_CHANNELS * w
            };
            proj.push(Linear::declare(
                store,
                rng,
                &format!("enc.band{b}.proj"),
                channels,
                d_x,
                Some(BiasInit::Zero),
            ));
        }
        Self {
            norm_spec,
            norm_tf,
            proj,
        }
    }
}

/// Encode `(T, F)` real/imag spectrogram halves (plus optional TF-map
/// channels) into band features.
pub fn band_split_encode(
    tape: &mut Tape,
    store: &ParamStore,
    params: &BandEncoderParams,
    scheme: &BandSplitScheme,
    spec_re: Var,
    spec_im: Var,
    tf_map: Option<Var>,
    d_x: usize,
) -> Result<BandFeatures, ExtractorError> {
    let (t_x, bins) = {
        let shape = tape.value(spec_re).shape();
        (shape[0], shape[1])
    };
    if !scheme.validate(bins) {
        return Err(ExtractorError::ShapeMismatch(format!(
            "band scheme covers {} bins but spectrogram has {bins}",
            scheme.total_bins()
        )));
    }
    if let Some(tf) = tf_map {
        let tf_shape = tape.value(tf).shape().to_vec();
        if tf_shape != [t_x, bins] {
            return Err(ExtractorError::ShapeMismatch(format!(
                "tf-map is {tf_shape:?}, expected [{t_x}, {bins}]"
            )));
        }
    }
    if tf_map.is_some() != params.norm_tf.is_some() {
        return Err(ExtractorError::ShapeMismatch(
            "model was built with a different tf-map setting".into(),
        ));
    }
    // Phase-invariant magnitude channel; the spectrogram enters as constants
    // so this costs three nodes and no backward work.
    let re_sq = tape.mul(spec_re, spec_re);
    let im_sq = tape.mul(spec_im, spec_im);
    let power = tape.add(re_sq, im_sq);
    let mag = tape.powf(power, 0.5);
    let mut encoded = Vec::with_capacity(scheme.num_bands());
    for (b, &(lo, hi)) in scheme.bands.iter().enumerate() {
        let re_b = tape.slice_cols(spec_re, lo, hi + 1);
        let im_b = tape.slice_cols(spec_im, lo, hi + 1);
        let mag_b = tape.slice_cols(mag, lo, hi + 1);
        let spec_b = tape.concat_cols(&[re_b, im_b, mag_b]);
        // Per-band, per-frame RMS over the spectrogram channels. The TF-map
        // channels are scaled by the same factor rather than their own: the
        // conditioning enters in units of the band's mixture level, so "no
        // target energy in this band" stays visible after normalization.
        let sq = tape.mul(spec_b, spec_b);
        let ms = tape.sum_cols(sq);
        let ms = tape.scale(ms, 1.0 / (SPEC_CHANNELS * (hi - lo + 1)) as f64);
        let ms = tape.add_scalar(ms, crate::tensor::nn::RMS_EPS);
        let inv = tape.powf(ms, -0.5);
        let spec_scaled = tape.mul_col(spec_b, inv);
        let gain_spec = tape.param(store, params.norm_spec[b].gain);
        let spec_n = tape.mul_row(spec_scaled, gain_spec);
        let input = match (tf_map, params.norm_tf.as_ref()) {
            (Some(tf), Some(norms)) => {
                let tf_b = tape.slice_cols(tf, lo, hi + 1);
                let tf_scaled = tape.mul_col(tf_b, inv);
                let gain_tf = tape.param(store, norms[b].gain);
                let tf_n = tape.mul_row(tf_scaled, gain_tf);
                tape.concat_cols(&[spec_n, tf_n])
            }
            _ => spec_n,
        };
        let proj = params.proj[b].import(tape, store);
        encoded.push(proj.apply(tape, input));
    }
    let values = tape.concat_rows(&encoded);
    Ok(BandFeatures {
        values,
        n_bands: scheme.num_bands(),
        d_x,
        t_x,
    })
}

/// Multiplicative speaker-information gate: a linear map of the per-frame
/// feature, tiled over bands. The bias starts at one and the weights small,
/// so a fresh gate is near-identity while every upstream parameter still
/// receives gradient. Zeroing the weights makes it the exact identity.
#[derive(Debug, Clone)]
pub struct FusionGate {
    pub proj: Linear,
}

impl FusionGate {
    pub fn declare(
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
        name: &str,
        d_feature: usize,
        d_x: usize,
    ) -> Self {
        let mut w = crate::tensor::nn::xavier_uniform(rng, d_feature, d_x, d_feature, d_x);
        w.mapv_inplace(|x| 0.1 * x);
        let w = w.into_dimensionality::<ndarray::Ix2>().unwrap();
        let proj =
            Linear::declare_with(store, name, w, Some(ndarray::Array1::from_elem(d_x, 1.0)));
        Self { proj }
    }

    /// Make the gate compute exactly one regardless of its input.
    pub fn set_identity(&self, store: &mut ParamStore) {
        let shape = store.value(self.proj.w).shape().to_vec();
        store.set_value(self.proj.w, ndarray::ArrayD::zeros(ndarray::IxDyn(&shape)));
        if let Some(b) = self.proj.b {
            let cols = store.value(b).shape()[1];
            store.set_value(
                b,
                ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, cols]), 1.0),
            );
        }
    }

    /// `x'[b, :, t] = x[b, :, t] * g(f[t])`.
    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: BandFeatures,
        feature: Var,
    ) -> Result<BandFeatures, ExtractorError> {
        let f_shape = tape.value(feature).shape().to_vec();
        if f_shape[0] != x.t_x {
            return Err(ExtractorError::ShapeMismatch(format!(
                "gate feature has {} frames, band features have {}",
                f_shape[0], x.t_x
            )));
        }
        let proj = self.proj.import(tape, store);
        let gate = proj.apply(tape, feature);
        let tiled = tape.tile_rows(gate, x.n_bands);
        let values = tape.mul(x.values, tiled);
        Ok(BandFeatures { values, ..x })
    }
}

/// One dual-path block: time-axis BLSTM shared across bands, then band-axis
/// BLSTM shared across frames, each pre-normed with a residual connection.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub time_norm: RmsNorm,
    pub time_fwd: Lstm,
    pub time_bwd: Lstm,
    pub time_proj: Linear,
    pub band_norm: RmsNorm,
    pub band_fwd: Lstm,
    pub band_bwd: Lstm,
    pub band_proj: Linear,
}

impl BlockParams {
    pub fn declare(
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
        index: usize,
        d_x: usize,
        hidden: usize,
    ) -> Self {
        let p = |s: &str| format!("blocks.{index}.{s}");
        // Residual-branch outputs start small so a fresh stack is close to
        // the identity; the recurrent cores keep full-scale initialization.
        let small_proj = |store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, name: &str| {
            let mut w = crate::tensor::nn::xavier_uniform(rng, 2 * hidden, d_x, 2 * hidden, d_x);
            w.mapv_inplace(|x| 0.1 * x);
            Linear::declare_with(
                store,
                name,
                w.into_dimensionality::<ndarray::Ix2>().unwrap(),
                Some(ndarray::Array1::zeros(d_x)),
            )
        };
        Self {
            time_norm: RmsNorm::declare(store, &p("time.norm"), d_x),
            time_fwd: Lstm::declare(store, rng, &p("time.fwd"), d_x, hidden),
            time_bwd: Lstm::declare(store, rng, &p("time.bwd"), d_x, hidden),
            time_proj: small_proj(store, rng, &p("time.proj")),
            band_norm: RmsNorm::declare(store, &p("band.norm"), d_x),
            band_fwd: Lstm::declare(store, rng, &p("band.fwd"), d_x, hidden),
            band_bwd: Lstm::declare(store, rng, &p("band.bwd"), d_x, hidden),
            band_proj: small_proj(store, rng, &p("band.proj")),
        }
    }
}

/// Band-major `(b*T + t)` to time-major `(t*B + b)` row permutation.
fn band_major_from_time_major(n_bands: usize, t_x: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(n_bands * t_x);
    for b in 0..n_bands {
        for t in 0..t_x {
            perm.push(t * n_bands + b);
        }
    }
    perm
}

/// Bidirectional recurrence over equal-sized steps. `perm`, when present,
/// reorders the input rows once so each step is a contiguous row range of
/// `step_len` rows.
fn bidir_over_steps(
    tape: &mut Tape,
    store: &ParamStore,
    fwd: &Lstm,
    bwd: &Lstm,
    input: Var,
    perm: Option<&[usize]>,
    n_steps: usize,
    step_len: usize,
) -> Vec<Var> {
    let fwd_vars = fwd.import(tape, store);
    let bwd_vars = bwd.import(tape, store);
    let input = match perm {
        Some(p) => tape.gather_rows(input, p.to_vec()),
        None => input,
    };
    let xw_f = tape.matmul(input, fwd_vars.w_ih);
    let xw_b = tape.matmul(input, bwd_vars.w_ih);
    let mut pre_f = Vec::with_capacity(n_steps);
    let mut pre_b = Vec::with_capacity(n_steps);
    for s in 0..n_steps {
        pre_f.push(tape.slice_rows(xw_f, s * step_len, (s + 1) * step_len));
        pre_b.push(tape.slice_rows(xw_b, s * step_len, (s + 1) * step_len));
    }
    let h_f = fwd_vars.run(tape, &pre_f, false);
    let h_b = bwd_vars.run(tape, &pre_b, true);
    h_f.iter()
        .zip(&h_b)
        .map(|(f, b)| tape.concat_cols(&[*f, *b]))
        .collect()
}

/// Apply the dual-path recurrent stack; shape is preserved.
pub fn sequence_model(
    tape: &mut Tape,
    store: &ParamStore,
    blocks: &[BlockParams],
    x: BandFeatures,
) -> BandFeatures {
    let (n_bands, t_x) = (x.n_bands, x.t_x);
    // Row `b*T + t` -> time-major `t*B + b` and back.
    let to_time_major: Vec<usize> = (0..t_x)
        .flat_map(|t| (0..n_bands).map(move |b| b * t_x + t))
        .collect();
    let to_band_major = band_major_from_time_major(n_bands, t_x);
    let mut values = x.values;
    for block in blocks {
        // Time axis: rows per step are the bands at one frame.
        let norm = block.time_norm.import(tape, store);
        let normed = norm.apply(tape, values);
        let h = bidir_over_steps(
            tape,
            store,
            &block.time_fwd,
            &block.time_bwd,
            normed,
            Some(&to_time_major),
            t_x,
            n_bands,
        );
        let stacked = tape.concat_rows(&h); // time-major
        let stacked = tape.gather_rows(stacked, to_band_major.clone());
        let proj = block.time_proj.import(tape, store);
        let update = proj.apply(tape, stacked);
        values = tape.add(values, update);
        // Band axis: rows per step are the frames of one band.
        let norm = block.band_norm.import(tape, store);
        let normed = norm.apply(tape, values);
        let h = bidir_over_steps(
            tape,
            store,
            &block.band_fwd,
            &block.band_bwd,
            normed,
            None,
            n_bands,
            t_x,
        );
        let stacked = tape.concat_rows(&h); // already band-major
        let proj = block.band_proj.import(tape, store);
        let update = proj.apply(tape, stacked);
        values = tape.add(values, update);
    }
    BandFeatures { values, ..x }
}

/// Per-band mask decoder: two-layer MLP with a gated (GLU-style) complex
/// output.
#[derive(Debug, Clone)]
pub struct MaskDecoderParams {
    pub fc1: Vec<Linear>,
    pub fc2: Vec<Linear>,
}

impl MaskDecoderParams {
    pub fn declare(
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
        scheme: &BandSplitScheme,
        d_x: usize,
        hidden: usize,
    ) -> Self {
        let mut fc1 = Vec::new();
        let mut fc2 = Vec::new();
        for (b, _) in scheme.bands.iter().enumerate() {
            let w = scheme.width(b);
            fc1.push(Linear::declare(
                store,
                rng,
                &format!("dec.band{b}.fc1"),
                d_x,
                hidden,
                Some(BiasInit::Zero),
            ));
            // Output head starts near the unit mask (real part ~1, imag ~0):
            // the untrained extractor passes the mixture through and training
            // refines from there rather than from silence.
            let mut w2 = crate::tensor::nn::xavier_uniform(rng, hidden, 4 * w, hidden, 4 * w);
            w2.mapv_inplace(|x| 0.15 * x);
            let mut bias = ndarray::Array1::<f64>::zeros(4 * w);
            bias.slice_mut(ndarray::s![..w]).fill(2.0);
            fc2.push(Linear::declare_with(
                store,
                &format!("dec.band{b}.fc2"),
                w2.into_dimensionality::<ndarray::Ix2>().unwrap(),
                Some(bias),
            ));
        }
        Self { fc1, fc2 }
    }
}

/// Decode the complex mask from band features; returns `(T, F)` halves.
pub fn decode_mask(
    tape: &mut Tape,
    store: &ParamStore,
    params: &MaskDecoderParams,
    scheme: &BandSplitScheme,
    x: BandFeatures,
) -> (Var, Var) {
    let t_x = x.t_x;
    let mut re_parts = Vec::with_capacity(scheme.num_bands());
    let mut im_parts = Vec::with_capacity(scheme.num_bands());
    for b in 0..scheme.num_bands() {
        let w = scheme.width(b);
        let xb = tape.slice_rows(x.values, b * t_x, (b + 1) * t_x);
        let fc1 = params.fc1[b].import(tape, store);
        let h = fc1.apply(tape, xb);
        let h = tape.tanh(h);
        let fc2 = params.fc2[b].import(tape, store);
        let out = fc2.apply(tape, h);
        let a_re = tape.slice_cols(out, 0, w);
        let a_im = tape.slice_cols(out, w, 2 * w);
        let g_re = tape.slice_cols(out, 2 * w, 3 * w);
        let g_im = tape.slice_cols(out, 3 * w, 4 * w);
        let g_re = tape.sigmoid(g_re);
        let g_im = tape.sigmoid(g_im);
        re_parts.push(tape.mul(a_re, g_re));
        im_parts.push(tape.mul(a_im, g_im));
    }
    (tape.concat_cols(&re_parts), tape.concat_cols(&im_parts))
}

/// Apply a complex mask to `(T, F)` spectrogram halves, synthesize, and
/// match the output length to `target_len` (pad the lost tail with zeros).
pub fn apply_mask_and_synthesize(
    tape: &mut Tape,
    mask_re: Var,
    mask_im: Var,
    spec_re: Var,
    spec_im: Var,
    stft: &StftConfig,
    target_len: usize,
) -> Var {
    let rr = tape.mul(mask_re, spec_re);
    let ii = tape.mul(mask_im, spec_im);
    let ri = tape.mul(mask_re, spec_im);
    let ir = tape.mul(mask_im, spec_re);
    let est_re = tape.sub(rr, ii);
    let est_im = tape.add(ri, ir);
    let wave = tape.istft(est_re, est_im, *stft);
    let have = tape.value(wave).shape()[0];
    if have == target_len {
        wave
    } else if have > target_len {
        tape.slice_rows(wave, 0, target_len)
    } else {
        let pad = tape.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[target_len - have])));
        tape.concat_rows(&[wave, pad])
    }
}

/// Mean over bands of encoded features: `(B*T, d_x) -> (T, d_x)`.
pub fn band_mean(tape: &mut Tape, x: BandFeatures) -> Var {
    tape.mean_group_rows(x.values, x.n_bands)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{self, StftConfig, Waveform, Window};
    use crate::rng;
    use ndarray::Array2;
    use rand::RngExt;

    fn tiny_scheme() -> BandSplitScheme {
        BandSplitScheme::uniform(9, 2).unwrap()
    }

    fn tiny_stft() -> StftConfig {
        StftConfig::new(16, 4, Window::Hann)
    }

    fn random_spec(tape: &mut Tape, seed: u64, t: usize, bins: usize) -> (Var, Var) {
        let mut r = rng::stream(seed, &[0xa0]);
        let re = Array2::from_shape_fn((t, bins), |_| r.random_range(-1.0..1.0));
        let im = Array2::from_shape_fn((t, bins), |_| r.random_range(-1.0..1.0));
        (tape.constant2(re), tape.constant2(im))
    }

    #[test]
    fn encode_zero_spectrogram_is_finite_with_expected_shape() {
        let scheme = tiny_scheme();
        let mut store = ParamStore::new();
        let mut r = rng::stream(31, &[0xa1]);
        let params = BandEncoderParams::declare(&mut store, &mut r, &scheme, 6, false);
        let mut tape = Tape::new();
        let re = tape.zeros2(5, 9);
        let im = tape.zeros2(5, 9);
        let bf = band_split_encode(&mut tape, &store, &params, &scheme, re, im, None, 6).unwrap();
        assert_eq!(tape.value(bf.values).shape(), &[2 * 5, 6]);
        assert!(tape.value(bf.values).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn encode_is_input_scale_stable_under_norm() {
        let scheme = tiny_scheme();
        let mut store = ParamStore::new();
        let mut r = rng::stream(32, &[0xa2]);
        let params = BandEncoderParams::declare(&mut store, &mut r, &scheme, 6, false);
        let mut tape = Tape::new();
        let (re, im) = random_spec(&mut tape, 33, 5, 9);
        let bf = band_split_encode(&mut tape, &store, &params, &scheme, re, im, None, 6).unwrap();
        let re2 = tape.scale(re, 2.0);
        let im2 = tape.scale(im, 2.0);
        let bf2 = band_split_encode(&mut tape, &store, &params, &scheme, re2, im2, None, 6).unwrap();
        let a = tape.value(bf.values).clone();
        let b = tape.value(bf2.values).clone();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn encode_with_zero_tf_map_matches_spec_only_weights() {
        let scheme = tiny_scheme();
        let mut r = rng::stream(34, &[0xa3]);
        // Model with tf-map channels.
        let mut store_tf = ParamStore::new();
        let params_tf = BandEncoderParams::declare(&mut store_tf, &mut r, &scheme, 6, true);
        // Model without, sharing the spectrogram-channel weights.
        let mut store_plain = ParamStore::new();
        let mut r2 = rng::stream(35, &[0xa4]);
        let params_plain = BandEncoderParams::declare(&mut store_plain, &mut r2, &scheme, 6, false);
        for b in 0..scheme.num_bands() {
            let w = scheme.width(b);
            let full = store_tf
                .value(params_tf.proj[b].w)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let spec_rows = full.slice(ndarray::s![..SPEC_CHANNELS * w, ..]).to_owned();
            store_plain.set_value(params_plain.proj[b].w, spec_rows.into_dyn());
        }
        let mut tape = Tape::new();
        let (re, im) = random_spec(&mut tape, 36, 4, 9);
        let zero_tf = tape.zeros2(4, 9);
        let with_tf = band_split_encode(
            &mut tape,
            &store_tf,
            &params_tf,
            &scheme,
            re,
            im,
            Some(zero_tf),
            6,
        )
        .unwrap();
        let plain =
            band_split_encode(&mut tape, &store_plain, &params_plain, &scheme, re, im, None, 6)
                .unwrap();
        let a = tape.value(with_tf.values).clone();
        let b = tape.value(plain.values).clone();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_gate_identity_at_init_and_zero_kills_output() {
        let scheme = tiny_scheme();
        let mut store = ParamStore::new();
        let mut r = rng::stream(37, &[0xa5]);
        let enc = BandEncoderParams::declare(&mut store, &mut r, &scheme, 6, false);
        let gate = FusionGate::declare(&mut store, &mut r, "gate.test", 3, 6);
        gate.set_identity(&mut store);
        let mut tape = Tape::new();
        let (re, im) = random_spec(&mut tape, 38, 4, 9);
        let bf = band_split_encode(&mut tape, &store, &enc, &scheme, re, im, None, 6).unwrap();
        let mut rf = rng::stream(39, &[0xa6]);
        let feature = Array2::from_shape_fn((4, 3), |_| rf.random_range(-1.0..1.0));
        let feature = tape.constant2(feature);
        let gated = gate.apply(&mut tape, &store, bf, feature).unwrap();
        let a = tape.value(bf.values).clone();
        let b = tape.value(gated.values).clone();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y, "identity-initialized gate changed the features");
        }
        // zero the gate head entirely -> zero output
        store.set_value(
            gate.proj.b.unwrap(),
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 6])),
        );
        let mut tape = Tape::new();
        let (re, im) = random_spec(&mut tape, 38, 4, 9);
        let bf = band_split_encode(&mut tape, &store, &enc, &scheme, re, im, None, 6).unwrap();
        let feature = tape.zeros2(4, 3);
        let gated = gate.apply(&mut tape, &store, bf, feature).unwrap();
        assert!(tape.value(gated.values).iter().all(|&x| x == 0.0));
        assert_eq!(tape.value(gated.values).shape(), &[8, 6]);
    }

    #[test]
    fn sequence_model_preserves_shape_and_zeroed_projections_are_identity() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(40, &[0xa7]);
        let blocks = vec![
            BlockParams::declare(&mut store, &mut r, 0, 6, 5),
            BlockParams::declare(&mut store, &mut r, 1, 6, 5),
        ];
        let mut tape = Tape::new();
        let mut rf = rng::stream(41, &[0xa8]);
        let x = Array2::from_shape_fn((2 * 4, 6), |_| rf.random_range(-1.0..1.0));
        let xv = tape.constant2(x.clone());
        let bf = BandFeatures {
            values: xv,
            n_bands: 2,
            d_x: 6,
            t_x: 4,
        };
        let out = sequence_model(&mut tape, &store, &blocks, bf);
        assert_eq!(tape.value(out.values).shape(), &[8, 6]);
        // zero both projections -> residual identity
        for blk in &blocks {
            store.set_value(
                blk.time_proj.w,
                ndarray::ArrayD::zeros(ndarray::IxDyn(&[10, 6])),
            );
            store.set_value(
                blk.band_proj.w,
                ndarray::ArrayD::zeros(ndarray::IxDyn(&[10, 6])),
            );
        }
        let mut tape = Tape::new();
        let xv = tape.constant2(x.clone());
        let bf = BandFeatures {
            values: xv,
            n_bands: 2,
            d_x: 6,
            t_x: 4,
        };
        let out = sequence_model(&mut tape, &store, &blocks, bf);
        for (a, b) in tape.value(out.values).iter().zip(x.iter()) {
            assert_eq!(*a, *b);
        }
    }

    #[test]
    fn unit_mask_roundtrips_and_zero_mask_silences() {
        let stft = tiny_stft();
        let mut r = rng::stream(42, &[0xa9]);
        let len = 128usize;
        let w = Waveform::new((0..len).map(|_| r.random_range(-0.5..0.5)).collect(), 8000);
        let spec = dsp::stft(&w, &stft).unwrap();
        let t = spec.frames();
        let mut tape = Tape::new();
        let re = tape.constant2(spec.re.t().to_owned());
        let im = tape.constant2(spec.im.t().to_owned());
        let ones = tape.constant2(Array2::from_elem((t, stft.bins()), 1.0));
        let zeros = tape.zeros2(t, stft.bins());
        let est = apply_mask_and_synthesize(&mut tape, ones, zeros, re, im, &stft, len);
        let est = tape.value(est);
        assert_eq!(est.shape(), &[len]);
        let est_slice: Vec<f64> = est.iter().cloned().collect();
        let snr = dsp::snr_db(&w.samples, &est_slice, stft.n_fft..len - stft.n_fft);
        assert!(snr > 50.0, "unit mask SNR {snr}");
        let zest = apply_mask_and_synthesize(&mut tape, zeros, zeros, re, im, &stft, len);
        assert!(tape.value(zest).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn synthesis_output_length_matches_request() {
        let stft = tiny_stft();
        for len in [64usize, 71, 129] {
            let mut tape = Tape::new();
            let t = stft.frames(len).unwrap();
            let re = tape.zeros2(t, stft.bins());
            let im = tape.zeros2(t, stft.bins());
            let est = apply_mask_and_synthesize(&mut tape, re, im, re, im, &stft, len);
            assert_eq!(tape.value(est).shape(), &[len]);
        }
    }
}
