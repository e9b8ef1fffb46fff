//! Speaker encoder: frame-level embeddings and pooled utterance embeddings.
//!
//! Two interchangeable producers sit behind one interface: a small trainable
//! encoder (strided log-magnitude convolution followed by a recurrent layer)
//! and a loader for embeddings exported offline by a larger pre-trained
//! model. The trainable encoder runs on the autodiff tape so it can be
//! optimized jointly with the extractor; the loader stands in for the frozen
//! pre-trained regime.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, StftConfig, Waveform};
use crate::tensor::nn::{BiasInit, Linear, Lstm};
use crate::tensor::{ParamStore, Tape, Var};

#[derive(Error, Debug)]
pub enum EncoderError {
    #[error("waveform is empty")]
    EmptyWaveform,
    #[error("embedding archive {path}: {detail}")]
    Archive { path: String, detail: String },
    #[error(
        "no precomputed embeddings for utterance '{id}' (expected file {file}); \
         archive holds {available} utterances"
    )]
    MissingUtterance {
        id: String,
        file: String,
        available: usize,
    },
    #[error("embedding dimension mismatch: archive holds d_e={archive}, config wants d_e={config}")]
    DimensionMismatch { archive: usize, config: usize },
    #[error("I/O error for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Frame-level embeddings, `D_e x T`, with the hop that maps embedding
/// frames back to signal time.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddings {
    pub values: Array2<f64>,
    pub frame_hop: f64,
}

impl FrameEmbeddings {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }
}

/// Pooled utterance-level embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceEmbedding {
    pub values: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    Mean,
    MeanStd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderMode {
    Toy,
    Precomputed { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Embedding dimension.
    pub d_e: usize,
    /// Output frame hop in seconds.
    pub frame_hop: f64,
    /// Train the toy encoder jointly with the extractor when false.
    pub freeze: bool,
    pub pooling: Pooling,
    pub mode: EncoderMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_e: 64,
            frame_hop: 0.02,
            freeze: false,
            pooling: Pooling::Mean,
            mode: EncoderMode::Toy,
        }
    }
}

impl EncoderConfig {
    /// Samples per inner analysis hop (half the output hop; the stride-2
    /// convolution brings frames to `frame_hop`).
    pub fn inner_hop(&self, sample_rate: u32) -> usize {
        ((self.frame_hop / 2.0) * sample_rate as f64).round().max(1.0) as usize
    }

    pub fn inner_n_fft(&self, sample_rate: u32) -> usize {
        2 * self.inner_hop(sample_rate)
    }

    /// Output frame count for a signal of `len` samples: hop-sized blocks,
    /// tail block zero-padded, stride-2 convolution with symmetric padding.
    pub fn output_frames(&self, len: usize, sample_rate: u32) -> usize {
        let hop0 = self.inner_hop(sample_rate);
        let t0 = len.div_ceil(hop0);
        (t0 / 2).max(1)
    }

    /// Pooled embedding dimension.
    pub fn pooled_dim(&self) -> usize {
        match self.pooling {
            Pooling::Mean => self.d_e,
            Pooling::MeanStd => 2 * self.d_e,
        }
    }
}

const CONV_KERNEL: usize = 4;

/// Trainable toy encoder parameters. The prefix keeps encoder parameters
/// addressable for freezing.
#[derive(Debug, Clone)]
pub struct ToyEncoderParams {
    pub conv: Linear,
    pub lstm: Lstm,
    pub out: Linear,
    pub n_fft_bins: usize,
}

pub const ENCODER_PARAM_PREFIX: &str = "spk_enc.";

impl ToyEncoderParams {
    pub fn declare(
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
        cfg: &EncoderConfig,
        sample_rate: u32,
    ) -> Self {
        let bins = cfg.inner_n_fft(sample_rate) / 2 + 1;
        let conv = Linear::declare(
            store,
            rng,
            "spk_enc.conv",
            CONV_KERNEL * bins,
            cfg.d_e,
            Some(BiasInit::Zero),
        );
        let lstm = Lstm::declare(store, rng, "spk_enc.lstm", cfg.d_e, cfg.d_e);
        let out = Linear::declare(store, rng, "spk_enc.out", cfg.d_e, cfg.d_e, Some(BiasInit::Zero));
        Self {
            conv,
            lstm,
            out,
            n_fft_bins: bins,
        }
    }
}

/// Log-magnitude analysis frames at the inner hop, `(T0, bins)` rows=time.
/// Frame `t` covers `[t*hop0, t*hop0 + n_fft0)`, zero-padded past the end.
fn log_magnitude_frames(w: &Waveform, cfg: &EncoderConfig) -> Array2<f64> {
    let hop0 = cfg.inner_hop(w.sample_rate);
    let n_fft0 = 2 * hop0;
    let t0 = w.len().div_ceil(hop0);
    let bins = n_fft0 / 2 + 1;
    let window: Vec<f64> = (0..n_fft0)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n_fft0 as f64).cos())
        .collect();
    let mut out = Array2::<f64>::zeros((t0, bins));
    let mut frame = vec![0.0f64; n_fft0];
    for t in 0..t0 {
        let start = t * hop0;
        for i in 0..n_fft0 {
            frame[i] = if start + i < w.len() {
                w.samples[start + i] * window[i]
            } else {
                0.0
            };
        }
        let spec = dsp::rfft(&frame);
        for (k, c) in spec.iter().enumerate() {
            out[[t, k]] = (1.0 + (c.re * c.re + c.im * c.im).sqrt()).ln();
        }
    }
    out
}

/// Frame-level encoder forward on the tape; returns `(T, d_e)` rows=time.
pub fn encode_tape(
    tape: &mut Tape,
    store: &ParamStore,
    params: &ToyEncoderParams,
    cfg: &EncoderConfig,
    w: &Waveform,
) -> Result<Var, EncoderError> {
    if w.is_empty() {
        return Err(EncoderError::EmptyWaveform);
    }
    let logmag = log_magnitude_frames(w, cfg);
    let t0 = logmag.nrows();
    let t_out = cfg.output_frames(w.len(), w.sample_rate);
    let bins = logmag.ncols();
    let x = tape.constant2(logmag);
    let zero_row = tape.zeros2(1, bins);
    let padded = tape.concat_rows(&[x, zero_row]);
    // Strided im2col: output frame t sees inner frames 2t-1 .. 2t+2, with
    // the zero row standing in for out-of-range taps.
    let mut taps = Vec::with_capacity(CONV_KERNEL);
    for j in 0..CONV_KERNEL {
        let idx: Vec<usize> = (0..t_out)
            .map(|t| {
                let pos = 2 * t as isize - 1 + j as isize;
                if pos < 0 || pos >= t0 as isize {
                    t0 // zero row
                } else {
                    pos as usize
                }
            })
            .collect();
        taps.push(tape.gather_rows(padded, idx));
    }
    let stacked = tape.concat_cols(&taps);
    let conv = params.conv.import(tape, store);
    let pre_act = conv.apply(tape, stacked);
    let conv_out = tape.tanh(pre_act);
    let lstm = params.lstm.import(tape, store);
    let xw = tape.matmul(conv_out, lstm.w_ih);
    let pre: Vec<Var> = (0..t_out).map(|t| tape.slice_rows(xw, t, t + 1)).collect();
    let h = lstm.run(tape, &pre, false);
    let h_all = tape.concat_rows(&h);
    let out = params.out.import(tape, store);
    Ok(out.apply(tape, h_all))
}

/// Mean (or mean+std) pooling over frames on the tape: `(T, d) -> (1, d')`.
pub fn pool_tape(tape: &mut Tape, emb: Var, pooling: Pooling) -> Var {
    let t = tape.value(emb).shape()[0];
    let mean = tape.sum_rows(emb);
    let mean = tape.scale(mean, 1.0 / t as f64);
    match pooling {
        Pooling::Mean => mean,
        Pooling::MeanStd => {
            let sq = tape.mul(emb, emb);
            let mean_sq = tape.sum_rows(sq);
            let mean_sq = tape.scale(mean_sq, 1.0 / t as f64);
            let mm = tape.mul(mean, mean);
            let var = tape.sub(mean_sq, mm);
            let var = tape.add_scalar(var, 1e-10);
            let std = tape.powf(var, 0.5);
            tape.concat_cols(&[mean, std])
        }
    }
}

/// Eval-mode frame embeddings from the toy encoder (`D_e x T`).
pub fn encode_frames(
    store: &ParamStore,
    params: &ToyEncoderParams,
    cfg: &EncoderConfig,
    w: &Waveform,
) -> Result<FrameEmbeddings, EncoderError> {
    let mut tape = Tape::new();
    let v = encode_tape(&mut tape, store, params, cfg, w)?;
    let values = tape.value2(v).t().to_owned();
    Ok(FrameEmbeddings {
        values,
        frame_hop: cfg.frame_hop,
    })
}

/// Temporal statistics pooling over frames.
pub fn pool(e: &FrameEmbeddings, pooling: Pooling) -> UtteranceEmbedding {
    let t = e.frames() as f64;
    let mean = e.values.sum_axis(Axis(1)) / t;
    match pooling {
        Pooling::Mean => UtteranceEmbedding { values: mean },
        Pooling::MeanStd => {
            let mean_sq = e.values.mapv(|x| x * x).sum_axis(Axis(1)) / t;
            let std = (&mean_sq - &mean.mapv(|m| m * m)).mapv(|v| (v + 1e-10).sqrt());
            let mut out = Array1::zeros(2 * e.dim());
            out.slice_mut(ndarray::s![..e.dim()]).assign(&mean);
            out.slice_mut(ndarray::s![e.dim()..]).assign(&std);
            UtteranceEmbedding { values: out }
        }
    }
}

/// Align embedding frames to STFT frames by nearest frame center; returns
/// `D_e x T_x`.
pub fn align_to_stft_frames(
    e: &FrameEmbeddings,
    stft: &StftConfig,
    sample_rate: u32,
    t_x: usize,
) -> Array2<f64> {
    let mut out = Array2::zeros((e.dim(), t_x));
    let last = e.frames() - 1;
    for t in 0..t_x {
        let center = (t * stft.hop + stft.n_fft / 2) as f64 / sample_rate as f64;
        let u = ((center / e.frame_hop - 0.5).round().max(0.0) as usize).min(last);
        out.column_mut(t).assign(&e.values.column(u));
    }
    out
}

/// Precomputed-embedding archive: `index.json` plus one little-endian
/// float32 file per utterance, row-major `D_e x T`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ArchiveIndex {
    pub d_e: usize,
    pub frame_hop: f64,
    pub entries: BTreeMap<String, String>,
}

fn index_path(dir: &Path) -> PathBuf {
    dir.join("index.json")
}

pub fn read_archive_index(dir: &Path) -> Result<ArchiveIndex, EncoderError> {
    let path = index_path(dir);
    let text = std::fs::read_to_string(&path).map_err(|source| EncoderError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| EncoderError::Archive {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Store one utterance's embeddings, creating or updating the index.
pub fn store_precomputed(
    dir: &Path,
    utterance_id: &str,
    values: &Array2<f32>,
    frame_hop: f64,
) -> Result<(), EncoderError> {
    std::fs::create_dir_all(dir).map_err(|source| EncoderError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut index = if index_path(dir).exists() {
        read_archive_index(dir)?
    } else {
        ArchiveIndex {
            d_e: values.nrows(),
            frame_hop,
            entries: BTreeMap::new(),
        }
    };
    if index.d_e != values.nrows() {
        return Err(EncoderError::Archive {
            path: dir.display().to_string(),
            detail: format!(
                "archive d_e={} but new entry has d_e={}",
                index.d_e,
                values.nrows()
            ),
        });
    }
    let file = format!("{}.bin", utterance_id.replace(['/', '\\'], "_"));
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for row in values.rows() {
        for &v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin_path = dir.join(&file);
    std::fs::write(&bin_path, bytes).map_err(|source| EncoderError::Io {
        path: bin_path.display().to_string(),
        source,
    })?;
    index.entries.insert(utterance_id.to_string(), file);
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(index_path(dir), text).map_err(|source| EncoderError::Io {
        path: index_path(dir).display().to_string(),
        source,
    })?;
    Ok(())
}

/// Load one utterance's embeddings from an archive directory.
pub fn load_precomputed(dir: &Path, utterance_id: &str) -> Result<FrameEmbeddings, EncoderError> {
    let index = read_archive_index(dir)?;
    let file = index.entries.get(utterance_id).ok_or_else(|| {
        EncoderError::MissingUtterance {
            id: utterance_id.to_string(),
            file: dir
                .join(format!("{utterance_id}.bin"))
                .display()
                .to_string(),
            available: index.entries.len(),
        }
    })?;
    let bin_path = dir.join(file);
    let bytes = std::fs::read(&bin_path).map_err(|source| EncoderError::Io {
        path: bin_path.display().to_string(),
        source,
    })?;
    if bytes.len() % 4 != 0 || (bytes.len() / 4) % index.d_e != 0 {
        return Err(EncoderError::Archive {
            path: bin_path.display().to_string(),
            detail: format!(
                "{} bytes is not a whole number of float32 frames at d_e={}",
                bytes.len(),
                index.d_e
            ),
        });
    }
    let t = bytes.len() / 4 / index.d_e;
    let mut values = Array2::zeros((index.d_e, t));
    for d in 0..index.d_e {
        for ti in 0..t {
            let off = (d * t + ti) * 4;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            values[[d, ti]] = v as f64;
        }
    }
    Ok(FrameEmbeddings {
        values,
        frame_hop: index.frame_hop,
    })
}

/// Load from an archive and enforce the configured embedding dimension.
pub fn load_precomputed_checked(
    dir: &Path,
    utterance_id: &str,
    cfg: &EncoderConfig,
) -> Result<FrameEmbeddings, EncoderError> {
    let e = load_precomputed(dir, utterance_id)?;
    if e.dim() != cfg.d_e {
        return Err(EncoderError::DimensionMismatch {
            archive: e.dim(),
            config: cfg.d_e,
        });
    }
    Ok(e)
}
