//! Signal front-end: STFT analysis/synthesis, magnitude, column
//! normalization and WAV I/O.
//!
//! Conventions, fixed so feature dumps are byte-comparable across runs:
//! * frames are not centered: frame `t` covers samples `[t*hop, t*hop+n_fft)`
//!   and only complete frames are taken, so `T = 1 + (len - n_fft) / hop`;
//! * synthesis overlap-adds windowed inverse frames and divides by the
//!   accumulated squared window, which reconstructs every covered sample
//!   exactly (up to rounding) for any window;
//! * the inverse transform ignores the imaginary parts of the DC and Nyquist
//!   bins (a real signal has none).

use std::cell::RefCell;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use realfft::num_complex::Complex;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum DspError {
    #[error("signal of {len} samples is shorter than one frame (n_fft = {n_fft})")]
    SignalTooShort { len: usize, n_fft: usize },
    #[error("invalid STFT config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("waveform invalid: {0}")]
    InvalidWaveform(String),
    #[error("unsupported WAV {path}: {detail}")]
    UnsupportedWav { path: String, detail: String },
    #[error("{path}: sample rate {got} Hz does not match expected {expected} Hz (no implicit resampling)")]
    SampleRateMismatch {
        path: String,
        expected: u32,
        got: u32,
    },
    #[error("WAV I/O error for {path}: {source}")]
    Wav {
        path: String,
        #[source]
        source: hound::Error,
    },
}

/// Minimum accumulated squared-window mass treated as covered in synthesis.
const OLA_EPS: f64 = 1e-12;

/// Mono waveform, nominal amplitude range [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if self.sample_rate == 0 {
            return Err(DspError::InvalidWaveform("sample_rate must be > 0".into()));
        }
        if self.samples.is_empty() {
            return Err(DspError::InvalidWaveform("length must be >= 1".into()));
        }
        if !self.samples.iter().all(|x| x.is_finite()) {
            return Err(DspError::InvalidWaveform(
                "samples contain non-finite values".into(),
            ));
        }
        Ok(())
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(&self, n: usize) -> Vec<f64> {
        match self {
            // Periodic Hann.
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

/// STFT analysis/synthesis parameters. 640/160 at 16 kHz (40 ms / 10 ms)
/// puts every band boundary used by the extractor on a whole 25 Hz bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            n_fft: 640,
            hop: 160,
            window: Window::Hann,
        }
    }
}

impl StftConfig {
    pub fn new(n_fft: usize, hop: usize, window: Window) -> Self {
        Self { n_fft, hop, window }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count for a signal of `len` samples.
    pub fn frames(&self, len: usize) -> Result<usize, DspError> {
        if len < self.n_fft {
            return Err(DspError::SignalTooShort {
                len,
                n_fft: self.n_fft,
            });
        }
        Ok(1 + (len - self.n_fft) / self.hop)
    }

    /// Samples reconstructed from `t` frames.
    pub fn synth_len(&self, t_frames: usize) -> usize {
        (t_frames - 1) * self.hop + self.n_fft
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(DspError::InvalidConfig(format!(
                "need 0 < hop <= n_fft, got hop={} n_fft={}",
                self.hop, self.n_fft
            )));
        }
        if self.n_fft % 2 != 0 {
            return Err(DspError::InvalidConfig(format!(
                "n_fft must be even, got {}",
                self.n_fft
            )));
        }
        match self.window {
            Window::Hann => {
                if self.n_fft % self.hop != 0 || self.hop > self.n_fft / 2 {
                    return Err(DspError::InvalidConfig(format!(
                        "Hann window requires hop dividing n_fft with at least 2x overlap \
                         for constant overlap-add, got hop={} n_fft={}",
                        self.hop, self.n_fft
                    )));
                }
            }
            Window::Rectangular => {}
        }
        Ok(())
    }
}

/// Complex spectrogram, `(n_fft/2 + 1) x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub re: Array2<f64>,
    pub im: Array2<f64>,
    pub config: StftConfig,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn bins(&self) -> usize {
        self.re.nrows()
    }

    pub fn frames(&self) -> usize {
        self.re.ncols()
    }
}

/// Non-negative magnitude spectrogram, `(n_fft/2 + 1) x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeSpectrogram {
    pub values: Array2<f64>,
    pub config: StftConfig,
}

impl MagnitudeSpectrogram {
    pub fn bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }
}

thread_local! {
    static PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

/// Unnormalized forward real FFT: X_k = sum_j x_j e^{-2 pi i j k / n}.
pub fn rfft(x: &[f64]) -> Vec<Complex<f64>> {
    PLANNER.with(|p| {
        let plan = p.borrow_mut().plan_fft_forward(x.len());
        let mut input = x.to_vec();
        let mut spec = vec![Complex::new(0.0, 0.0); x.len() / 2 + 1];
        plan.process(&mut input, &mut spec)
            .expect("rfft: length mismatch is impossible here");
        spec
    })
}

/// Normalized inverse real FFT; imaginary parts of DC and Nyquist are ignored.
pub fn irfft(spec: &[Complex<f64>], n: usize) -> Vec<f64> {
    assert_eq!(spec.len(), n / 2 + 1, "irfft: bad spectrum length");
    PLANNER.with(|p| {
        let plan = p.borrow_mut().plan_fft_inverse(n);
        let mut buf = spec.to_vec();
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        let mut out = vec![0.0; n];
        plan.process(&mut buf, &mut out)
            .expect("irfft: length mismatch is impossible here");
        let scale = 1.0 / n as f64;
        for v in &mut out {
            *v *= scale;
        }
        out
    })
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram, DspError> {
    cfg.validate()?;
    w.validate()?;
    let t_frames = cfg.frames(w.len())?;
    let window = cfg.window.coefficients(cfg.n_fft);
    let bins = cfg.bins();
    let mut re = Array2::<f64>::zeros((bins, t_frames));
    let mut im = Array2::<f64>::zeros((bins, t_frames));
    let mut frame = vec![0.0f64; cfg.n_fft];
    for t in 0..t_frames {
        let start = t * cfg.hop;
        for i in 0..cfg.n_fft {
            frame[i] = w.samples[start + i] * window[i];
        }
        let spec = rfft(&frame);
        for (k, c) in spec.iter().enumerate() {
            re[[k, t]] = c.re;
            im[[k, t]] = c.im;
        }
    }
    Ok(ComplexSpectrogram {
        re,
        im,
        config: *cfg,
        sample_rate: w.sample_rate,
    })
}

pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform, DspError> {
    s.config.validate()?;
    if s.bins() != s.config.bins() {
        return Err(DspError::ShapeMismatch {
            expected: format!("{} bins (n_fft/2+1)", s.config.bins()),
            got: format!("{} bins", s.bins()),
        });
    }
    if s.im.dim() != s.re.dim() {
        return Err(DspError::ShapeMismatch {
            expected: format!("{:?}", s.re.dim()),
            got: format!("{:?}", s.im.dim()),
        });
    }
    let samples = istft_tf(s.re.t(), s.im.t(), &s.config);
    Ok(Waveform::new(samples, s.sample_rate))
}

/// Synthesis kernel over `(T, F)` frame-major views. Linear in its inputs.
pub fn istft_tf(re: ArrayView2<f64>, im: ArrayView2<f64>, cfg: &StftConfig) -> Vec<f64> {
    let t_frames = re.nrows();
    let bins = re.ncols();
    debug_assert_eq!(bins, cfg.bins());
    let window = cfg.window.coefficients(cfg.n_fft);
    let out_len = cfg.synth_len(t_frames);
    let mut acc = vec![0.0f64; out_len];
    let mut norm = vec![0.0f64; out_len];
    let mut spec = vec![Complex::new(0.0, 0.0); bins];
    for t in 0..t_frames {
        for k in 0..bins {
            spec[k] = Complex::new(re[[t, k]], im[[t, k]]);
        }
        let frame = irfft(&spec, cfg.n_fft);
        let start = t * cfg.hop;
        for i in 0..cfg.n_fft {
            acc[start + i] += frame[i] * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    for i in 0..out_len {
        if norm[i] > OLA_EPS {
            acc[i] /= norm[i];
        } else {
            acc[i] = 0.0;
        }
    }
    acc
}

/// Adjoint of [`istft_tf`] with respect to its `(T, F)` re/im inputs.
///
/// The synthesis map is linear; for each frame the adjoint gathers the
/// normalized output cotangent under the window and pushes it through the
/// adjoint of the normalized inverse real FFT, which is a forward real FFT
/// scaled by `c_k / n` with `c_k = 2` except `c_k = 1` at DC and Nyquist.
/// DC/Nyquist imaginary parts receive zero (synthesis ignores them).
pub fn istft_tf_adjoint(
    grad_out: &[f64],
    t_frames: usize,
    cfg: &StftConfig,
) -> (Array2<f64>, Array2<f64>) {
    let bins = cfg.bins();
    let window = cfg.window.coefficients(cfg.n_fft);
    let out_len = cfg.synth_len(t_frames);
    assert_eq!(grad_out.len(), out_len, "istft adjoint: cotangent length");
    let mut norm = vec![0.0f64; out_len];
    for t in 0..t_frames {
        let start = t * cfg.hop;
        for i in 0..cfg.n_fft {
            norm[start + i] += window[i] * window[i];
        }
    }
    let mut g = vec![0.0f64; out_len];
    for i in 0..out_len {
        if norm[i] > OLA_EPS {
            g[i] = grad_out[i] / norm[i];
        }
    }
    let mut gre = Array2::<f64>::zeros((t_frames, bins));
    let mut gim = Array2::<f64>::zeros((t_frames, bins));
    let n = cfg.n_fft as f64;
    let mut q = vec![0.0f64; cfg.n_fft];
    for t in 0..t_frames {
        let start = t * cfg.hop;
        for i in 0..cfg.n_fft {
            q[i] = g[start + i] * window[i];
        }
        let spec = rfft(&q);
        for (k, c) in spec.iter().enumerate() {
            let ck = if k == 0 || k == cfg.n_fft / 2 { 1.0 } else { 2.0 };
            gre[[t, k]] = ck / n * c.re;
            gim[[t, k]] = if k == 0 || k == cfg.n_fft / 2 {
                0.0
            } else {
                ck / n * c.im
            };
        }
    }
    (gre, gim)
}

pub fn magnitude(s: &ComplexSpectrogram) -> MagnitudeSpectrogram {
    let mut values = Array2::<f64>::zeros(s.re.dim());
    ndarray::Zip::from(&mut values)
        .and(&s.re)
        .and(&s.im)
        .for_each(|m, &re, &im| *m = (re * re + im * im).sqrt());
    MagnitudeSpectrogram {
        values,
        config: s.config,
    }
}

/// Normalize each column to unit L2 norm; all-zero columns stay zero.
pub fn length_normalize_columns(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            col.mapv_inplace(|x| x / norm);
        }
    }
    out
}

/// SNR of `estimate` against `reference` in dB over the given sample range.
pub fn snr_db(reference: &[f64], estimate: &[f64], range: std::ops::Range<usize>) -> f64 {
    let sig: f64 = reference[range.clone()].iter().map(|x| x * x).sum();
    let err: f64 = reference[range.clone()]
        .iter()
        .zip(&estimate[range])
        .map(|(r, e)| (r - e) * (r - e))
        .sum();
    if err == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (sig / err).log10()
}

pub fn read_wav(path: &Path) -> Result<Waveform, DspError> {
    let display = path.display().to_string();
    let mut reader = hound::WavReader::open(path).map_err(|source| DspError::Wav {
        path: display.clone(),
        source,
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(DspError::UnsupportedWav {
            path: display,
            detail: format!("expected mono, got {} channels", spec.channels),
        });
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|source| DspError::Wav {
                path: display.clone(),
                source,
            })?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(|source| DspError::Wav {
                path: display.clone(),
                source,
            })?,
        (fmt, bits) => {
            return Err(DspError::UnsupportedWav {
                path: display,
                detail: format!("expected 16-bit PCM or float32, got {bits}-bit {fmt:?}"),
            })
        }
    };
    let w = Waveform::new(samples, spec.sample_rate);
    w.validate()?;
    Ok(w)
}

/// Read a WAV and reject any sample rate other than `expected`.
pub fn read_wav_expect(path: &Path, expected: u32) -> Result<Waveform, DspError> {
    let w = read_wav(path)?;
    if w.sample_rate != expected {
        return Err(DspError::SampleRateMismatch {
            path: path.display().to_string(),
            expected,
            got: w.sample_rate,
        });
    }
    Ok(w)
}

/// Write a mono float32 WAV.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<(), DspError> {
    let display = path.display().to_string();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|source| DspError::Wav {
        path: display.clone(),
        source,
    })?;
    for &s in &w.samples {
        writer
            .write_sample(s as f32)
            .map_err(|source| DspError::Wav {
                path: display.clone(),
                source,
            })?;
    }
    writer.finalize().map_err(|source| DspError::Wav {
        path: display,
        source,
    })
}
