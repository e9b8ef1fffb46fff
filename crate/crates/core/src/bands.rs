//! Frequency band partitioning for the band-split extractor.
//!
//! The default 16 kHz scheme splits the spectrum into 100 Hz subbands below
//! 1.5 kHz, 200 Hz subbands up to 3.5 kHz, 500 Hz subbands up to 6 kHz and a
//! single 6-8 kHz subband; the Nyquist bin forms one final subband of its
//! own, for 32 subbands total. A uniform scheme backs the desk-scale preset.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::StftConfig;

#[derive(Error, Debug)]
pub enum BandError {
    #[error(
        "band boundary {boundary_hz} Hz is not bin-aligned: {bin_hz} Hz per bin with \
         n_fft={n_fft} at {sample_rate} Hz; pick an n_fft that makes {boundary_hz} Hz a whole \
         number of bins (e.g. 640 at 16 kHz)"
    )]
    BoundaryNotAligned {
        boundary_hz: f64,
        bin_hz: f64,
        n_fft: usize,
        sample_rate: u32,
    },
    #[error("sample rate {0} Hz is below the {1} Hz the band plan spans")]
    SampleRateTooLow(u32, f64),
    #[error("cannot split {bins} bins into {bands} bands")]
    TooManyBands { bins: usize, bands: usize },
}

/// Contiguous, non-overlapping bins `[start, end]` (inclusive) per band,
/// covering `0..=n_fft/2` exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandSplitScheme {
    pub bands: Vec<(usize, usize)>,
}

impl BandSplitScheme {
    pub fn num_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn width(&self, band: usize) -> usize {
        let (lo, hi) = self.bands[band];
        hi - lo + 1
    }

    pub fn total_bins(&self) -> usize {
        self.bands.iter().map(|(lo, hi)| hi - lo + 1).sum()
    }

    /// Check the partition property against an STFT bin count.
    pub fn validate(&self, bins: usize) -> bool {
        let mut next = 0usize;
        for &(lo, hi) in &self.bands {
            if lo != next || hi < lo {
                return false;
            }
            next = hi + 1;
        }
        next == bins
    }

    /// Split `bins` into `n_bands` near-uniform contiguous bands.
    pub fn uniform(bins: usize, n_bands: usize) -> Result<Self, BandError> {
        if n_bands == 0 || n_bands > bins {
            return Err(BandError::TooManyBands {
                bins,
                bands: n_bands,
            });
        }
        let base = bins / n_bands;
        let extra = bins % n_bands;
        let mut bands = Vec::with_capacity(n_bands);
        let mut lo = 0usize;
        for b in 0..n_bands {
            let width = base + usize::from(b < extra);
            bands.push((lo, lo + width - 1));
            lo += width;
        }
        Ok(Self { bands })
    }
}

/// The plan behind [`build_band_scheme`]: (upper edge Hz, bandwidth Hz) runs.
const BAND_PLAN: [(f64, f64); 3] = [(1500.0, 100.0), (3500.0, 200.0), (6000.0, 500.0)];
const LAST_BAND_LO_HZ: f64 = 6000.0;
const LAST_BAND_HI_HZ: f64 = 8000.0;

/// Build the default band scheme for a sample rate and STFT config.
///
/// Bin `k` sits at `k * sample_rate / n_fft` Hz; a band `[a, b)` Hz takes the
/// bins in that half-open range. When `nyquist_own_band` the Nyquist bin is
/// appended as its own band (32 bands at 16 kHz / n_fft 640); otherwise it is
/// folded into the last content band (31 bands).
pub fn build_band_scheme(
    sample_rate: u32,
    cfg: &StftConfig,
    nyquist_own_band: bool,
) -> Result<BandSplitScheme, BandError> {
    let bin_hz = sample_rate as f64 / cfg.n_fft as f64;
    if (sample_rate as f64) < 2.0 * LAST_BAND_HI_HZ {
        return Err(BandError::SampleRateTooLow(
            sample_rate,
            2.0 * LAST_BAND_HI_HZ,
        ));
    }
    let to_bin = |hz: f64| -> Result<usize, BandError> {
        let bins = hz / bin_hz;
        if (bins - bins.round()).abs() > 1e-9 {
            return Err(BandError::BoundaryNotAligned {
                boundary_hz: hz,
                bin_hz,
                n_fft: cfg.n_fft,
                sample_rate,
            });
        }
        Ok(bins.round() as usize)
    };
    let mut bands = Vec::new();
    let mut lo_hz = 0.0f64;
    for &(upper, width) in &BAND_PLAN {
        // The width itself must be a whole number of bins.
        to_bin(width)?;
        while lo_hz < upper {
            let hi_hz = lo_hz + width;
            let lo = to_bin(lo_hz)?;
            let hi = to_bin(hi_hz)?;
            bands.push((lo, hi - 1));
            lo_hz = hi_hz;
        }
    }
    debug_assert_eq!(lo_hz, LAST_BAND_LO_HZ);
    let last_lo = to_bin(LAST_BAND_LO_HZ)?;
    let nyquist = cfg.n_fft / 2;
    let last_hi = to_bin(LAST_BAND_HI_HZ.min(sample_rate as f64 / 2.0))?;
    if nyquist_own_band && last_hi == nyquist {
        bands.push((last_lo, last_hi - 1));
        bands.push((nyquist, nyquist));
    } else {
        bands.push((last_lo, nyquist.max(last_hi)));
    }
    Ok(BandSplitScheme { bands })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::Window;

    #[test]
    fn default_scheme_matches_published_band_plan() {
        let cfg = StftConfig::default();
        let scheme = build_band_scheme(16000, &cfg, true).unwrap();
        assert_eq!(scheme.num_bands(), 32);
        // 15 bands of 100 Hz (4 bins), 10 of 200 Hz (8 bins), 5 of 500 Hz
        // (20 bins), one 6-8 kHz band, plus the Nyquist bin.
        let widths: Vec<usize> = (0..scheme.num_bands()).map(|b| scheme.width(b)).collect();
        assert_eq!(&widths[..15], &[4; 15]);
        assert_eq!(&widths[15..25], &[8; 10]);
        assert_eq!(&widths[25..30], &[20; 5]);
        assert_eq!(widths[30], 80);
        assert_eq!(widths[31], 1);
        assert_eq!(scheme.bands[0], (0, 3));
        assert_eq!(scheme.bands[30], (240, 319));
        assert_eq!(scheme.bands[31], (320, 320));
        assert!(scheme.validate(cfg.bins()));
        assert_eq!(scheme.total_bins(), 321);
    }

    #[test]
    fn nyquist_fold_gives_31_bands() {
        let cfg = StftConfig::default();
        let scheme = build_band_scheme(16000, &cfg, false).unwrap();
        assert_eq!(scheme.num_bands(), 31);
        assert_eq!(scheme.bands[30], (240, 320));
        assert!(scheme.validate(cfg.bins()));
    }

    #[test]
    fn misaligned_n_fft_is_rejected_with_hint() {
        let cfg = StftConfig::new(512, 128, Window::Hann);
        let err = build_band_scheme(16000, &cfg, true).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("not bin-aligned"), "{msg}");
        assert!(msg.contains("640"), "{msg}");
    }

    #[test]
    fn uniform_scheme_partitions_bins() {
        let scheme = BandSplitScheme::uniform(129, 8).unwrap();
        assert_eq!(scheme.num_bands(), 8);
        assert!(scheme.validate(129));
        assert!(BandSplitScheme::uniform(4, 9).is_err());
    }
}
