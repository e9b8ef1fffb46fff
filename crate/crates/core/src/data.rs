//! Dataset plumbing: a synthetic two-speaker mixture generator for
//! desk-scale runs, manifest I/O, and deterministic batch loading. The same
//! manifest schema covers Libri2mix-style real data (the loader never cares
//! where the audio came from).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, Waveform};
use crate::rng;
use rand::RngExt;

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Error, Debug)]
pub enum DataError {
    #[error(transparent)]
    Dsp(#[from] dsp::DspError),
    #[error("manifest {path}: {detail}")]
    Manifest { path: String, detail: String },
    #[error("need at least {need} speakers, got {got}")]
    NotEnoughSpeakers { need: usize, got: usize },
    #[error("at most {max} synthetic speakers fit the f0 range with 10% separation, got {got}")]
    TooManySpeakers { max: usize, got: usize },
    #[error("source has zero energy; cannot set a signal-to-interference ratio")]
    ZeroEnergySource,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("I/O error for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("real layout {path}: {detail}")]
    RealLayout { path: String, detail: String },
}

/// Parameters of one synthetic "speaker": a harmonic complex with a
/// speaker-specific fundamental, spectral tilt and amplitude modulation.
/// Distinct speakers differ in f0 by at least 10%.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpeakerSpec {
    pub speaker_id: String,
    pub f0: f64,
    pub spectral_tilt: f64,
    pub n_harmonics: usize,
    pub mod_rate: f64,
    pub mod_depth: f64,
    pub seed: u64,
}

const F0_LO: f64 = 85.0;
const F0_HI: f64 = 370.0;
const MIN_F0_RATIO: f64 = 1.1;

/// Deterministic speaker roster on a log-spaced f0 grid.
pub fn synth_speaker_specs(n_speakers: usize, seed: u64) -> Result<Vec<SynthSpeakerSpec>, DataError> {
    let max = ((F0_HI / F0_LO).ln() / MIN_F0_RATIO.ln()).floor() as usize + 1;
    if n_speakers > max {
        return Err(DataError::TooManySpeakers {
            max,
            got: n_speakers,
        });
    }
    let ratio = if n_speakers > 1 {
        (F0_HI / F0_LO).powf(1.0 / (n_speakers - 1) as f64)
    } else {
        1.0
    };
    let mut specs = Vec::with_capacity(n_speakers);
    for i in 0..n_speakers {
        let mut r = rng::stream(seed, &[0x5bea, i as u64]);
        specs.push(SynthSpeakerSpec {
            speaker_id: format!("spk{i:03}"),
            f0: F0_LO * ratio.powi(i as i32),
            spectral_tilt: r.random_range(0.6..1.4),
            n_harmonics: r.random_range(10..=18),
            mod_rate: r.random_range(2.0..6.0),
            mod_depth: r.random_range(0.3..0.6),
            seed: rng::derive_seed(seed, &[0x5bea, i as u64, 1]),
        });
    }
    Ok(specs)
}

/// One synthetic utterance: the speaker's harmonic stack under a slowly
/// varying, utterance-specific envelope. Peak amplitude is kept below 0.9.
pub fn synth_utterance(
    spec: &SynthSpeakerSpec,
    duration: f64,
    sample_rate: u32,
    utterance_seed: u64,
) -> Waveform {
    assert!(duration > 0.0, "duration must be positive");
    let n = (duration * sample_rate as f64).round() as usize;
    let mut r = rng::stream(spec.seed, &[0x0077, utterance_seed]);
    let nyquist = sample_rate as f64 / 2.0;
    let n_harm = spec
        .n_harmonics
        .min(((nyquist * 0.95) / spec.f0).floor() as usize)
        .max(1);
    let two_pi = 2.0 * std::f64::consts::PI;
    struct Harm {
        amp: f64,
        freq: f64,
        phase: f64,
        mod_rate: f64,
        mod_phase: f64,
    }
    let harms: Vec<Harm> = (1..=n_harm)
        .map(|k| Harm {
            amp: (k as f64).powf(-spec.spectral_tilt),
            freq: spec.f0 * k as f64,
            phase: r.random_range(0.0..two_pi),
            mod_rate: spec.mod_rate * r.random_range(0.8..1.2),
            mod_phase: r.random_range(0.0..two_pi),
        })
        .collect();
    // Slow utterance-level energy contour.
    let env_rate = r.random_range(0.4..1.2);
    let env_phase = r.random_range(0.0..two_pi);
    let mut samples = vec![0.0f64; n];
    for (i, s) in samples.iter_mut().enumerate() {
        let t = i as f64 / sample_rate as f64;
        let env = 0.7 + 0.3 * (two_pi * env_rate * t + env_phase).sin();
        let mut acc = 0.0;
        for h in &harms {
            let am = 1.0 + spec.mod_depth * (two_pi * h.mod_rate * t + h.mod_phase).sin();
            acc += h.amp * am * (two_pi * h.freq * t + h.phase).sin();
        }
        *s = env * acc;
    }
    let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        let scale = 0.85 / peak;
        for s in &mut samples {
            *s *= scale;
        }
    }
    Waveform::new(samples, sample_rate)
}

/// Scale `interferer` to the requested signal-to-interference ratio against
/// `target` and sum. Both are truncated to the shorter length first.
pub fn make_mixture(
    target: &Waveform,
    interferer: &Waveform,
    sir_db: f64,
) -> Result<(Waveform, Waveform, Waveform), DataError> {
    assert_eq!(
        target.sample_rate, interferer.sample_rate,
        "sample rates must match"
    );
    let len = target.len().min(interferer.len());
    let t: Vec<f64> = target.samples[..len].to_vec();
    let mut i: Vec<f64> = interferer.samples[..len].to_vec();
    let e_t: f64 = t.iter().map(|x| x * x).sum();
    let e_i: f64 = i.iter().map(|x| x * x).sum();
    if e_t == 0.0 || e_i == 0.0 {
        return Err(DataError::ZeroEnergySource);
    }
    let scale = (e_t / (e_i * 10f64.powf(sir_db / 10.0))).sqrt();
    for x in &mut i {
        *x *= scale;
    }
    let mix: Vec<f64> = t.iter().zip(&i).map(|(a, b)| a + b).collect();
    let sr = target.sample_rate;
    Ok((
        Waveform::new(mix, sr),
        Waveform::new(t, sr),
        Waveform::new(i, sr),
    ))
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub schema: u32,
    pub mixture_path: String,
    pub source_paths: [String; 2],
    pub speaker_ids: [String; 2],
    /// Enrollment per speaker id; never the source utterance itself.
    pub enrollment_paths: BTreeMap<String, String>,
}

/// A manifest with everything resolved into memory; the unit both training
/// and evaluation consume.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub entries: Vec<LoadedEntry>,
    pub sample_rate: u32,
}

#[derive(Debug, Clone)]
pub struct LoadedEntry {
    pub mixture: Waveform,
    pub sources: [Waveform; 2],
    pub speaker_ids: [String; 2],
    pub enrollments: [Waveform; 2],
    pub mixture_id: String,
    pub enrollment_ids: [String; 2],
}

impl LoadedDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A (mixture, enrollment, target) triple ready for the loss.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub mixture: Waveform,
    pub target: Waveform,
    pub enrollment: Waveform,
    pub mixture_id: String,
    pub enrollment_id: String,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e).expect("entry serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| DataError::Manifest {
                path: path.display().to_string(),
                detail: format!("line {}: {e}", lineno + 1),
            })?;
        if entry.schema != MANIFEST_SCHEMA {
            return Err(DataError::Manifest {
                path: path.display().to_string(),
                detail: format!(
                    "line {}: schema {} unsupported (expected {MANIFEST_SCHEMA})",
                    lineno + 1,
                    entry.schema
                ),
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Validate entry invariants and resolve all audio into memory.
pub fn load_dataset(manifest_path: &Path) -> Result<LoadedDataset, DataError> {
    let entries = read_manifest(manifest_path)?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut loaded = Vec::with_capacity(entries.len());
    let manifest_str = manifest_path.display().to_string();
    for (i, e) in entries.iter().enumerate() {
        for (s, spk) in e.speaker_ids.iter().enumerate() {
            let enr = e.enrollment_paths.get(spk).ok_or_else(|| DataError::Manifest {
                path: manifest_str.clone(),
                detail: format!("entry {i}: no enrollment for speaker {spk}"),
            })?;
            if enr == &e.source_paths[s] {
                return Err(DataError::Manifest {
                    path: manifest_str.clone(),
                    detail: format!(
                        "entry {i}: enrollment equals the source utterance for speaker {spk}"
                    ),
                });
            }
        }
        let read = |rel: &str| dsp::read_wav(&root.join(rel));
        let mixture = read(&e.mixture_path)?;
        let sources = [read(&e.source_paths[0])?, read(&e.source_paths[1])?];
        let enrollments = [
            read(&e.enrollment_paths[&e.speaker_ids[0]])?,
            read(&e.enrollment_paths[&e.speaker_ids[1]])?,
        ];
        loaded.push(LoadedEntry {
            mixture,
            sources,
            speaker_ids: e.speaker_ids.clone(),
            enrollments,
            mixture_id: e.mixture_path.clone(),
            enrollment_ids: [
                e.enrollment_paths[&e.speaker_ids[0]].clone(),
                e.enrollment_paths[&e.speaker_ids[1]].clone(),
            ],
        });
    }
    if loaded.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let sample_rate = loaded[0].mixture.sample_rate;
    Ok(LoadedDataset {
        entries: loaded,
        sample_rate,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthOptions {
    pub n_speakers: usize,
    pub n_train_mixtures: usize,
    pub n_val_mixtures: usize,
    pub n_test_mixtures: usize,
    pub utterance_seconds: f64,
    pub sample_rate: u32,
    pub utterances_per_speaker: usize,
    /// Uniform SIR range in dB for the interferer.
    pub sir_range: (f64, f64),
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n_speakers: 12,
            n_train_mixtures: 50,
            n_val_mixtures: 10,
            n_test_mixtures: 16,
            utterance_seconds: 2.0,
            sample_rate: 8000,
            utterances_per_speaker: 4,
            sir_range: (-5.0, 5.0),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub manifests: BTreeMap<String, PathBuf>,
    pub speakers_per_split: BTreeMap<String, Vec<String>>,
    pub mixtures_per_split: BTreeMap<String, usize>,
}

/// Split a speaker roster into disjoint train/val/test sets (12 -> 8/2/2).
/// Every split keeps at least two speakers so two-speaker mixtures exist.
pub fn split_speakers(n: usize) -> Result<(usize, usize, usize), DataError> {
    let held = (n / 6).max(2);
    if n < 2 * held + 2 {
        return Err(DataError::NotEnoughSpeakers {
            need: 2 * held + 2,
            got: n,
        });
    }
    Ok((n - 2 * held, held, held))
}

/// Generate speakers, utterances, mixtures and JSON-lines manifests under
/// `out_dir`. Fully deterministic in `opts.seed`: regeneration writes
/// byte-identical files.
pub fn build_synth_manifest(out_dir: &Path, opts: &SynthOptions) -> Result<SynthSummary, DataError> {
    let specs = synth_speaker_specs(opts.n_speakers, opts.seed)?;
    let (n_train, n_val, _n_test) = split_speakers(opts.n_speakers)?;
    let audio_dir = out_dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|source| DataError::Io {
        path: audio_dir.display().to_string(),
        source,
    })?;
    // Utterance pool per speaker.
    let mut utt_paths: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for spec in &specs {
        let mut paths = Vec::new();
        for u in 0..opts.utterances_per_speaker {
            let w = synth_utterance(spec, opts.utterance_seconds, opts.sample_rate, u as u64);
            let rel = format!("audio/{}_utt{u:02}.wav", spec.speaker_id);
            dsp::write_wav(&out_dir.join(&rel), &w)?;
            paths.push(rel);
        }
        utt_paths.insert(spec.speaker_id.clone(), paths);
    }
    let split_specs: [(&str, &[SynthSpeakerSpec], usize); 3] = [
        ("train", &specs[..n_train], opts.n_train_mixtures),
        ("val", &specs[n_train..n_train + n_val], opts.n_val_mixtures),
        ("test", &specs[n_train + n_val..], opts.n_test_mixtures),
    ];
    let mut manifests = BTreeMap::new();
    let mut speakers_per_split = BTreeMap::new();
    let mut mixtures_per_split = BTreeMap::new();
    for (split, speakers, n_mixtures) in split_specs {
        debug_assert!(speakers.len() >= 2, "each split needs two speakers");
        let mut entries = Vec::with_capacity(n_mixtures);
        for m in 0..n_mixtures {
            let mut r = rng::stream(opts.seed, &[0x3117, split.len() as u64, m as u64]);
            let a = r.random_range(0..speakers.len());
            let b = loop {
                let b = r.random_range(0..speakers.len());
                if b != a {
                    break b;
                }
            };
            let (spk_a, spk_b) = (&speakers[a], &speakers[b]);
            let utt_a = r.random_range(0..opts.utterances_per_speaker);
            let utt_b = r.random_range(0..opts.utterances_per_speaker);
            let enr_a = loop {
                let u = r.random_range(0..opts.utterances_per_speaker);
                if u != utt_a {
                    break u;
                }
            };
            let enr_b = loop {
                let u = r.random_range(0..opts.utterances_per_speaker);
                if u != utt_b {
                    break u;
                }
            };
            let sir = r.random_range(opts.sir_range.0..opts.sir_range.1);
            let wav_a = synth_utterance(spk_a, opts.utterance_seconds, opts.sample_rate, utt_a as u64);
            let wav_b = synth_utterance(spk_b, opts.utterance_seconds, opts.sample_rate, utt_b as u64);
            let (_, target, interferer) = make_mixture(&wav_a, &wav_b, sir)?;
            // Quantize the sources to the float32 the files will hold, and
            // form the mixture from the quantized values, so that
            // mixture = s0 + s1 holds exactly for anyone loading the WAVs.
            let quantize = |w: &Waveform| {
                Waveform::new(
                    w.samples.iter().map(|&x| x as f32 as f64).collect(),
                    w.sample_rate,
                )
            };
            let target = quantize(&target);
            let interferer = quantize(&interferer);
            let mix = Waveform::new(
                target
                    .samples
                    .iter()
                    .zip(&interferer.samples)
                    .map(|(a, b)| a + b)
                    .collect(),
                opts.sample_rate,
            );
            let mix_rel = format!("audio/{split}_{m:04}_mix.wav");
            let s0_rel = format!("audio/{split}_{m:04}_s0.wav");
            let s1_rel = format!("audio/{split}_{m:04}_s1.wav");
            dsp::write_wav(&out_dir.join(&mix_rel), &mix)?;
            dsp::write_wav(&out_dir.join(&s0_rel), &target)?;
            dsp::write_wav(&out_dir.join(&s1_rel), &interferer)?;
            let mut enrollment_paths = BTreeMap::new();
            enrollment_paths.insert(
                spk_a.speaker_id.clone(),
                utt_paths[&spk_a.speaker_id][enr_a].clone(),
            );
            enrollment_paths.insert(
                spk_b.speaker_id.clone(),
                utt_paths[&spk_b.speaker_id][enr_b].clone(),
            );
            entries.push(ManifestEntry {
                schema: MANIFEST_SCHEMA,
                mixture_path: mix_rel,
                source_paths: [s0_rel, s1_rel],
                speaker_ids: [spk_a.speaker_id.clone(), spk_b.speaker_id.clone()],
                enrollment_paths,
            });
        }
        let manifest_path = out_dir.join(format!("{split}.jsonl"));
        write_manifest(&manifest_path, &entries)?;
        manifests.insert(split.to_string(), manifest_path);
        speakers_per_split.insert(
            split.to_string(),
            speakers.iter().map(|s| s.speaker_id.clone()).collect(),
        );
        mixtures_per_split.insert(split.to_string(), n_mixtures);
    }
    Ok(SynthSummary {
        manifests,
        speakers_per_split,
        mixtures_per_split,
    })
}

/// Build a manifest from a standard Libri2mix-style directory
/// (`mix_clean/`, `s1/`, `s2/`, mixtures named `<utt1>_<utt2>.wav`, speaker
/// id = prefix before the first `-`) plus a user-supplied enrollment map
/// (JSON object `speaker_id -> wav path`).
pub fn build_real_manifest(
    mix_dir: &Path,
    enrollment_map_path: &Path,
    out_manifest: &Path,
) -> Result<usize, DataError> {
    let mix_clean = mix_dir.join("mix_clean");
    for sub in ["mix_clean", "s1", "s2"] {
        if !mix_dir.join(sub).is_dir() {
            return Err(DataError::RealLayout {
                path: mix_dir.display().to_string(),
                detail: format!("missing subdirectory {sub}/"),
            });
        }
    }
    let map_text = std::fs::read_to_string(enrollment_map_path).map_err(|source| DataError::Io {
        path: enrollment_map_path.display().to_string(),
        source,
    })?;
    let enroll_map: BTreeMap<String, String> =
        serde_json::from_str(&map_text).map_err(|e| DataError::RealLayout {
            path: enrollment_map_path.display().to_string(),
            detail: format!("enrollment map: {e}"),
        })?;
    let mut names: Vec<String> = std::fs::read_dir(&mix_clean)
        .map_err(|source| DataError::Io {
            path: mix_clean.display().to_string(),
            source,
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".wav"))
        .collect();
    names.sort();
    let root = out_manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut entries = Vec::new();
    for name in names {
        let stem = name.trim_end_matches(".wav");
        let parts: Vec<&str> = stem.split('_').collect();
        if parts.len() != 2 {
            return Err(DataError::RealLayout {
                path: name.clone(),
                detail: "expected <utt1>_<utt2>.wav".into(),
            });
        }
        let spk = |utt: &str| -> Result<String, DataError> {
            utt.split('-')
                .next()
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .ok_or_else(|| DataError::RealLayout {
                    path: name.clone(),
                    detail: format!("cannot parse speaker id from {utt}"),
                })
        };
        let speakers = [spk(parts[0])?, spk(parts[1])?];
        let mut enrollment_paths = BTreeMap::new();
        for s in &speakers {
            let enr = enroll_map.get(s).ok_or_else(|| DataError::RealLayout {
                path: enrollment_map_path.display().to_string(),
                detail: format!("no enrollment for speaker {s}"),
            })?;
            enrollment_paths.insert(s.clone(), enr.clone());
        }
        let rel = |sub: &str| {
            let abs = mix_dir.join(sub).join(&name);
            pathdiff(&abs, &root).unwrap_or_else(|| abs.display().to_string())
        };
        let entry = ManifestEntry {
            schema: MANIFEST_SCHEMA,
            mixture_path: rel("mix_clean"),
            source_paths: [rel("s1"), rel("s2")],
            speaker_ids: speakers,
            enrollment_paths,
        };
        for p in [&entry.mixture_path, &entry.source_paths[0], &entry.source_paths[1]] {
            if !root.join(p).is_file() {
                return Err(DataError::RealLayout {
                    path: p.clone(),
                    detail: "file does not exist".into(),
                });
            }
        }
        entries.push(entry);
    }
    let n = entries.len();
    write_manifest(out_manifest, &entries)?;
    Ok(n)
}

/// Best-effort relative path (both absolute or both relative).
fn pathdiff(target: &Path, base: &Path) -> Option<String> {
    let target = target.canonicalize().unwrap_or_else(|_| target.to_path_buf());
    let base = base.canonicalize().unwrap_or_else(|_| base.to_path_buf());
    let mut t = target.components().peekable();
    let mut b = base.components().peekable();
    while let (Some(x), Some(y)) = (t.peek(), b.peek()) {
        if x == y {
            t.next();
            b.next();
        } else {
            break;
        }
    }
    let mut out = PathBuf::new();
    for _ in b {
        out.push("..");
    }
    for c in t {
        out.push(c);
    }
    Some(out.display().to_string())
}

/// Crop (or zero-pad) to exactly `len` samples starting at `offset`.
fn crop(w: &Waveform, offset: usize, len: usize) -> Waveform {
    let mut samples = vec![0.0f64; len];
    let available = w.len().saturating_sub(offset);
    let take = available.min(len);
    samples[..take].copy_from_slice(&w.samples[offset..offset + take]);
    Waveform::new(samples, w.sample_rate)
}

/// Deterministic training batch for `step`: entries and extraction
/// directions are drawn from a per-epoch permutation over `2 * N` virtual
/// examples (each mixture used once per target speaker), segments are
/// random crops, and short utterances are zero-padded to the segment.
pub fn load_batch(
    ds: &LoadedDataset,
    segment_samples: usize,
    batch_size: usize,
    seed: u64,
    step: u64,
) -> Vec<TrainExample> {
    assert!(!ds.is_empty(), "dataset must be non-empty");
    let virt = 2 * ds.len();
    let mut batch = Vec::with_capacity(batch_size);
    for k in 0..batch_size {
        let global = step * batch_size as u64 + k as u64;
        let epoch = global / virt as u64;
        let pos = (global % virt as u64) as usize;
        let mut perm: Vec<usize> = (0..virt).collect();
        let mut perm_rng = rng::stream(seed, &[0xba7c, epoch]);
        for i in (1..virt).rev() {
            let j = perm_rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let virt_idx = perm[pos];
        let entry = &ds.entries[virt_idx / 2];
        let direction = virt_idx % 2;
        let mut crop_rng = rng::stream(seed, &[0xc407, global]);
        let mix_off = if entry.mixture.len() > segment_samples {
            crop_rng.random_range(0..=entry.mixture.len() - segment_samples)
        } else {
            0
        };
        let enr = &entry.enrollments[direction];
        let enr_off = if enr.len() > segment_samples {
            crop_rng.random_range(0..=enr.len() - segment_samples)
        } else {
            0
        };
        batch.push(TrainExample {
            mixture: crop(&entry.mixture, mix_off, segment_samples),
            target: crop(&entry.sources[direction], mix_off, segment_samples),
            enrollment: crop(enr, enr_off, segment_samples),
            mixture_id: format!("{}#spk{}", entry.mixture_id, direction),
            enrollment_id: entry.enrollment_ids[direction].clone(),
        });
    }
    batch
}

/// FFT magnitude peak frequency, used to sanity-check synthetic speakers.
pub fn dominant_frequency(w: &Waveform) -> f64 {
    let n = w.len();
    let spec = dsp::rfft(&w.samples);
    let mags = Array1::from_iter(spec.iter().map(|c| (c.re * c.re + c.im * c.im).sqrt()));
    let peak = mags
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    peak as f64 * w.sample_rate as f64 / n as f64
}
