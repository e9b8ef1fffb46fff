//! `tse` - data preparation, feature dumps, training, evaluation, single-file
//! extraction and report generation for the target speaker extraction
//! toolkit.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use tse_core::data::{self, SynthOptions};
use tse_core::dsp;
use tse_core::eval::{self, AblationRow, SplitCurves};
use tse_core::features::SimilarityMode;
use tse_core::model::{config_hash, ExampleIds, ModelSpec, TseModel};
use tse_core::par;
use tse_core::tensor::Tape;
use tse_core::train::{self, TrainOptions};

mod run_config;
use run_config::RunFile;

#[derive(Parser)]
#[command(
    name = "tse",
    about = "Target speaker extraction: band-split recurrent extractor with multi-level speaker features",
    version
)]
struct Cli {
    /// JSON config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic data or index a real Libri2mix-style layout.
    Prepare(PrepareArgs),
    /// Feature inspection utilities.
    #[command(subcommand)]
    Features(FeaturesCommand),
    /// Train an extraction model.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a manifest.
    Evaluate(EvaluateArgs),
    /// Extract one target speaker from one mixture.
    Extract(ExtractArgs),
    /// Render ablation tables and per-split curves.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TfMapFlag {
    Off,
    Spec,
    Emb,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Full,
    Desk,
    Tiny,
}

#[derive(Args)]
struct FeatureFlags {
    /// TF-map similarity: off, spectral frames, or embedding frames.
    #[arg(long, value_enum)]
    tf_map: Option<TfMapFlag>,
    /// Cross-attention contextual embedding feature.
    #[arg(long, value_enum)]
    contextual: Option<Toggle>,
    /// Tiled utterance-level speaker embedding feature.
    #[arg(long, value_enum)]
    spk_emb: Option<Toggle>,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    out: PathBuf,
    /// Generate synthetic two-speaker mixtures.
    #[arg(long, conflicts_with = "real")]
    synthetic: bool,
    /// Index an existing Libri2mix-style directory instead.
    #[arg(long, requires = "libri2mix_dir", requires = "enrollment_map")]
    real: bool,
    #[arg(long)]
    libri2mix_dir: Option<PathBuf>,
    /// JSON map speaker_id -> enrollment wav path (required with --real).
    #[arg(long)]
    enrollment_map: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    speakers: usize,
    /// Training mixtures; validation/test default to a fifth each.
    #[arg(long, default_value_t = 50)]
    mixtures: usize,
    #[arg(long)]
    val_mixtures: Option<usize>,
    #[arg(long)]
    test_mixtures: Option<usize>,
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
    #[arg(long, default_value_t = 8000)]
    sample_rate: u32,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum FeaturesCommand {
    /// Write constructed speaker features per utterance as binary arrays
    /// plus JSON metadata.
    Dump(FeaturesDumpArgs),
}

#[derive(Args)]
struct FeaturesDumpArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use a trained checkpoint; otherwise a freshly initialized preset.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[command(flatten)]
    features: FeatureFlags,
    #[arg(long)]
    seed: Option<u64>,
    /// Dump at most this many manifest entries.
    #[arg(long, default_value_t = 4)]
    limit: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Test manifest, only used for per-split curve tracking.
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[command(flatten)]
    features: FeatureFlags,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    segment_seconds: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Freeze the speaker encoder (emulates a pre-trained frozen encoder).
    #[arg(long)]
    freeze_encoder: bool,
    /// Evaluate train/val/test SI-SDRi per epoch into curves.csv.
    #[arg(long)]
    track_curves: bool,
    #[arg(long, default_value_t = false)]
    quiet: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Score each mixture only for its first speaker.
    #[arg(long)]
    single_direction: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    mean_subtract: bool,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    mixture: PathBuf,
    #[arg(long)]
    enrollment: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Results files written by `evaluate` (one table row each).
    #[arg(long, num_args = 1..)]
    results: Vec<PathBuf>,
    /// Curve CSV files written by `train --track-curves`.
    #[arg(long, num_args = 0..)]
    curves: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Baseline row label for the delta column.
    #[arg(long, default_value = "spk")]
    baseline: String,
    /// Also render SVG plots of the curves.
    #[arg(long)]
    plots: bool,
}

enum CmdError {
    Usage(String),
    Data(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CmdError {
    fn code(&self) -> u8 {
        match self {
            CmdError::Usage(_) => 1,
            CmdError::Data(_) => 2,
            CmdError::Runtime(_) => 3,
        }
    }
}

fn data_err<E: Into<anyhow::Error>>(e: E) -> CmdError {
    CmdError::Data(e.into())
}

fn runtime_err<E: Into<anyhow::Error>>(e: E) -> CmdError {
    CmdError::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version print and exit 0; anything else is usage.
            use clap::error::ErrorKind;
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    let run_file = match RunFile::load(cli.config.as_deref()) {
        Ok(rf) => rf,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Prepare(args) => cmd_prepare(args, &run_file),
        Command::Features(FeaturesCommand::Dump(args)) => cmd_features_dump(args, &run_file),
        Command::Train(args) => cmd_train(args, &run_file),
        Command::Evaluate(args) => cmd_evaluate(args, &run_file),
        Command::Extract(args) => cmd_extract(args, &run_file),
        Command::Report(args) => cmd_report(args, &run_file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CmdError::Usage(msg) => eprintln!("usage error: {msg}"),
                CmdError::Data(err) => eprintln!("data error: {err:#}"),
                CmdError::Runtime(err) => eprintln!("runtime error: {err:#}"),
            }
            ExitCode::from(e.code())
        }
    }
}

fn preset_spec(preset: Preset) -> ModelSpec {
    match preset {
        Preset::Full => ModelSpec::full_scale(),
        Preset::Desk => ModelSpec::desk(),
        Preset::Tiny => ModelSpec::tiny(),
    }
}

/// Preset -> run-file patches -> command-line flags, later wins.
fn resolve_spec(
    preset: Preset,
    run_file: &RunFile,
    flags: &FeatureFlags,
    freeze_encoder: bool,
) -> Result<ModelSpec, CmdError> {
    let mut spec = preset_spec(preset);
    run_file.apply_to_spec(&mut spec);
    if let Some(tf) = flags.tf_map {
        spec.features.selection.tf_map = match tf {
            TfMapFlag::Off => None,
            TfMapFlag::Spec => Some(SimilarityMode::Spectral),
            TfMapFlag::Emb => Some(SimilarityMode::Embedding),
        };
    }
    if let Some(c) = flags.contextual {
        spec.features.selection.contextual = c == Toggle::On;
    }
    if let Some(s) = flags.spk_emb {
        spec.features.selection.speaker_embedding = s == Toggle::On;
    }
    if freeze_encoder {
        spec.encoder.freeze = true;
    }
    if !spec.features.selection.any() {
        eprintln!("warning: no speaker features enabled; training an unconditional separator");
    }
    spec.validate()
        .map_err(|e| CmdError::Usage(format!("invalid model configuration: {e}")))?;
    Ok(spec)
}

fn cmd_prepare(args: PrepareArgs, run_file: &RunFile) -> Result<(), CmdError> {
    if args.real {
        let dir = args.libri2mix_dir.as_ref().expect("clap requires");
        let map = args.enrollment_map.as_ref().expect("clap requires");
        std::fs::create_dir_all(&args.out)
            .with_context(|| format!("creating {}", args.out.display()))
            .map_err(data_err)?;
        let manifest = args.out.join("real.jsonl");
        let n = data::build_real_manifest(dir, map, &manifest).map_err(data_err)?;
        println!("indexed {n} mixtures into {}", manifest.display());
        return Ok(());
    }
    if !args.synthetic {
        return Err(CmdError::Usage(
            "pass --synthetic, or --real with --libri2mix-dir and --enrollment-map".into(),
        ));
    }
    let seed = args.seed.or(run_file.seed).unwrap_or(7);
    let opts = SynthOptions {
        n_speakers: args.speakers,
        n_train_mixtures: args.mixtures,
        n_val_mixtures: args.val_mixtures.unwrap_or((args.mixtures / 5).max(2)),
        n_test_mixtures: args.test_mixtures.unwrap_or((args.mixtures / 5).max(2)),
        utterance_seconds: args.duration,
        sample_rate: args.sample_rate,
        seed,
        ..SynthOptions::default()
    };
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(data_err)?;
    let summary = data::build_synth_manifest(&args.out, &opts).map_err(data_err)?;
    let opts_value = serde_json::to_value(&opts).expect("options serialize");
    let hash = config_hash(&opts_value);
    std::fs::write(
        args.out.join("dataset.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "config_hash": hash,
            "options": opts_value,
            "summary": summary,
        }))
        .expect("summary serializes"),
    )
    .map_err(|e| data_err(anyhow!("writing dataset.json: {e}")))?;
    for split in ["train", "val", "test"] {
        println!(
            "{split}: {} mixtures, speakers {:?}",
            summary.mixtures_per_split[split], summary.speakers_per_split[split]
        );
    }
    Ok(())
}

fn load_model(
    checkpoint: Option<&Path>,
    preset: Preset,
    run_file: &RunFile,
    flags: &FeatureFlags,
    seed: u64,
) -> Result<(TseModel, String), CmdError> {
    match checkpoint {
        Some(path) => {
            if !path.exists() {
                return Err(data_err(anyhow!("checkpoint {} not found", path.display())));
            }
            let loaded = train::load_checkpoint(path).map_err(data_err)?;
            let hash = loaded.config_hash.clone();
            Ok((loaded.model, hash))
        }
        None => {
            let spec = resolve_spec(preset, run_file, flags, false)?;
            let model = TseModel::build(spec, seed).map_err(runtime_err)?;
            let hash = model.config_hash();
            Ok((model, hash))
        }
    }
}

fn write_matrix_bin(path: &Path, values: ndarray::ArrayView2<'_, f64>) -> std::io::Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for row in values.rows() {
        for &v in row {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes)
}

fn cmd_features_dump(args: FeaturesDumpArgs, run_file: &RunFile) -> Result<(), CmdError> {
    let seed = args.seed.or(run_file.seed).unwrap_or(7);
    let (model, hash) = load_model(
        args.checkpoint.as_deref(),
        args.preset,
        run_file,
        &args.features,
        seed,
    )?;
    let ds = data::load_dataset(&args.manifest).map_err(data_err)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(data_err)?;
    let mut dumped = 0usize;
    for entry in ds.entries.iter().take(args.limit) {
        for direction in 0..2 {
            let utterance_id = format!("{}#spk{}", entry.mixture_id, direction);
            let safe = utterance_id.replace(['/', '\\', '#'], "_");
            let dir = args.out.join(&safe);
            std::fs::create_dir_all(&dir)
                .with_context(|| format!("creating {}", dir.display()))
                .map_err(data_err)?;
            let mut tape = Tape::new();
            let arts = model
                .forward_with_artifacts(
                    &mut tape,
                    &entry.mixture,
                    &entry.enrollments[direction],
                    Some(ExampleIds {
                        mixture: &entry.mixture_id,
                        enrollment: &entry.enrollment_ids[direction],
                    }),
                )
                .map_err(runtime_err)?;
            let mut shapes = serde_json::Map::new();
            for (name, var) in [
                ("tf_map", arts.tf_map),
                ("contextual", arts.contextual),
                ("speaker_embedding", arts.speaker_embedding),
            ] {
                if let Some(v) = var {
                    let view = tape.value2(v);
                    write_matrix_bin(&dir.join(format!("{name}.bin")), view)
                        .map_err(|e| runtime_err(anyhow!("writing {name}.bin: {e}")))?;
                    shapes.insert(
                        name.to_string(),
                        serde_json::json!([view.nrows(), view.ncols()]),
                    );
                }
            }
            let meta = serde_json::json!({
                "utterance_id": utterance_id,
                "config_hash": hash,
                "selection": model.spec.features.selection.label(),
                "layout": "rows are mixture frames; little-endian float32, row-major",
                "shapes": shapes,
            });
            std::fs::write(
                dir.join("meta.json"),
                serde_json::to_string_pretty(&meta).expect("meta serializes"),
            )
            .map_err(|e| runtime_err(anyhow!("writing meta.json: {e}")))?;
            dumped += 1;
        }
    }
    println!("dumped features for {dumped} (mixture, enrollment) pairs into {}", args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs, run_file: &RunFile) -> Result<(), CmdError> {
    let seed = args.seed.or(run_file.seed).unwrap_or(7);
    let spec = resolve_spec(args.preset, run_file, &args.features, args.freeze_encoder)?;
    let mut cfg = run_file.train_config();
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.segment_seconds {
        cfg.segment_seconds = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr_start {
        cfg.lr_start = v;
    }
    if let Some(v) = args.lr_end {
        cfg.lr_end = v;
    }
    if args.max_steps.is_some() {
        cfg.max_steps = args.max_steps;
    }
    cfg.seed = seed;
    if cfg.lr_start < cfg.lr_end || cfg.lr_end <= 0.0 {
        return Err(CmdError::Usage(format!(
            "need lr_start >= lr_end > 0, got {} and {}",
            cfg.lr_start, cfg.lr_end
        )));
    }
    let train_ds = data::load_dataset(&args.manifest).map_err(data_err)?;
    let val_ds = match &args.val_manifest {
        Some(p) => Some(data::load_dataset(p).map_err(data_err)?),
        None => None,
    };
    let test_ds = match &args.test_manifest {
        Some(p) => Some(data::load_dataset(p).map_err(data_err)?),
        None => None,
    };
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(data_err)?;
    let mut model = TseModel::build(spec.clone(), seed).map_err(runtime_err)?;
    let merged = serde_json::json!({
        "spec": spec,
        "train": cfg,
        "seed": seed,
    });
    let run_hash = config_hash(&merged);
    std::fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "config_hash": run_hash,
            "model_config_hash": model.config_hash(),
            "config": merged,
        }))
        .expect("config serializes"),
    )
    .map_err(|e| data_err(anyhow!("writing config.json: {e}")))?;
    let opts = TrainOptions {
        log_path: Some(args.out.join("train_log.jsonl")),
        checkpoint_path: Some(args.out.join("checkpoint.ckpt")),
        val: val_ds.as_ref(),
        test: test_ds.as_ref(),
        track_curves: args.track_curves,
        curve_train_cap: 16,
        probe: None,
        quiet: args.quiet,
    };
    let report = train::train(&mut model, &train_ds, &cfg, &opts).map_err(runtime_err)?;
    if args.track_curves {
        std::fs::write(args.out.join("curves.csv"), eval::curves_csv(&report.curves))
            .map_err(|e| runtime_err(anyhow!("writing curves.csv: {e}")))?;
    }
    // Without a validation split no best-checkpoint logic ran on the final
    // partial epoch; make sure the last state is on disk.
    if !args.out.join("checkpoint.ckpt").exists() {
        train::save_checkpoint(
            &args.out.join("checkpoint.ckpt"),
            &model,
            None,
            report.epochs.last().map_or(0, |e| e.epoch),
            report.steps_run,
            &cfg,
        )
        .map_err(runtime_err)?;
    }
    println!(
        "trained {} steps; features {}; best val SI-SDRi {}",
        report.steps_run,
        model.spec.features.selection.label(),
        report
            .best_val_si_sdri
            .map_or("n/a".to_string(), |v| format!("{v:.2} dB")),
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs, run_file: &RunFile) -> Result<(), CmdError> {
    if let Some(w) = args.workers.or(run_file.workers) {
        par::configure_workers(w);
    }
    if !args.checkpoint.exists() {
        return Err(data_err(anyhow!(
            "checkpoint {} not found",
            args.checkpoint.display()
        )));
    }
    let loaded = train::load_checkpoint(&args.checkpoint).map_err(data_err)?;
    let ds = data::load_dataset(&args.manifest).map_err(data_err)?;
    let result = eval::evaluate_model(
        &loaded.model,
        &ds,
        !args.single_direction,
        args.mean_subtract,
    )
    .map_err(runtime_err)?;
    eval::write_results_jsonl(
        &args.out,
        &result,
        &loaded.config_hash,
        &loaded.model.spec.features.selection.label(),
    )
    .map_err(runtime_err)?;
    println!(
        "{} examples: mean SI-SDRi {:.2} dB, accuracy {:.2}% ({} errors)",
        result.rows.len(),
        result.mean_si_sdri,
        result.accuracy,
        result.errors.len()
    );
    Ok(())
}

fn cmd_extract(args: ExtractArgs, _run_file: &RunFile) -> Result<(), CmdError> {
    if !args.checkpoint.exists() {
        return Err(data_err(anyhow!(
            "checkpoint {} not found",
            args.checkpoint.display()
        )));
    }
    let loaded = train::load_checkpoint(&args.checkpoint).map_err(data_err)?;
    let rate = loaded.model.spec.sample_rate;
    let mixture = dsp::read_wav_expect(&args.mixture, rate).map_err(data_err)?;
    let enrollment = dsp::read_wav_expect(&args.enrollment, rate).map_err(data_err)?;
    let ids = ExampleIds {
        mixture: &args.mixture.display().to_string(),
        enrollment: &args.enrollment.display().to_string(),
    };
    let estimate = loaded
        .model
        .estimate(&mixture, &enrollment, Some(ids))
        .map_err(runtime_err)?;
    dsp::write_wav(&args.out, &estimate).map_err(runtime_err)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

#[derive(Deserialize)]
struct ResultsHeader {
    kind: String,
    label: String,
    config_hash: String,
    mean_si_sdri: f64,
    accuracy: f64,
}

fn cmd_report(args: ReportArgs, _run_file: &RunFile) -> Result<(), CmdError> {
    if args.results.is_empty() {
        return Err(CmdError::Usage("pass at least one --results file".into()));
    }
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(data_err)?;
    let mut rows = Vec::new();
    let mut hashes = serde_json::Map::new();
    for path in &args.results {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(data_err)?;
        let first = text
            .lines()
            .next()
            .ok_or_else(|| data_err(anyhow!("{}: empty results file", path.display())))?;
        let header: ResultsHeader = serde_json::from_str(first)
            .with_context(|| format!("{}: malformed results header", path.display()))
            .map_err(data_err)?;
        if header.kind != "summary" {
            return Err(data_err(anyhow!(
                "{}: first line is not a summary row",
                path.display()
            )));
        }
        let label = header.label.clone();
        rows.push(AblationRow {
            tf_map: if label.contains("tfmap-spec") {
                "spectral".into()
            } else if label.contains("tfmap-emb") {
                "embedding".into()
            } else {
                "off".into()
            },
            contextual: label.contains("ctx"),
            speaker_embedding: label.contains("spk"),
            si_sdri: header.mean_si_sdri,
            accuracy: header.accuracy,
            label,
        });
        hashes.insert(
            path.display().to_string(),
            serde_json::Value::String(header.config_hash),
        );
    }
    let baseline = rows
        .iter()
        .any(|r| r.label == args.baseline)
        .then_some(args.baseline.as_str());
    let md = eval::ablation_table_markdown(&rows, baseline);
    let csv = eval::ablation_table_csv(&rows);
    std::fs::write(args.out.join("ablation.md"), &md)
        .map_err(|e| runtime_err(anyhow!("writing ablation.md: {e}")))?;
    std::fs::write(args.out.join("ablation.csv"), &csv)
        .map_err(|e| runtime_err(anyhow!("writing ablation.csv: {e}")))?;
    std::fs::write(
        args.out.join("sources.json"),
        serde_json::to_string_pretty(&hashes).expect("hashes serialize"),
    )
    .map_err(|e| runtime_err(anyhow!("writing sources.json: {e}")))?;
    for path in &args.curves {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(data_err)?;
        let curves = parse_curves_csv(&text)
            .ok_or_else(|| data_err(anyhow!("{}: malformed curves csv", path.display())))?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "curves".into());
        std::fs::write(args.out.join(format!("{stem}.csv")), eval::curves_csv(&curves))
            .map_err(|e| runtime_err(anyhow!("writing {stem}.csv: {e}")))?;
        if args.plots {
            std::fs::write(
                args.out.join(format!("{stem}.svg")),
                eval::curves_svg(&curves, &stem),
            )
            .map_err(|e| runtime_err(anyhow!("writing {stem}.svg: {e}")))?;
        }
    }
    print!("{md}");
    Ok(())
}

fn parse_curves_csv(text: &str) -> Option<SplitCurves> {
    let mut curves = SplitCurves::default();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let epoch: usize = parts.next()?.trim().parse().ok()?;
        let split = parts.next()?.trim();
        let value: f64 = parts.next()?.trim().parse().ok()?;
        if curves.epochs.last() != Some(&epoch) {
            curves.epochs.push(epoch);
        }
        match split {
            "train" => curves.train.push(value),
            "val" => curves.val.push(value),
            "test" => curves.test.push(value),
            _ => return None,
        }
    }
    Some(curves)
}
