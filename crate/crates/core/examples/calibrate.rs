use std::time::Instant;
use tse_core::data::{self, SynthOptions};
use tse_core::features::{FeatureSelection, SimilarityMode};
use tse_core::model::{ModelSpec, TseModel};
use tse_core::train::{self, TrainConfig, TrainOptions, TrainProbe};

/// Fixed (mixture, target, enrollment) triple, fixed crop, one direction:
/// pure optimization capacity probe.
fn one_direction_overfit() {
    use tse_core::data::TrainExample;
    use tse_core::train::{example_gradients, AdamState};
    let dir = std::env::temp_dir().join("tse_calibrate_onedir");
    let _ = std::fs::remove_dir_all(&dir);
    let opts = SynthOptions {
        n_train_mixtures: 2,
        n_val_mixtures: 0,
        n_test_mixtures: 0,
        ..SynthOptions::default()
    };
    let summary = data::build_synth_manifest(&dir, &opts).unwrap();
    let ds = data::load_dataset(&summary.manifests["train"]).unwrap();
    let entry = &ds.entries[0];
    let crop = |w: &tse_core::dsp::Waveform| {
        tse_core::dsp::Waveform::new(w.samples[..8000].to_vec(), w.sample_rate)
    };
    let ex = TrainExample {
        mixture: crop(&entry.mixture),
        target: crop(&entry.sources[0]),
        enrollment: crop(&entry.enrollments[0]),
        mixture_id: "d0".into(),
        enrollment_id: "e0".into(),
    };
    let mut spec = ModelSpec::desk();
    spec.features.selection = FeatureSelection {
        tf_map: Some(SimilarityMode::Embedding),
        contextual: false,
        speaker_embedding: false,
    };
    let mut model = TseModel::build(spec, 1).unwrap();
    let mut adam = AdamState::new(&model.store);
    for step in 0..300 {
        let (mut grads, loss) = example_gradients(&model, &ex, false).unwrap();
        grads.clip_global_norm(5.0);
        adam.step(&mut model.store, &grads, 1e-3);
        if step % 20 == 0 {
            eprintln!("step {step:>4}  -si_sdr {loss:>8.3}  grad_norm pre-clip n/a");
        }
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("uncond1");
    if mode == "onedir" {
        return one_direction_overfit();
    }
    let dir = std::env::temp_dir().join("tse_calibrate");
    let _ = std::fs::remove_dir_all(&dir);
    let opts = SynthOptions {
        n_train_mixtures: 50,
        n_val_mixtures: 8,
        n_test_mixtures: 8,
        ..SynthOptions::default()
    };
    let summary = data::build_synth_manifest(&dir, &opts).unwrap();
    let mut ds = data::load_dataset(&summary.manifests["train"]).unwrap();

    let mut spec = ModelSpec::desk();
    let (n_entries, steps, lr) = match mode {
        "uncond1" => {
            spec.features.selection = FeatureSelection::none();
            (1usize, 400usize, 1e-3)
        }
        "tfmap1" => {
            spec.features.selection = FeatureSelection {
                tf_map: Some(SimilarityMode::Embedding),
                contextual: false,
                speaker_embedding: false,
            };
            (1, 400, 1e-3)
        }
        "tfmap50" => {
            spec.features.selection = FeatureSelection {
                tf_map: Some(SimilarityMode::Embedding),
                contextual: false,
                speaker_embedding: false,
            };
            (50, 2000, 1e-3)
        }
        "default50" => (50, 2000, 1e-3),
        other => panic!("unknown mode {other}"),
    };
    ds.entries.truncate(n_entries);
    let mut model = TseModel::build(spec, 1).unwrap();
    let virt = 2 * ds.entries.len();
    let spe = virt.div_ceil(4).max(1);
    let epochs = (steps / spe).max(2);
    // constant lr for single-example probes; decaying schedule otherwise
    let lr_end = if n_entries == 1 { lr } else { 2.5e-5 };
    let cfg = TrainConfig {
        epochs,
        segment_seconds: 1.0,
        batch_size: 4,
        seed: 3,
        lr_start: lr,
        lr_end,
        max_steps: Some(steps),
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let report = train::train(
        &mut model,
        &ds,
        &cfg,
        &TrainOptions {
            probe: Some(TrainProbe {
                every_steps: 50,
                max_entries: 10,
                target_si_sdri: Some(10.0),
            }),
            quiet: true,
            ..Default::default()
        },
    )
    .unwrap();
    eprintln!(
        "mode {mode}: steps {} early {} in {:?}",
        report.steps_run,
        report.early_stopped,
        t.elapsed()
    );
    for (s, v) in &report.probes {
        let lo = (*s as usize).saturating_sub(25);
        let window = &report.losses[lo..(*s as usize).min(report.losses.len())];
        let mean_loss = window.iter().sum::<f64>() / window.len() as f64;
        eprintln!("  probe @{s}: {v:.2} dB (train-crop loss ~{mean_loss:.2})");
    }
}
