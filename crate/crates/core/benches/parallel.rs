//! Rayon-vs-sequential comparison over the data-parallel hot paths: batch
//! gradients, dataset evaluation and mixture synthesis.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use tse_core::data::{self, SynthOptions};
use tse_core::model::{ModelSpec, TseModel};
use tse_core::par;
use tse_core::train::example_gradients;

struct Fixture {
    model: TseModel,
    batch: Vec<data::TrainExample>,
    dataset: data::LoadedDataset,
}

fn fixture() -> Fixture {
    let dir = std::env::temp_dir().join("tse_bench_data");
    let _ = std::fs::remove_dir_all(&dir);
    let opts = SynthOptions {
        n_speakers: 6,
        n_train_mixtures: 8,
        n_val_mixtures: 2,
        n_test_mixtures: 2,
        utterance_seconds: 0.75,
        ..SynthOptions::default()
    };
    let summary = data::build_synth_manifest(&dir, &opts).unwrap();
    let dataset = data::load_dataset(&summary.manifests["train"]).unwrap();
    let model = TseModel::build(ModelSpec::desk(), 1).unwrap();
    let batch = data::load_batch(&dataset, 4000, 4, 7, 0);
    Fixture {
        model,
        batch,
        dataset,
    }
}

fn bench_batch_gradients(c: &mut Criterion) {
    let f = fixture();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    group.bench_function("seq", |b| {
        b.iter(|| {
            par::map_seq(&f.batch, |ex| {
                example_gradients(&f.model, black_box(ex), false).unwrap().1
            })
        })
    });
    group.bench_function("par", |b| {
        b.iter(|| {
            par::map(&f.batch, |ex| {
                example_gradients(&f.model, black_box(ex), false).unwrap().1
            })
        })
    });
    group.finish();
}

fn bench_evaluation(c: &mut Criterion) {
    let f = fixture();
    let jobs: Vec<usize> = (0..f.dataset.len()).collect();
    let eval_one = |&i: &usize| {
        let entry = &f.dataset.entries[i];
        let est = f
            .model
            .estimate(&entry.mixture, &entry.enrollments[0], None)
            .unwrap();
        tse_core::eval::si_sdri(
            &est.samples,
            &entry.mixture.samples,
            &entry.sources[0].samples,
            false,
        )
        .unwrap()
    };
    let mut group = c.benchmark_group("evaluate_examples");
    group.sample_size(10);
    group.bench_function("seq", |b| b.iter(|| par::map_seq(&jobs, eval_one)));
    group.bench_function("par", |b| b.iter(|| par::map(&jobs, eval_one)));
    group.finish();
}

fn bench_synthesis(c: &mut Criterion) {
    let specs = data::synth_speaker_specs(8, 3).unwrap();
    let jobs: Vec<usize> = (0..16).collect();
    let synth_one = |&i: &usize| {
        let spec = &specs[i % specs.len()];
        data::synth_utterance(spec, 1.0, 8000, i as u64).energy()
    };
    let mut group = c.benchmark_group("synthesize_utterances");
    group.sample_size(10);
    group.bench_function("seq", |b| b.iter(|| par::map_seq(&jobs, synth_one)));
    group.bench_function("par", |b| b.iter(|| par::map(&jobs, synth_one)));
    group.finish();
}

criterion_group!(
    benches,
    bench_batch_gradients,
    bench_evaluation,
    bench_synthesis
);
criterion_main!(benches);
