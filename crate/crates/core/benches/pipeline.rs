use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use deidkit::mechanisms::MechanismConfig;
use deidkit::pipeline::{run_pipeline, Pipeline};
use deidkit::synth::{build_store, generate, Lexicon, StoreConfig, SynthConfig};
use deidkit::ExecMode;

fn pipelines(c: &mut Criterion) {
    let synth = generate(&SynthConfig {
        n_docs: 24,
        target_words: 24_000,
        ..Default::default()
    })
    .unwrap();
    let store = Arc::new(
        build_store(
            &synth.corpus,
            &Lexicon::builtin(),
            &[],
            StoreConfig::default(),
        )
        .unwrap(),
    );

    let mut group = c.benchmark_group("run_pipeline");
    group.sample_size(10);
    for cfg in [
        MechanismConfig::metric_dp(32.0),
        MechanismConfig::rantext(32.0),
    ] {
        let p = Pipeline::new("bench")
            .mask_annotations(&synth.gold, 0.0)
            .privatize(cfg)
            .unwrap()
            .with_store(store.clone());
        for mode in [ExecMode::Sequential, ExecMode::Parallel] {
            group.bench_with_input(
                BenchmarkId::new(cfg.mechanism.name(), format!("{mode:?}")),
                &mode,
                |b, &mode| b.iter(|| run_pipeline(&synth.corpus, &p, 7, mode).unwrap()),
            );
        }
    }
    group.finish();
}

criterion_group!(benches, pipelines);
criterion_main!(benches);
