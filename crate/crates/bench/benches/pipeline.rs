use criterion::{criterion_group, criterion_main, Criterion};
use objabn::data::render_video;
use objabn::harness::{LossMode, RunConfig, Trainer};
use objabn::SyntheticSpec;
use objabn_bench::synthetic_batch;

fn synthetic(c: &mut Criterion) {
    let spec = SyntheticSpec::default();
    c.bench_function("render_video_16x64x64", |b| {
        let mut i = 0;
        b.iter(|| {
            i += 1;
            render_video(&spec, 1, i).unwrap()
        })
    });
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    let batch = synthetic_batch(4);
    let classes = SyntheticSpec::default().class_names();
    for (mode, heads) in [(LossMode::Abn, 1), (LossMode::Mask, 1), (LossMode::Mha, 3)] {
        let mut cfg = RunConfig {
            mode,
            ..RunConfig::default()
        };
        cfg.model.heads = heads;
        let mut trainer = Trainer::new(&cfg, classes.clone()).unwrap();
        group.bench_function(format!("{mode:?}_batch4").to_lowercase(), |b| {
            b.iter(|| trainer.step(&batch).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, synthetic, train_step);
criterion_main!(benches);
