use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use objabn::autograd::Graph;
use objabn::conv::{ConvGeometry, PadMode};
use objabn::losses::ce_loss_op;
use objabn::sharpness::video_entropy;
use objabn_bench::random_tensor;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d");
    group.sample_size(10);
    // (name, in, out, kernel, stride, input extent)
    let layers = [
        ("stem", 3, 16, [3, 3, 3], 2, [16, 64, 64]),
        ("mid", 16, 32, [3, 3, 3], 2, [16, 32, 32]),
        ("trunk", 32, 32, [1, 3, 3], 1, [16, 8, 8]),
    ];
    for (name, cin, cout, kernel, s, [t, h, w]) in layers {
        let geo = ConvGeometry::new(cin, cout, kernel, [1, s, s], PadMode::Zeros);
        let x = random_tensor(&[2, cin, t, h, w], 1);
        let wt = random_tensor(&geo.weight_shape(), 2);
        let b = random_tensor(&[cout], 3);
        group.bench_function(BenchmarkId::new("forward_backward", name), |bench| {
            bench.iter(|| {
                let mut g = Graph::<f32>::new();
                let (xv, wv, bv) = (g.leaf(x.clone()), g.leaf(wt.clone()), g.leaf(b.clone()));
                let y = g.conv3d(xv, wv, bv, geo).unwrap();
                let pooled = g.global_avg_pool(y);
                let probs = g.softmax(pooled).unwrap();
                let loss = ce_loss_op(&mut g, probs, &[0, 1]).unwrap();
                g.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn entropy(c: &mut Criterion) {
    let mut group = c.benchmark_group("entropy");
    for (t, h, w) in [(16, 8, 8), (16, 14, 14)] {
        let maps = random_tensor(&[t, h, w], 4).map(|v| v.abs());
        group.bench_function(BenchmarkId::from_parameter(format!("{t}x{h}x{w}")), |b| {
            b.iter(|| video_entropy(&maps).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, entropy);
criterion_main!(benches);
