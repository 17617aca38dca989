use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mpr_bench::{model, phantom, rotations, signal};
use mpr_core::augmentation::{resample, rotation_matrix};
use mpr_core::model::layers::{conv3d_backward, conv3d_forward};
use mpr_core::model::{ClassInput, Mode};
use mpr_core::rotation::{decode, encode};
use mpr_core::{BodyRegion, RepresentationKind};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d");
    for (cin, cout, side) in [(1, 8, 32), (8, 16, 16), (32, 64, 4)] {
        let dims = [side; 3];
        let n = side * side * side;
        let x = signal(cin * n, 1);
        let w = signal(cout * cin * 27, 2);
        let b = signal(cout, 3);
        let g = signal(cout * n, 4);
        group.throughput(Throughput::Elements((cin * cout * n * 27) as u64));
        let id = format!("{cin}x{cout}@{side}");
        group.bench_function(BenchmarkId::new("forward", &id), |bench| {
            bench.iter(|| conv3d_forward(&x, 1, cin, dims, &w, &b, cout))
        });
        group.bench_function(BenchmarkId::new("backward", &id), |bench| {
            bench.iter(|| conv3d_backward(&x, &g, 1, cin, dims, &w, cout, true))
        });
    }
    group.finish();
}

fn resampling(c: &mut Criterion) {
    let (volume, _) = phantom();
    let t = rotation_matrix(&rotations(1, 5)[0]);
    c.bench_function("resample_32", |b| b.iter(|| resample(&volume, &t, [32; 3]).unwrap()));
}

fn codecs(c: &mut Criterion) {
    let rs = rotations(256, 9);
    let mut group = c.benchmark_group("decode");
    group.throughput(Throughput::Elements(rs.len() as u64));
    for kind in RepresentationKind::ALL {
        let encoded: Vec<_> = rs.iter().map(|r| encode(r, kind).unwrap()).collect();
        group.bench_function(kind.name(), |b| b.iter(|| encoded.iter().map(|e| decode(e).unwrap()).collect::<Vec<_>>()));
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let state = model();
    let batch = 4;
    let x = signal(batch * state.config().input_len(), 11);
    let regions = [BodyRegion::Calcaneus, BodyRegion::Ankle, BodyRegion::Knee, BodyRegion::Wrist];
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    group.bench_function("forward_eval", |b| {
        b.iter(|| state.forward(&x, &regions, ClassInput::OneHot, Mode::Eval).unwrap())
    });
    group.bench_function("train_step", |b| {
        b.iter(|| {
            let fwd = state.forward(&x, &regions, ClassInput::OneHot, Mode::Train).unwrap();
            let d = vec![1e-3f32; fwd.outputs.len()];
            state.backward(&fwd, &d).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, conv, resampling, codecs, network);
criterion_main!(benches);
