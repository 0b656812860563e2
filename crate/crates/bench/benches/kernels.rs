use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flowgan_core::codec::{encode, FlowMatrix};
use flowgan_core::metrics::{cpc, ssim};
use flowgan_core::tensor::kernels::{
    conv2d_backward, conv2d_forward, conv_transpose2d_forward, ConvDims, ConvGeom,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_flow(n: usize, rng: &mut ChaCha8Rng) -> FlowMatrix {
    let mut m = FlowMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                m.add(i, j, rng.random_range(0..500));
            }
        }
    }
    m
}

fn convolutions(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let geom = ConvGeom {
        kernel: 4,
        stride: 2,
        padding: 1,
    };
    let mut group = c.benchmark_group("conv_k4s2");
    // Discriminator-side layers of a batch of 16.
    for (cin, cout, side) in [(2, 32, 64), (32, 64, 32), (64, 128, 16)] {
        let d = ConvDims {
            batch: 16,
            in_channels: cin,
            out_channels: cout,
            in_h: side,
            in_w: side,
            out_h: side / 2,
            out_w: side / 2,
        };
        let x = random(16 * cin * side * side, &mut rng);
        let w = random(cout * cin * 16, &mut rng);
        let gy = random(16 * cout * side * side / 4, &mut rng);
        let id = format!("{cin}x{side}->{cout}");
        group.bench_with_input(BenchmarkId::new("forward", &id), &d, |b, d| {
            b.iter(|| conv2d_forward(&x, &w, *d, geom))
        });
        group.bench_with_input(BenchmarkId::new("backward", &id), &d, |b, d| {
            let mut gx = vec![0.0; x.len()];
            let mut gw = vec![0.0; w.len()];
            b.iter(|| conv2d_backward(&x, &w, &gy, *d, geom, Some(&mut gx), Some(&mut gw)))
        });
    }
    // Generator output layer.
    let d = ConvDims {
        batch: 16,
        in_channels: 32,
        out_channels: 1,
        in_h: 32,
        in_w: 32,
        out_h: 64,
        out_w: 64,
    };
    let x = random(16 * 32 * 32 * 32, &mut rng);
    let w = random(32 * 16, &mut rng);
    group.bench_function("transpose_forward/32x32->1", |b| {
        b.iter(|| conv_transpose2d_forward(&x, &w, d, geom))
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_flow(40, &mut rng);
    let b = random_flow(40, &mut rng);
    let (ia, ib) = (encode(&a, 7.0).unwrap(), encode(&b, 7.0).unwrap());
    c.bench_function("ssim_64x64", |bench| bench.iter(|| ssim(&ia, &ib).unwrap()));
    c.bench_function("cpc_40x40", |bench| bench.iter(|| cpc(&a, &b).unwrap()));
}

criterion_group!(benches, convolutions, metrics);
criterion_main!(benches);
