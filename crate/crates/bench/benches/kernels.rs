use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use vuda_core::kernels::{conv_bwd_input, conv_bwd_weight, conv_fwd, conv_out_dim};
use vuda_core::rng::derive_rng;

fn conv_benchmarks(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d_32cube_k3");
    for &(c_in, c_out) in &[(4usize, 8usize), (8, 16), (16, 32)] {
        let mut rng = derive_rng(0, "bench-conv");
        let n = 32usize;
        let x: Vec<f32> = (0..c_in * n * n * n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let w: Vec<f32> = (0..c_out * c_in * 27).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let o = conv_out_dim(n, 3, 1, 1);
        let mut y = vec![0.0f32; c_out * o * o * o];

        group.bench_with_input(BenchmarkId::new("fwd", format!("{c_in}x{c_out}")), &(), |b, _| {
            b.iter(|| {
                conv_fwd(black_box(&x), (n, n, n), c_in, &w, c_out, 3, 1, 1, &mut y);
            })
        });

        let gy = y.clone();
        let mut gx = vec![0.0f32; x.len()];
        group.bench_with_input(BenchmarkId::new("bwd_input", format!("{c_in}x{c_out}")), &(), |b, _| {
            b.iter(|| {
                conv_bwd_input(black_box(&gy), (o, o, o), c_out, &w, c_in, 3, 1, 1, (n, n, n), &mut gx);
            })
        });

        let mut gw = vec![0.0f32; w.len()];
        group.bench_with_input(BenchmarkId::new("bwd_weight", format!("{c_in}x{c_out}")), &(), |b, _| {
            b.iter(|| {
                conv_bwd_weight(black_box(&x), (n, n, n), c_in, &gy, (o, o, o), c_out, 3, 1, 1, &mut gw);
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv_benchmarks);
criterion_main!(benches);
