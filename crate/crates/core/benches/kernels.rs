//! Sequential vs data-parallel kernel comparison, plus a whole-model
//! forward. With `--no-default-features` only the sequential side exists.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use simulflow_core::config::Variant;
use simulflow_core::model::Model;
use simulflow_core::nn::{init_rng, rand_tensor};
use simulflow_core::tensor::kernels;
use simulflow_core::tensor::tape::Tape;

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 128, 256] {
        let mut rng = init_rng(n as u64);
        let a = rand_tensor(&mut rng, &[n, n], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[n, n], -1.0, 1.0);
        let mut out = vec![0.0f32; n * n];
        group.bench_with_input(BenchmarkId::new("seq", n), &n, |bch, &n| {
            bch.iter(|| kernels::matmul_seq(a.data(), b.data(), n, n, n, &mut out))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", n), &n, |bch, &n| {
            bch.iter(|| kernels::matmul_par(a.data(), b.data(), n, n, n, &mut out))
        });
    }
    group.finish();
}

fn bench_conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_k3s1p1");
    for (ch, hw) in [(16usize, 32usize), (32, 64)] {
        let mut rng = init_rng((ch + hw) as u64);
        let x = rand_tensor(&mut rng, &[ch, hw, hw], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[ch, ch, 3, 3], -0.2, 0.2);
        let b = rand_tensor(&mut rng, &[ch], -0.2, 0.2);
        let mut out = vec![0.0f32; ch * hw * hw];
        let label = format!("{ch}x{hw}x{hw}");
        group.bench_with_input(BenchmarkId::new("seq", &label), &(), |bch, _| {
            bch.iter(|| {
                kernels::conv2d_seq(
                    x.data(),
                    w.data(),
                    b.data(),
                    ch,
                    hw,
                    hw,
                    ch,
                    3,
                    1,
                    1,
                    hw,
                    hw,
                    &mut out,
                )
            })
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", &label), &(), |bch, _| {
            bch.iter(|| {
                kernels::conv2d_par(
                    x.data(),
                    w.data(),
                    b.data(),
                    ch,
                    hw,
                    hw,
                    ch,
                    3,
                    1,
                    1,
                    hw,
                    hw,
                    &mut out,
                )
            })
        });
    }
    group.finish();
}

fn bench_softmax(c: &mut Criterion) {
    let mut group = c.benchmark_group("softmax_rows");
    for (rows, cols) in [(256usize, 512usize), (4096, 256)] {
        let mut rng = init_rng(cols as u64);
        let x = rand_tensor(&mut rng, &[rows, cols], -4.0, 4.0);
        let mut out = vec![0.0f32; rows * cols];
        let label = format!("{rows}x{cols}");
        group.bench_with_input(BenchmarkId::new("seq", &label), &(), |bch, _| {
            bch.iter(|| kernels::softmax_rows_seq(x.data(), cols, &mut out))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", &label), &(), |bch, _| {
            bch.iter(|| kernels::softmax_rows_par(x.data(), cols, &mut out))
        });
    }
    group.finish();
}

fn bench_bilinear(c: &mut Criterion) {
    let mut group = c.benchmark_group("bilinear_resize");
    let mut rng = init_rng(9);
    let x = rand_tensor(&mut rng, &[64, 16, 16], -1.0, 1.0);
    let mut out = vec![0.0f32; 64 * 128 * 128];
    group.bench_function("seq/64x16->128", |bch| {
        bch.iter(|| kernels::bilinear_resize_seq(x.data(), 64, 16, 16, 128, 128, &mut out))
    });
    #[cfg(feature = "parallel")]
    group.bench_function("par/64x16->128", |bch| {
        bch.iter(|| kernels::bilinear_resize_par(x.data(), 64, 16, 16, 128, 128, &mut out))
    });
    group.finish();
}

fn bench_model_forward(c: &mut Criterion) {
    let (model, reg) = Model::build_variant(Variant::Tiny, 0);
    let mut rng = init_rng(1);
    let img = rand_tensor(&mut rng, &[3, 64, 64], 0.0, 1.0);
    let flow = rand_tensor(&mut rng, &[3, 64, 64], 0.0, 1.0);
    c.bench_function("model_forward/tiny_64", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            model.forward(&mut tape, &reg, &img, &flow).unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_conv2d,
    bench_softmax,
    bench_bilinear,
    bench_model_forward
);
criterion_main!(benches);
