//! Microbenchmarks for the hot numeric kernels: 2-D convolution, the
//! selective scan, and SSIM scoring.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use diffuma_core::mamba::{selective_scan, SsmDirTensors};
use diffuma_core::metrics::ssim_frame;
use diffuma_core::{Tape, Tensor};

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // Desk-scale encoder shape: batch*t frames of 32 channels at 16x16,
    // 3x3 kernel, stride 2 (the second conv of the spatial encoder).
    let x = Tensor::<f32>::randn(&[20, 32, 16, 16], &mut rng);
    let k = Tensor::<f32>::randn(&[32, 32, 3, 3], &mut rng);
    c.bench_function("conv2d 20x32x16x16 k3 s2", |b| {
        b.iter_batched(
            || {
                let mut tape: Tape<f32> = Tape::new();
                let xi = tape.constant(&x);
                let ki = tape.constant(&k);
                (tape, xi, ki)
            },
            |(mut tape, xi, ki)| {
                let y = tape.conv2d(xi, ki, 2, 1);
                std::hint::black_box(tape.value(y).data()[0]);
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_selective_scan(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (d, n, t, batch) = (64usize, 16usize, 10usize, 4usize);
    let u = Tensor::<f32>::randn(&[batch, t, d], &mut rng);
    let a_log = Tensor::<f32>::randn(&[d, n], &mut rng);
    let conv_k = Tensor::<f32>::zeros(&[d, 1, 3]);
    let w_delta = Tensor::<f32>::randn(&[d, d], &mut rng);
    let b_delta = Tensor::<f32>::zeros(&[d]);
    let w_b = Tensor::<f32>::randn(&[d, n], &mut rng);
    let w_c = Tensor::<f32>::randn(&[d, n], &mut rng);
    c.bench_function("selective_scan B4 T10 D64 N16", |b| {
        b.iter_batched(
            || {
                let mut tape: Tape<f32> = Tape::new();
                let p = SsmDirTensors {
                    a_log: tape.constant(&a_log),
                    conv_k: tape.constant(&conv_k),
                    w_delta: tape.constant(&w_delta),
                    b_delta: tape.constant(&b_delta),
                    w_b: tape.constant(&w_b),
                    w_c: tape.constant(&w_c),
                };
                let ui = tape.constant(&u);
                (tape, p, ui)
            },
            |(mut tape, p, ui)| {
                let y = selective_scan(&mut tape, &p, ui, false);
                std::hint::black_box(tape.value(y).data()[0]);
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_ssim(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = Tensor::<f32>::rand_uniform(&[32 * 32], 0.0, 1.0, &mut rng);
    let bt = Tensor::<f32>::rand_uniform(&[32 * 32], 0.0, 1.0, &mut rng);
    c.bench_function("ssim_frame 32x32", |b| {
        b.iter(|| {
            let v = ssim_frame(a.data(), bt.data(), 32, 32).unwrap();
            std::hint::black_box(v);
        })
    });
}

criterion_group!(benches, bench_conv2d, bench_selective_scan, bench_ssim);
criterion_main!(benches);
