//! Isolated kernel timings. Run with
//! `cargo test -p edas-core --test kernel_probe -- --ignored --nocapture`.

use std::time::Instant;

use edas_core::tensor::kernels::{conv1x1_fwd, depthwise_fwd, gemm_accum, Window};

fn bench(name: &str, flops_per_iter: f64, mut f: impl FnMut()) {
    // Warm up.
    f();
    let t0 = Instant::now();
    let mut iters = 0;
    while t0.elapsed().as_secs_f64() < 0.5 {
        f();
        iters += 1;
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("{name}: {:.2} GFLOP/s ({:.3} ms/iter)", flops_per_iter * iters as f64 / dt / 1e9, dt * 1000.0 / iters as f64);
}

#[test]
#[ignore]
fn kernel_throughput() {
    // Big clean GEMM: 64 x 256 x 1024.
    let (m, k, n) = (64, 256, 1024);
    let a = vec![0.5f32; m * k];
    let b = vec![0.25f32; k * n];
    let mut out = vec![0.0f32; m * n];
    bench("gemm f32 64x256x1024", (2 * m * k * n) as f64, || {
        out.iter_mut().for_each(|v| *v = 0.0);
        gemm_accum(&a, &b, &mut out, m, k, n);
    });

    let (m2, k2, n2) = (8, 8, 256);
    let a2 = vec![0.5f32; m2 * k2];
    let b2 = vec![0.25f32; k2 * n2];
    let mut out2 = vec![0.0f32; m2 * n2];
    bench("gemm f32 8x8x256 (pointwise tile)", (2 * m2 * k2 * n2) as f64, || {
        out2.iter_mut().for_each(|v| *v = 0.0);
        gemm_accum(&a2, &b2, &mut out2, m2, k2, n2);
    });

    // Full pointwise conv across the batch, C=8, 16x16.
    let (nn, c, hw) = (64, 8, 256);
    let x = vec![0.3f32; nn * c * hw];
    let w = vec![0.2f32; c * c];
    let mut y = vec![0.0f32; nn * c * hw];
    bench("conv1x1 N=64 C=8 16x16", (2 * nn * c * c * hw) as f64, || {
        y.iter_mut().for_each(|v| *v = 0.0);
        conv1x1_fwd(&x, &w, &mut y, nn, c, c, hw, 1);
    });

    // Depthwise 3x3, C=8, 16x16.
    let win = Window { in_h: 16, in_w: 16, kh: 3, kw: 3, stride: 1, padding: 1, dilation: 1, out_h: 16, out_w: 16 };
    let wd = vec![0.1f32; c * 9];
    let mut yd = vec![0.0f32; nn * c * hw];
    bench("depthwise3x3 N=64 C=8 16x16", (2 * nn * c * 9 * hw) as f64, || {
        yd.iter_mut().for_each(|v| *v = 0.0);
        depthwise_fwd(&x, &wd, &mut yd, nn, c, &win);
    });
}
