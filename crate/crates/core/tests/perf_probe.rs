//! Rough throughput probe for the conv path. Ignored by default; run with
//! `cargo test -p edas-core --test perf_probe -- --ignored --nocapture`.

use std::time::Instant;

use edas_core::rng::{rng_from, uniform_vec};
use edas_core::{ConvSpec, Tape, Tensor};

#[test]
#[ignore]
fn conv_throughput() {
    let mut rng = rng_from(1);
    // Stage-1 desk shape: batch 64, 8 channels, 16x16, pointwise-heavy.
    let n = 64;
    let c = 8;
    let hw = 16;
    let x = Tensor::<f32>::param(vec![n, c, hw, hw], uniform_vec(&mut rng, n * c * hw * hw, -1.0, 1.0)).unwrap();
    let wdw = Tensor::<f32>::param(vec![c, 1, 3, 3], uniform_vec(&mut rng, c * 9, -0.5, 0.5)).unwrap();
    let wpw = Tensor::<f32>::param(vec![c, c, 1, 1], uniform_vec(&mut rng, c * c, -0.5, 0.5)).unwrap();

    let iters = 200;
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::new();
        let dw = tape
            .conv2d(&x, &wdw, ConvSpec { stride: 1, padding: 1, dilation: 1, groups: c })
            .unwrap();
        let pw = tape.conv2d(&dw, &wpw, ConvSpec::plain(1, 0)).unwrap();
        let loss = tape.sum_all(&pw).unwrap();
        tape.backward(&loss).unwrap();
        x.reset_grad();
        wdw.reset_grad();
        wpw.reset_grad();
    }
    let dt = t0.elapsed().as_secs_f64();
    // Forward MACs: depthwise 9*C*HW*N + pointwise C*C*HW*N; backward ~2x.
    let fwd_macs = (9 * c + c * c) * hw * hw * n;
    let total_flops = (fwd_macs * 3 * 2 * iters) as f64;
    println!(
        "conv fwd+bwd: {:.1} ms/iter, ~{:.2} GFLOP/s effective",
        dt * 1000.0 / iters as f64,
        total_flops / dt / 1e9
    );
}
