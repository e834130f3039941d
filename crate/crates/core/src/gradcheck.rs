//! Central finite-difference gradient oracle.
//!
//! This path is independent of the tape's backward rules: it only re-runs
//! forward functions at perturbed inputs. Checks run in f64, where an h of
//! 1e-4 leaves plenty of headroom below the test tolerances.

/// Default central-difference step.
pub const DEFAULT_H: f64 = 1e-4;

/// Central finite differences of a scalar function at `x`.
pub fn numerical_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Relative error with an absolute floor so near-zero gradients compare on
/// an absolute scale instead of blowing up.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Largest elementwise relative error between two gradient vectors.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| rel_error(a, b))
        .fold(0.0, f64::max)
}

/// Outcome of one gradient check class.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub instances: usize,
}

impl CheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} [{}]: max rel err {:.3e} (tolerance {:.0e}, {} instances)",
            if self.pass() { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tolerance,
            self.instances
        )
    }
}

/// The seeded finite-difference suite over every differentiable op and the
/// fully mixed cell forward. All checks run in f64.
pub mod suite {
    use super::*;
    use crate::candidates::NUM_OPS;
    use crate::network::{build_supernet, ForwardPlan, ForwardStats, NetworkConfig};
    use crate::rng::{mix, rng_from, uniform_vec};
    use crate::tensor::{BnStats, ConvSpec, PoolKind, Tape, Tensor};

    fn rand_t(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::param(shape, uniform_vec(&mut rng_from(seed), n, lo, hi)).unwrap()
    }

    /// Fixed random projection turning a tensor output into a scalar loss,
    /// so every output element carries gradient signal.
    fn proj_loss(tape: &mut Tape<f64>, out: &Tensor<f64>, seed: u64) -> Tensor<f64> {
        let r = Tensor::from_vec(
            out.shape().to_vec(),
            uniform_vec(&mut rng_from(mix(seed, 0x9906)), out.numel(), -1.0, 1.0),
        )
        .unwrap();
        let prod = tape.mul(out, &r).unwrap();
        tape.sum_all(&prod).unwrap()
    }

    /// Generic harness: `setup` creates the leaf parameters once, `build`
    /// re-runs the graph on them. Every parameter is compared against
    /// central differences of a projection loss.
    fn check_graph(
        name: &'static str,
        tolerance: f64,
        instances: usize,
        h: f64,
        setup: impl Fn(u64) -> Vec<Tensor<f64>>,
        build: impl Fn(&[Tensor<f64>], &mut Tape<f64>) -> Tensor<f64>,
    ) -> CheckReport {
        let mut worst = 0.0f64;
        for inst in 0..instances {
            let seed = 1000 + 17 * inst as u64;
            let params = setup(seed);
            for p in &params {
                // Analytic gradient from one recorded pass.
                for q in &params {
                    q.reset_grad();
                }
                {
                    let mut tape = Tape::new();
                    let out = build(&params, &mut tape);
                    let loss = proj_loss(&mut tape, &out, seed);
                    tape.backward(&loss).unwrap();
                }
                let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
                // Finite differences over forward-only passes.
                let p0 = p.to_vec();
                let fd = numerical_grad(
                    |v| {
                        p.values_mut().copy_from_slice(v);
                        let mut tape = Tape::no_grad();
                        let out = build(&params, &mut tape);
                        proj_loss(&mut tape, &out, seed).item()
                    },
                    &p0,
                    h,
                );
                p.values_mut().copy_from_slice(&p0);
                worst = worst.max(max_rel_error(&analytic, &fd));
            }
        }
        CheckReport { name, tolerance, max_rel_err: worst, instances }
    }

    pub fn conv_standard(instances: usize) -> CheckReport {
        check_graph(
            "conv2d 3x3 (im2col path)",
            1e-6,
            instances,
            DEFAULT_H,
            |seed| vec![rand_t(vec![1, 2, 5, 5], mix(seed, 1), -1.0, 1.0), rand_t(vec![3, 2, 3, 3], mix(seed, 2), -0.6, 0.6)],
            |p, tape| tape.conv2d(&p[0], &p[1], ConvSpec::plain(1, 1)).unwrap(),
        )
    }

    pub fn conv_strided_im2col(instances: usize) -> CheckReport {
        check_graph(
            "conv2d 3x3 stride 2 grouped (im2col path)",
            1e-6,
            instances,
            DEFAULT_H,
            |seed| vec![rand_t(vec![2, 4, 6, 6], mix(seed, 3), -1.0, 1.0), rand_t(vec![4, 2, 3, 3], mix(seed, 4), -0.6, 0.6)],
            |p, tape| {
                tape.conv2d(&p[0], &p[1], ConvSpec { stride: 2, padding: 1, dilation: 1, groups: 2 }).unwrap()
            },
        )
    }

    pub fn conv_pointwise(instances: usize) -> CheckReport {
        check_graph(
            "conv2d 1x1 (pointwise path)",
            1e-6,
            instances,
            DEFAULT_H,
            |seed| vec![rand_t(vec![2, 4, 4, 4], mix(seed, 5), -1.0, 1.0), rand_t(vec![3, 4, 1, 1], mix(seed, 6), -0.6, 0.6)],
            |p, tape| tape.conv2d(&p[0], &p[1], ConvSpec::plain(1, 0)).unwrap(),
        )
    }

    pub fn conv_pointwise_strided(instances: usize) -> CheckReport {
        check_graph(
            "conv2d 1x1 stride 2 (factorized-reduce shape)",
            1e-6,
            instances,
            DEFAULT_H,
            |seed| vec![rand_t(vec![1, 4, 6, 6], mix(seed, 27), -1.0, 1.0), rand_t(vec![2, 4, 1, 1], mix(seed, 28), -0.6, 0.6)],
            |p, tape| {
                tape.conv2d(&p[0], &p[1], ConvSpec { stride: 2, padding: 0, dilation: 1, groups: 1 }).unwrap()
            },
        )
    }

    pub fn conv_depthwise(instances: usize) -> CheckReport {
        check_graph(
            "conv2d depthwise 3x3 (stencil path)",
            1e-6,
            instances,
            DEFAULT_H,
            |seed| vec![rand_t(vec![1, 3, 6, 6], mix(seed, 7), -1.0, 1.0), rand_t(vec![3, 1, 3, 3], mix(seed, 8), -0.6, 0.6)],
            |p, tape| {
                tape.conv2d(&p[0], &p[1], ConvSpec { stride: 1, padding: 1, dilation: 1, groups: 3 }).unwrap()
            },
        )
    }

    pub fn conv_depthwise_dilated(instances: usize) -> CheckReport {
        check_graph(
            "conv2d depthwise 5x5 dilation 2",
            1e-6,
            instances,
            DEFAULT_H,
            |seed| vec![rand_t(vec![1, 2, 9, 9], mix(seed, 9), -1.0, 1.0), rand_t(vec![2, 1, 5, 5], mix(seed, 10), -0.6, 0.6)],
            |p, tape| {
                tape.conv2d(&p[0], &p[1], ConvSpec { stride: 1, padding: 4, dilation: 2, groups: 2 }).unwrap()
            },
        )
    }

    pub fn conv_strided_depthwise(instances: usize) -> CheckReport {
        check_graph(
            "conv2d depthwise 3x3 stride 2",
            1e-6,
            instances,
            DEFAULT_H,
            |seed| vec![rand_t(vec![1, 3, 6, 6], mix(seed, 11), -1.0, 1.0), rand_t(vec![3, 1, 3, 3], mix(seed, 12), -0.6, 0.6)],
            |p, tape| {
                tape.conv2d(&p[0], &p[1], ConvSpec { stride: 2, padding: 1, dilation: 1, groups: 3 }).unwrap()
            },
        )
    }

    pub fn max_pool(instances: usize) -> CheckReport {
        // Inputs are spread so no pooling window holds a near-tie; the
        // argmax then never flips under the FD perturbation.
        check_graph(
            "max pool 3x3",
            1e-4,
            instances,
            1e-5,
            |seed| {
                let x = rand_t(vec![1, 2, 6, 6], mix(seed, 13), -1.0, 1.0);
                {
                    let mut v = x.values_mut();
                    for (i, vi) in v.iter_mut().enumerate() {
                        *vi += (i % 37) as f64 * 0.017;
                    }
                }
                vec![x]
            },
            |p, tape| tape.pool2d(&p[0], PoolKind::Max, 3, 2, 1).unwrap(),
        )
    }

    pub fn avg_pool(instances: usize) -> CheckReport {
        check_graph(
            "avg pool 3x3",
            1e-6,
            instances,
            DEFAULT_H,
            |seed| vec![rand_t(vec![1, 2, 6, 6], mix(seed, 14), -1.0, 1.0)],
            |p, tape| tape.pool2d(&p[0], PoolKind::Avg, 3, 1, 1).unwrap(),
        )
    }

    pub fn batch_norm_train(instances: usize) -> CheckReport {
        check_graph(
            "batch norm (train mode)",
            1e-5,
            instances,
            DEFAULT_H,
            |seed| {
                vec![
                    rand_t(vec![2, 3, 4, 4], mix(seed, 15), -2.0, 2.0),
                    rand_t(vec![3], mix(seed, 16), 0.5, 1.5),
                    rand_t(vec![3], mix(seed, 17), -0.5, 0.5),
                ]
            },
            |p, tape| {
                let mut stats = BnStats::new(3);
                tape.batch_norm(&p[0], &p[1], &p[2], &mut stats, 0.1, 1e-5, true).unwrap()
            },
        )
    }

    pub fn relu_away_from_kink(instances: usize) -> CheckReport {
        check_graph(
            "relu (|x| >= 1e-2)",
            1e-6,
            instances,
            DEFAULT_H,
            |seed| {
                let x = rand_t(vec![2, 8], mix(seed, 18), -1.0, 1.0);
                {
                    let mut v = x.values_mut();
                    for vi in v.iter_mut() {
                        *vi += vi.signum() * 1e-2;
                    }
                }
                vec![x]
            },
            |p, tape| tape.relu(&p[0]).unwrap(),
        )
    }

    pub fn linear_layer(instances: usize) -> CheckReport {
        check_graph(
            "linear",
            1e-6,
            instances,
            DEFAULT_H,
            |seed| {
                vec![
                    rand_t(vec![3, 4], mix(seed, 19), -1.0, 1.0),
                    rand_t(vec![5, 4], mix(seed, 20), -0.7, 0.7),
                    rand_t(vec![5], mix(seed, 21), -0.3, 0.3),
                ]
            },
            |p, tape| tape.linear(&p[0], &p[1], &p[2]).unwrap(),
        )
    }

    pub fn softmax_composite(instances: usize) -> CheckReport {
        check_graph(
            "softmax",
            1e-6,
            instances,
            DEFAULT_H,
            |seed| vec![rand_t(vec![NUM_OPS], mix(seed, 22), -2.0, 2.0)],
            |p, tape| tape.softmax_1d(&p[0]).unwrap(),
        )
    }

    pub fn elementwise_and_shape_ops(instances: usize) -> CheckReport {
        check_graph(
            "add/mul/scale/concat/crop/gap/row composite",
            1e-6,
            instances,
            DEFAULT_H,
            |seed| {
                vec![
                    rand_t(vec![1, 2, 4, 4], mix(seed, 23), -1.0, 1.0),
                    rand_t(vec![1, 2, 4, 4], mix(seed, 24), -1.0, 1.0),
                    rand_t(vec![3, 2], mix(seed, 25), -1.0, 1.0),
                ]
            },
            |p, tape| {
                let s = tape.add(&p[0], &p[1]).unwrap();
                let m = tape.mul(&s, &p[0]).unwrap();
                let sc2 = tape.scale(&m, -0.7).unwrap();
                let cat = tape.concat_channels(&[sc2, p[0].clone()]).unwrap();
                let crop = tape.crop_tl(&cat, 1, 1).unwrap();
                let gap = tape.global_avg_pool(&crop).unwrap();
                let row = tape.row(&p[2], 1).unwrap();
                let gsum = tape.sum_all(&gap).unwrap();
                let rsum = tape.sum_all(&row).unwrap();
                tape.add(&gsum, &rsum).unwrap()
            },
        )
    }

    pub fn weighted_sum_mixing(instances: usize) -> CheckReport {
        check_graph(
            "weighted sum (mixing node)",
            1e-6,
            instances,
            DEFAULT_H,
            |seed| {
                let mut params: Vec<Tensor<f64>> =
                    (0..4).map(|k| rand_t(vec![1, 2, 3, 3], mix(seed, 30 + k), -1.0, 1.0)).collect();
                params.push(rand_t(vec![4], mix(seed, 35), -1.0, 1.0));
                params
            },
            |p, tape| {
                let soft = tape.softmax_1d(&p[4]).unwrap();
                tape.weighted_sum(&p[..4], &soft).unwrap()
            },
        )
    }

    pub fn cross_entropy_loss(instances: usize) -> CheckReport {
        let mut worst = 0.0f64;
        for inst in 0..instances {
            let seed = 3000 + inst as u64;
            let logits = rand_t(vec![4, 6], mix(seed, 40), -2.0, 2.0);
            let labels = vec![0usize, 2, 5, 3];
            let p0 = logits.to_vec();
            logits.reset_grad();
            {
                let mut tape = Tape::new();
                let loss = tape.cross_entropy(&logits, &labels).unwrap();
                tape.backward(&loss).unwrap();
            }
            let analytic = logits.grad().unwrap();
            // Closed form: (softmax - onehot) / N.
            let mut expect = vec![0.0f64; 24];
            for n in 0..4 {
                let row = &p0[n * 6..(n + 1) * 6];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for k in 0..6 {
                    expect[n * 6 + k] = exps[k] / z / 4.0;
                }
                expect[n * 6 + labels[n]] -= 1.0 / 4.0;
            }
            worst = worst.max(max_rel_error(&analytic, &expect));
            let fd = numerical_grad(
                |v| {
                    logits.values_mut().copy_from_slice(v);
                    let mut tape = Tape::no_grad();
                    tape.cross_entropy(&logits, &labels).unwrap().item()
                },
                &p0,
                DEFAULT_H,
            );
            logits.values_mut().copy_from_slice(&p0);
            worst = worst.max(max_rel_error(&analytic, &fd));
        }
        CheckReport { name: "cross entropy", tolerance: 1e-6, max_rel_err: worst, instances }
    }

    /// Full mixed forward (every edge relaxed) through a small supernet:
    /// finite differences on both alpha tables against the tape gradient.
    pub fn mixed_cell_alpha(instances: usize) -> CheckReport {
        let mut worst = 0.0f64;
        for inst in 0..instances {
            let seed = 7000 + inst as u64;
            let (mut net, alphas) = build_supernet::<f64>(NetworkConfig::search(2, 4, 4), seed).unwrap();
            let plan = ForwardPlan::full_mixed(net.topology.num_edges());
            let x = rand_t(vec![1, 3, 8, 8], mix(seed, 50), -1.0, 1.0);
            x.set_requires_grad(false);
            let labels = vec![(seed % 4) as usize];
            for table in [&alphas.normal, &alphas.reduce] {
                let p0 = table.to_vec();
                table.reset_grad();
                {
                    let mut tape = Tape::new();
                    let mut stats = ForwardStats::default();
                    let logits = net.forward(&mut tape, &x, &alphas, &plan, true, &mut stats).unwrap();
                    let loss = tape.cross_entropy(&logits, &labels).unwrap();
                    tape.backward(&loss).unwrap();
                }
                let analytic = table.grad().expect("alpha gradient");
                let fd = numerical_grad(
                    |v| {
                        table.values_mut().copy_from_slice(v);
                        let mut tape = Tape::no_grad();
                        let mut stats = ForwardStats::default();
                        let logits = net.forward(&mut tape, &x, &alphas, &plan, true, &mut stats).unwrap();
                        let mut t2 = Tape::no_grad();
                        t2.cross_entropy(&logits, &labels).unwrap().item()
                    },
                    &p0,
                    DEFAULT_H,
                );
                table.values_mut().copy_from_slice(&p0);
                table.reset_grad();
                worst = worst.max(max_rel_error(&analytic, &fd));
            }
        }
        CheckReport { name: "mixed cell forward d(loss)/d(alpha)", tolerance: 1e-4, max_rel_err: worst, instances }
    }

    /// The whole suite at a given per-check instance count.
    pub fn run_all(instances: usize, cell_instances: usize) -> Vec<CheckReport> {
        vec![
            conv_standard(instances),
            conv_strided_im2col(instances),
            conv_pointwise(instances),
            conv_pointwise_strided(instances),
            conv_depthwise(instances),
            conv_depthwise_dilated(instances),
            conv_strided_depthwise(instances),
            max_pool(instances),
            avg_pool(instances),
            batch_norm_train(instances),
            relu_away_from_kink(instances),
            linear_layer(instances),
            softmax_composite(instances),
            elementwise_and_shape_ops(instances),
            weighted_sum_mixing(instances),
            cross_entropy_loss(instances),
            mixed_cell_alpha(cell_instances),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = [1.0, -2.0, 0.5];
        let g = numerical_grad(f, &x, DEFAULT_H);
        let expect = [2.0, -4.0, 1.0];
        assert!(max_rel_error(&expect, &g) < 1e-8);
    }
}
