//! Genotype derivation from architecture parameters, shared-weight
//! evaluation of the derived model, and construction/retraining of the
//! discrete evaluation network.

use crate::candidates::{build_op, BatchNorm, Conv2dLayer, FactorizedReduce, OpInstance, OpKind, ReluConvBn, NUM_OPS};
use crate::cell::{AlphaTable, CellTopology, CellType, Genotype, GenotypeEdge};
use crate::data::{batches, AugmentConfig, LabeledImageSet};
use crate::error::{Error, Result};
use crate::network::{ForwardPlan, ForwardStats, NetworkConfig, OneShotNetwork};
use crate::optim::{cosine_lr, Sgd};
use crate::rng::{mix, rng_from, uniform_vec};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

fn softmax64(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Best non-zero op of one alpha row plus its softmax weight (softmax taken
/// over all ops including zero). Ties break toward the lower op index.
pub fn edge_choice(row: &[f64]) -> (OpKind, f64) {
    debug_assert_eq!(row.len(), NUM_OPS);
    let w = softmax64(row);
    let mut best = 0usize;
    for k in 1..NUM_OPS {
        if OpKind::from_index(k).unwrap() == OpKind::Zero {
            continue;
        }
        if w[k] > w[best] {
            best = k;
        }
    }
    (OpKind::from_index(best).unwrap(), w[best])
}

/// Prunes the alpha table to a discrete genotype: per edge the top non-zero
/// op, per intermediate node the two incoming edges with the largest
/// chosen-op softmax weight. Ties break toward (lower edge index, lower op
/// index).
pub fn derive_genotype<T: Scalar>(alphas: &AlphaTable<T>, topology: &CellTopology) -> Genotype {
    let mut per_type = Vec::with_capacity(2);
    for cell_type in CellType::BOTH {
        let mut retained = Vec::new();
        for j in topology.intermediates() {
            let mut scored: Vec<(usize, OpKind, f64)> = topology
                .incoming(j)
                .into_iter()
                .map(|e| {
                    let row: Vec<f64> =
                        alphas.row_values(cell_type, e).iter().map(|v| v.to_f64_lossy()).collect();
                    let (op, w) = edge_choice(&row);
                    (e, op, w)
                })
                .collect();
            // Stable sort by descending weight keeps lower edge indices first
            // on ties.
            scored.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
            for &(e, op, _) in scored.iter().take(2) {
                let (i, jj) = topology.edges()[e];
                retained.push(GenotypeEdge { op, from: i, to: jj });
            }
        }
        retained.sort_by_key(|e| (e.to, e.from));
        per_type.push(retained);
    }
    let reduce = per_type.pop().unwrap();
    let normal = per_type.pop().unwrap();
    Genotype { normal, reduce, concat: topology.intermediates().collect() }
}

/// Top-1 accuracy of the supernet under an arbitrary per-edge plan
/// (evaluation mode, no recording, no augmentation).
pub fn plan_accuracy<T: Scalar>(
    net: &mut OneShotNetwork<T>,
    alphas: &AlphaTable<T>,
    plan: &ForwardPlan,
    set: &LabeledImageSet<T>,
    batch_size: usize,
) -> Result<f64> {
    if set.count() == 0 {
        return Err(Error::arg("empty evaluation set"));
    }
    let mut correct = 0usize;
    let mut stats = ForwardStats::default();
    for (images, labels) in batches(set, batch_size, None, 0, 0)? {
        let mut tape = Tape::no_grad();
        let logits = net.forward(&mut tape, &images, alphas, plan, false, &mut stats)?;
        correct += count_correct(&logits, &labels);
    }
    Ok(correct as f64 / set.count() as f64)
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let [n, k] = logits.shape() else { panic!("logits must be 2-d") };
    let v = logits.values();
    let mut correct = 0;
    for (row, &label) in labels.iter().enumerate().take(*n).map(|(i, l)| (i, l)) {
        let r = &v[row * k..(row + 1) * k];
        let mut best = 0;
        for j in 1..*k {
            if r[j] > r[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct
}

/// Validation accuracy of the derived model with supernet weights reused:
/// retained edges run their chosen op, all other edges contribute exact
/// zeros (numerically identical to structural removal, without
/// re-indexing the weights).
pub fn evaluate_derived_shared<T: Scalar>(
    net: &mut OneShotNetwork<T>,
    alphas: &AlphaTable<T>,
    set: &LabeledImageSet<T>,
    batch_size: usize,
) -> Result<f64> {
    let genotype = derive_genotype(alphas, &net.topology);
    let plan = ForwardPlan::from_genotype(&genotype, &net.topology)?;
    plan_accuracy(net, alphas, &plan, set, batch_size)
}

struct DerivedCell<T> {
    cell_type: CellType,
    prep0: DerivedPreproc<T>,
    prep1: ReluConvBn<T>,
    /// Per intermediate node: (source state index, op).
    node_ops: Vec<Vec<(usize, OpInstance<T>)>>,
}

enum DerivedPreproc<T> {
    Std(ReluConvBn<T>),
    Reduce(FactorizedReduce<T>),
}

/// The evaluation network: same macro-structure as the supernet, one op per
/// retained edge, fresh weights, learnable BN affine.
pub struct DerivedNetwork<T> {
    pub config: NetworkConfig,
    pub topology: CellTopology,
    pub genotype: Genotype,
    stem_conv: Conv2dLayer<T>,
    stem_bn: BatchNorm<T>,
    cells: Vec<DerivedCell<T>>,
    fc_weight: Tensor<T>,
    fc_bias: Tensor<T>,
}

pub fn build_eval_network<T: Scalar>(
    genotype: &Genotype,
    config: NetworkConfig,
    seed: u64,
) -> Result<DerivedNetwork<T>> {
    config.validate()?;
    let topology = CellTopology::default();
    genotype.validate(&topology)?;
    let mut rng = rng_from(mix(seed, 0xde5e));
    let bn = config.bn;
    let affine = config.affine;
    let c_stem = config.stem_multiplier * config.channels;
    let stem_conv = Conv2dLayer::new(config.in_channels, c_stem, 3, 1, 1, 1, 1, &mut rng);
    let stem_bn = BatchNorm::new(c_stem, true, bn);
    let reductions = config.reduction_positions();
    let (mut c_pp, mut c_p, mut c) = (c_stem, c_stem, config.channels);
    let mut reduction_prev = false;
    let mut cells = Vec::with_capacity(config.cells);
    for i in 0..config.cells {
        let reduction = reductions.contains(&i);
        if reduction {
            c *= 2;
        }
        let cell_type = if reduction { CellType::Reduce } else { CellType::Normal };
        let prep0 = if reduction_prev {
            DerivedPreproc::Reduce(FactorizedReduce::new(c_pp, c, affine, bn, &mut rng)?)
        } else {
            DerivedPreproc::Std(ReluConvBn::new(c_pp, c, affine, bn, &mut rng))
        };
        let prep1 = ReluConvBn::new(c_p, c, affine, bn, &mut rng);
        let mut node_ops: Vec<Vec<(usize, OpInstance<T>)>> = (0..topology.steps()).map(|_| Vec::new()).collect();
        for e in genotype.edges(cell_type) {
            let stride = if reduction && e.from < 2 { 2 } else { 1 };
            let op = build_op(e.op, c, stride, affine, bn, &mut rng)?;
            node_ops[e.to - 2].push((e.from, op));
        }
        cells.push(DerivedCell { cell_type, prep0, prep1, node_ops });
        reduction_prev = reduction;
        c_pp = c_p;
        c_p = topology.steps() * c;
    }
    let b = (6.0 / c_p as f64).sqrt();
    let fc_weight = Tensor::param(vec![config.classes, c_p], uniform_vec(&mut rng, config.classes * c_p, -b, b))?;
    let fc_bias = Tensor::param(vec![config.classes], vec![T::zero(); config.classes])?;
    Ok(DerivedNetwork {
        config,
        topology,
        genotype: genotype.clone(),
        stem_conv,
        stem_bn,
        cells,
        fc_weight,
        fc_bias,
    })
}

impl<T: Scalar> DerivedNetwork<T> {
    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let s = self.stem_conv.forward(tape, x)?;
        let s = self.stem_bn.forward(tape, &s, train)?;
        let mut s0 = s.clone();
        let mut s1 = s;
        let steps = self.topology.steps();
        for cell in self.cells.iter_mut() {
            let p0 = match &mut cell.prep0 {
                DerivedPreproc::Std(p) => p.forward(tape, &s0, train)?,
                DerivedPreproc::Reduce(p) => p.forward(tape, &s0, train)?,
            };
            let p1 = cell.prep1.forward(tape, &s1, train)?;
            let mut states = vec![p0, p1];
            for j in 0..steps {
                let mut contribs = Vec::with_capacity(2);
                for (from, op) in cell.node_ops[j].iter_mut() {
                    let x = states[*from].clone();
                    contribs.push(op.forward(tape, &x, train)?);
                }
                let node = if contribs.len() == 1 {
                    contribs.pop().unwrap()
                } else {
                    tape.add_n(&contribs)?
                };
                states.push(node);
            }
            let out = tape.concat_channels(&states[2..])?;
            s0 = std::mem::replace(&mut s1, out);
            let _ = cell.cell_type;
        }
        let pooled = tape.global_avg_pool(&s1)?;
        tape.linear(&pooled, &self.fc_weight, &self.fc_bias)
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        out.push(self.stem_conv.weight.clone());
        self.stem_bn.params(&mut out);
        for cell in &self.cells {
            match &cell.prep0 {
                DerivedPreproc::Std(p) => p.params(&mut out),
                DerivedPreproc::Reduce(p) => p.params(&mut out),
            }
            cell.prep1.params(&mut out);
            for ops in &cell.node_ops {
                for (_, op) in ops {
                    out.extend(op.params());
                }
            }
        }
        out.push(self.fc_weight.clone());
        out.push(self.fc_bias.clone());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn accuracy(&mut self, set: &LabeledImageSet<T>, batch_size: usize) -> Result<f64> {
        if set.count() == 0 {
            return Err(Error::arg("empty evaluation set"));
        }
        let mut correct = 0usize;
        for (images, labels) in batches(set, batch_size, None, 0, 0)? {
            let mut tape = Tape::no_grad();
            let logits = self.forward(&mut tape, &images, false)?;
            correct += count_correct(&logits, &labels);
        }
        Ok(correct as f64 / set.count() as f64)
    }
}

/// Parameter-count -> megabytes at 4 bytes per parameter (the convention
/// the reported model sizes use).
pub fn model_size_mb(param_count: usize) -> f64 {
    param_count as f64 * 4.0 / (1u64 << 20) as f64
}

/// From-scratch retraining settings. Optimizer family and schedule mirror
/// the search-stage weight settings; only the epoch count (and cutout)
/// differ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub cutout: Option<usize>,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            epochs: 600,
            batch_size: 64,
            lr_max: 0.025,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 3e-4,
            cutout: Some(16),
            seed: 0,
        }
    }
}

pub struct RetrainOutcome {
    pub test_accuracy: f64,
    pub final_train_loss: f64,
    pub params: usize,
    pub size_mb: f64,
}

/// Trains a derived network from scratch and reports test accuracy.
pub fn retrain<T: Scalar>(
    net: &mut DerivedNetwork<T>,
    train: &LabeledImageSet<T>,
    test: &LabeledImageSet<T>,
    cfg: &RetrainConfig,
) -> Result<RetrainOutcome> {
    let mut opt = Sgd::new(net.params(), cfg.momentum, cfg.weight_decay);
    let augment = AugmentConfig { pad: 4, flip_prob: 0.5, cutout: cfg.cutout };
    augment.validate(train.side)?;
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        for (it, (images, labels)) in batches(train, cfg.batch_size, Some(augment), cfg.seed, epoch)?.enumerate() {
            let mut tape = Tape::new();
            let logits = net.forward(&mut tape, &images, true)?;
            let loss = tape.cross_entropy(&logits, &labels)?;
            let lv = loss.item().to_f64_lossy();
            if !lv.is_finite() {
                return Err(Error::numeric(format!(
                    "retrain loss {lv} at epoch {epoch} batch {it}"
                )));
            }
            opt.zero_grads();
            tape.backward(&loss)?;
            opt.step(lr);
            final_loss = lv;
        }
    }
    let test_accuracy = net.accuracy(test, cfg.batch_size)?;
    let params = net.param_count();
    Ok(RetrainOutcome { test_accuracy, final_train_loss: final_loss, params, size_mb: model_size_mb(params) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::candidates::ALL_OPS;
    use crate::rng::rng_from;

    fn alpha_with(topology: &CellTopology, f: impl Fn(CellType, usize, usize) -> f64) -> AlphaTable<f64> {
        let alphas = AlphaTable::new(topology, 1e-9, &mut rng_from(0));
        for ct in CellType::BOTH {
            let t = alphas.table(ct);
            let mut v = t.values_mut();
            for e in 0..topology.num_edges() {
                for k in 0..NUM_OPS {
                    v[e * NUM_OPS + k] = f(ct, e, k);
                }
            }
        }
        alphas
    }

    #[test]
    fn all_equal_alpha_picks_first_nonzero_op_and_lowest_edges() {
        let topo = CellTopology::default();
        let alphas = alpha_with(&topo, |_, _, _| 0.5);
        let g = derive_genotype(&alphas, &topo);
        g.validate(&topo).unwrap();
        for e in g.normal.iter().chain(g.reduce.iter()) {
            assert_eq!(e.op, ALL_OPS[0]);
            assert!(e.from < 2, "tie-break retains edges from the input nodes");
        }
    }

    #[test]
    fn skip_dominant_alpha_derives_all_skips() {
        let topo = CellTopology::default();
        let skip = OpKind::SkipConnect.index();
        let alphas = alpha_with(&topo, |_, _, k| if k == skip { 5.0 } else { 0.0 });
        let g = derive_genotype(&alphas, &topo);
        g.validate(&topo).unwrap();
        assert!(g.normal.iter().all(|e| e.op == OpKind::SkipConnect));
        assert!(g.reduce.iter().all(|e| e.op == OpKind::SkipConnect));
        assert_eq!(g.normal.len(), 8);
    }

    #[test]
    fn zero_never_derived_even_when_maximal() {
        let topo = CellTopology::default();
        let zero = OpKind::Zero.index();
        let pool = OpKind::AvgPool3x3.index();
        let alphas = alpha_with(&topo, |_, _, k| if k == zero { 10.0 } else if k == pool { 1.0 } else { 0.0 });
        let g = derive_genotype(&alphas, &topo);
        assert!(g.normal.iter().all(|e| e.op == OpKind::AvgPool3x3));
    }

    #[test]
    fn derivation_is_shift_invariant_per_edge() {
        let topo = CellTopology::default();
        let mut rng = rng_from(33);
        let alphas = AlphaTable::<f64>::new(&topo, 1.0, &mut rng);
        let g1 = derive_genotype(&alphas, &topo);
        // Adding a constant to one edge's row must not change its choice.
        {
            let mut v = alphas.normal.values_mut();
            for k in 0..NUM_OPS {
                v[5 * NUM_OPS + k] += 100.0;
            }
        }
        let g2 = derive_genotype(&alphas, &topo);
        let edge5 = |g: &Genotype| {
            let (i, j) = topo.edges()[5];
            g.normal.iter().find(|e| e.from == i && e.to == j).map(|e| e.op)
        };
        // Edge 5's op choice is unchanged (its retention rank may move since
        // softmax weights rescale, but the argmax op may not).
        if let (Some(a), Some(b)) = (edge5(&g1), edge5(&g2)) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn eval_network_params_and_shapes() {
        let topo = CellTopology::default();
        let skip = OpKind::SkipConnect.index();
        let alphas = alpha_with(&topo, |_, _, k| if k == skip { 5.0 } else { 0.0 });
        let g = derive_genotype(&alphas, &topo);
        let mut cfg = NetworkConfig::search(8, 8, 10);
        cfg.affine = true;
        let mut net = build_eval_network::<f32>(&g, cfg, 3).unwrap();
        let x = Tensor::zeros(vec![1, 3, 32, 32]);
        let mut tape = Tape::no_grad();
        let y = net.forward(&mut tape, &x, false).unwrap();
        assert_eq!(y.shape(), &[1, 10]);

        // All-skip genotype: every stride-1 skip owns nothing; parameters are
        // the stem, preprocessing, stride-2 skip reduces, and classifier.
        let by_hand: usize = {
            let mut total = 0usize;
            total += 3 * 24 * 9 + 2 * 24; // stem conv + affine stem BN
            let reductions = cfg.reduction_positions();
            let (mut c_pp, mut c_p, mut c) = (24usize, 24usize, 8usize);
            let mut reduction_prev = false;
            for i in 0..cfg.cells {
                let reduction = reductions.contains(&i);
                if reduction {
                    c *= 2;
                }
                // prep0
                total += if reduction_prev {
                    c_pp * (c / 2) * 2 + 2 * c // two 1x1 convs + BN
                } else {
                    c_pp * c + 2 * c
                };
                // prep1
                total += c_p * c + 2 * c;
                // 8 skip edges; stride-2 skips own a factorized reduce.
                let strided = if reduction {
                    // edges from nodes 0/1: (0,j),(1,j) for j=2..6 => 8 edges all strided
                    8
                } else {
                    0
                };
                total += strided * (c * (c / 2) * 2 + 2 * c);
                reduction_prev = reduction;
                c_pp = c_p;
                c_p = 4 * c;
            }
            total += 10 * c_p + 10; // classifier
            total
        };
        assert_eq!(net.param_count(), by_hand);
    }

    #[test]
    fn model_size_arithmetic() {
        assert!((model_size_mb(1_048_576) - 4.0).abs() < 1e-12);
        assert_eq!(format!("{:.2}", model_size_mb(1_048_576)), "4.00");
    }
}
