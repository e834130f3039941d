//! The one-shot network: stem, stacked cells with per-edge candidate op
//! sets, and the classifier head — plus the per-edge evaluation plans that
//! distinguish full relaxation, single-edge relaxation, and argmax
//! forwarding.

use crate::candidates::{build_op, BnConfig, Conv2dLayer, FactorizedReduce, OpInstance, OpKind, ReluConvBn, ALL_OPS, NUM_OPS};
use crate::cell::{argmax_tie_low, AlphaTable, CellTopology, CellType, Genotype};
use crate::error::{Error, Result};
use crate::rng::{mix, rng_from, uniform_vec, ChaCha8Rng};
use crate::scalar::{sc, Scalar};
use crate::tensor::{Tape, Tensor};

/// How one edge is evaluated during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EdgeEval {
    /// Softmax(sign * alpha)-weighted sum of all candidate ops.
    Mixed { sign: f64 },
    /// Only the op with the maximum alpha runs; alpha gets no gradient.
    Argmax,
    /// A fixed op runs (genotype-restricted evaluation).
    Only(OpKind),
    /// The edge contributes an exact zero without executing anything.
    Pruned,
}

/// Per-edge evaluation modes for both cell types.
#[derive(Clone, Debug)]
pub struct ForwardPlan {
    pub normal: Vec<EdgeEval>,
    pub reduce: Vec<EdgeEval>,
}

impl ForwardPlan {
    /// Every edge mixed: the fully relaxed network.
    pub fn full_mixed(num_edges: usize) -> Self {
        ForwardPlan {
            normal: vec![EdgeEval::Mixed { sign: 1.0 }; num_edges],
            reduce: vec![EdgeEval::Mixed { sign: 1.0 }; num_edges],
        }
    }

    /// Every edge argmax-forwarded.
    pub fn all_argmax(num_edges: usize) -> Self {
        ForwardPlan { normal: vec![EdgeEval::Argmax; num_edges], reduce: vec![EdgeEval::Argmax; num_edges] }
    }

    /// One sampled edge mixed (with the given softmax sign), the rest argmax.
    pub fn single_edge(num_edges: usize, cell_type: CellType, edge: usize, sign: f64) -> Self {
        let mut plan = Self::all_argmax(num_edges);
        plan.rows_mut(cell_type)[edge] = EdgeEval::Mixed { sign };
        plan
    }

    /// Genotype-restricted: retained edges run their chosen op, all other
    /// edges contribute exact zeros.
    pub fn from_genotype(genotype: &Genotype, topology: &CellTopology) -> Result<Self> {
        let mut plan = ForwardPlan {
            normal: vec![EdgeEval::Pruned; topology.num_edges()],
            reduce: vec![EdgeEval::Pruned; topology.num_edges()],
        };
        for cell_type in CellType::BOTH {
            for e in genotype.edges(cell_type) {
                let idx = topology
                    .edge_index(e.from, e.to)
                    .ok_or_else(|| Error::arg(format!("genotype edge ({},{}) not in topology", e.from, e.to)))?;
                plan.rows_mut(cell_type)[idx] = EdgeEval::Only(e.op);
            }
        }
        Ok(plan)
    }

    pub fn rows(&self, cell_type: CellType) -> &[EdgeEval] {
        match cell_type {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    pub fn rows_mut(&mut self, cell_type: CellType) -> &mut Vec<EdgeEval> {
        match cell_type {
            CellType::Normal => &mut self.normal,
            CellType::Reduce => &mut self.reduce,
        }
    }
}

/// Instrumented execution counters for one or more forwards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardStats {
    /// Number of candidate-op invocations (mixed edge: all ops; argmax or
    /// fixed edge: one; pruned edge: none).
    pub candidate_op_execs: u64,
}

/// All candidate ops materialized on one edge.
pub struct EdgeOps<T> {
    pub ops: Vec<OpInstance<T>>,
}

impl<T: Scalar> EdgeOps<T> {
    fn new(channels: usize, stride: usize, affine: bool, bn: BnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let ops = ALL_OPS
            .iter()
            .map(|&kind| build_op(kind, channels, stride, affine, bn, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(EdgeOps { ops })
    }

    fn params(&self, out: &mut Vec<Tensor<T>>) {
        for op in &self.ops {
            out.extend(op.params());
        }
    }
}

enum Preproc<T> {
    Std(ReluConvBn<T>),
    Reduce(FactorizedReduce<T>),
}

impl<T: Scalar> Preproc<T> {
    fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        match self {
            Preproc::Std(p) => p.forward(tape, x, train),
            Preproc::Reduce(p) => p.forward(tape, x, train),
        }
    }

    fn params(&self, out: &mut Vec<Tensor<T>>) {
        match self {
            Preproc::Std(p) => p.params(out),
            Preproc::Reduce(p) => p.params(out),
        }
    }
}

/// One supernet cell: preprocessing for the two inputs plus all candidate
/// ops on every edge.
pub struct Cell<T> {
    pub cell_type: CellType,
    prep0: Preproc<T>,
    prep1: ReluConvBn<T>,
    pub edges: Vec<EdgeOps<T>>,
    steps: usize,
}

impl<T: Scalar> Cell<T> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        topology: &CellTopology,
        c_pp: usize,
        c_p: usize,
        c: usize,
        reduction: bool,
        reduction_prev: bool,
        affine: bool,
        bn: BnConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let prep0 = if reduction_prev {
            Preproc::Reduce(FactorizedReduce::new(c_pp, c, affine, bn, rng)?)
        } else {
            Preproc::Std(ReluConvBn::new(c_pp, c, affine, bn, rng))
        };
        let prep1 = ReluConvBn::new(c_p, c, affine, bn, rng);
        let mut edges = Vec::with_capacity(topology.num_edges());
        for &(i, _) in topology.edges() {
            let stride = if reduction && i < 2 { 2 } else { 1 };
            edges.push(EdgeOps::new(c, stride, affine, bn, rng)?);
        }
        Ok(Cell {
            cell_type: if reduction { CellType::Reduce } else { CellType::Normal },
            prep0,
            prep1,
            edges,
            steps: topology.steps(),
        })
    }

    fn params(&self, out: &mut Vec<Tensor<T>>) {
        self.prep0.params(out);
        self.prep1.params(out);
        for e in &self.edges {
            e.params(out);
        }
    }

    /// Evaluates one edge under its plan entry. Returns None for pruned
    /// edges (an exact-zero contribution without execution).
    #[allow(clippy::too_many_arguments)]
    fn edge_forward(
        &mut self,
        tape: &mut Tape<T>,
        edge: usize,
        x: &Tensor<T>,
        alphas: &AlphaTable<T>,
        eval: EdgeEval,
        train: bool,
        stats: &mut ForwardStats,
    ) -> Result<Option<Tensor<T>>> {
        let ops = &mut self.edges[edge].ops;
        match eval {
            EdgeEval::Mixed { sign } => {
                let row = tape.row(alphas.table(self.cell_type), edge)?;
                let row = if sign < 0.0 { tape.scale(&row, sc(-1.0))? } else { row };
                let weights = tape.softmax_1d(&row)?;
                let mut outs = Vec::with_capacity(NUM_OPS);
                for op in ops.iter_mut() {
                    outs.push(op.forward(tape, x, train)?);
                }
                stats.candidate_op_execs += NUM_OPS as u64;
                Ok(Some(tape.weighted_sum(&outs, &weights)?))
            }
            EdgeEval::Argmax => {
                let row = alphas.row_values(self.cell_type, edge);
                let m = argmax_tie_low(&row);
                stats.candidate_op_execs += 1;
                Ok(Some(ops[m].forward(tape, x, train)?))
            }
            EdgeEval::Only(kind) => {
                stats.candidate_op_execs += 1;
                Ok(Some(ops[kind.index()].forward(tape, x, train)?))
            }
            EdgeEval::Pruned => Ok(None),
        }
    }

    /// Full cell forward: preprocess the two inputs, evaluate every edge
    /// under the plan, sum per node, concat the intermediates.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        topology: &CellTopology,
        s0: &Tensor<T>,
        s1: &Tensor<T>,
        alphas: &AlphaTable<T>,
        plan: &ForwardPlan,
        train: bool,
        stats: &mut ForwardStats,
    ) -> Result<Tensor<T>> {
        let rows = plan.rows(self.cell_type);
        let mut states: Vec<Tensor<T>> = Vec::with_capacity(2 + self.steps);
        states.push(self.prep0.forward(tape, s0, train)?);
        states.push(self.prep1.forward(tape, s1, train)?);
        for j in topology.intermediates() {
            let mut contribs = Vec::new();
            for e in topology.incoming(j) {
                let (i, _) = topology.edges()[e];
                let x = states[i].clone();
                if let Some(out) = self.edge_forward(tape, e, &x, alphas, rows[e], train, stats)? {
                    contribs.push(out);
                }
            }
            let node = match contribs.len() {
                0 => {
                    // All incoming edges pruned: the node is exactly zero at
                    // the intermediate-node resolution.
                    let (n, c, h, w) = states[0].dims4()?;
                    let (nh, nw) = if self.cell_type == CellType::Reduce {
                        (h.div_ceil(2), w.div_ceil(2))
                    } else {
                        (h, w)
                    };
                    Tensor::zeros(vec![n, c, nh, nw])
                }
                1 => contribs.pop().unwrap(),
                _ => tape.add_n(&contribs)?,
            };
            states.push(node);
        }
        tape.concat_channels(&states[2..])
    }
}

/// Network-level configuration shared by supernet and derived networks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Initial cell channel count C (doubles at each reduction).
    pub channels: usize,
    /// Number of stacked cells L.
    pub cells: usize,
    pub classes: usize,
    pub in_channels: usize,
    pub stem_multiplier: usize,
    pub bn: BnConfig,
    /// Learnable BN affine parameters (true in evaluation networks).
    pub affine: bool,
}

impl NetworkConfig {
    pub fn search(channels: usize, cells: usize, classes: usize) -> Self {
        NetworkConfig {
            channels,
            cells,
            classes,
            in_channels: 3,
            stem_multiplier: 3,
            bn: BnConfig::default(),
            affine: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells < 2 {
            return Err(Error::arg("cell count must be >= 2"));
        }
        if self.channels < 2 || self.channels % 2 != 0 {
            return Err(Error::arg("channel count must be even and >= 2"));
        }
        if self.classes < 2 {
            return Err(Error::arg("need at least 2 classes"));
        }
        Ok(())
    }

    /// Cell indices that reduce resolution: floor(L/3) and floor(2L/3).
    pub fn reduction_positions(&self) -> [usize; 2] {
        [self.cells / 3, 2 * self.cells / 3]
    }
}

struct Stem<T> {
    conv: Conv2dLayer<T>,
    bn: crate::candidates::BatchNorm<T>,
}

struct Classifier<T> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

/// The supernet: every candidate op materialized on every edge of every
/// cell. Weights are owned here; architecture parameters live in the
/// separate [`AlphaTable`].
pub struct OneShotNetwork<T> {
    pub config: NetworkConfig,
    pub topology: CellTopology,
    stem: Stem<T>,
    pub cells: Vec<Cell<T>>,
    classifier: Classifier<T>,
}

/// Builds the supernet and a fresh alpha table, deterministically from the
/// seed.
pub fn build_supernet<T: Scalar>(
    config: NetworkConfig,
    seed: u64,
) -> Result<(OneShotNetwork<T>, AlphaTable<T>)> {
    config.validate()?;
    let topology = CellTopology::default();
    let net = OneShotNetwork::new(config, topology.clone(), &mut rng_from(mix(seed, 0x11ee)))?;
    let alphas = AlphaTable::new(&topology, 1e-3, &mut rng_from(mix(seed, 0xa1fa)));
    Ok((net, alphas))
}

impl<T: Scalar> OneShotNetwork<T> {
    pub fn new(config: NetworkConfig, topology: CellTopology, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c_stem = config.stem_multiplier * config.channels;
        let stem = Stem {
            conv: Conv2dLayer::new(config.in_channels, c_stem, 3, 1, 1, 1, 1, rng),
            bn: crate::candidates::BatchNorm::new(c_stem, true, config.bn),
        };
        let reductions = config.reduction_positions();
        let (mut c_pp, mut c_p, mut c) = (c_stem, c_stem, config.channels);
        let mut reduction_prev = false;
        let mut cells = Vec::with_capacity(config.cells);
        for i in 0..config.cells {
            let reduction = reductions.contains(&i);
            if reduction {
                c *= 2;
            }
            let cell = Cell::new(&topology, c_pp, c_p, c, reduction, reduction_prev, config.affine, config.bn, rng)?;
            cells.push(cell);
            reduction_prev = reduction;
            c_pp = c_p;
            c_p = topology.steps() * c;
        }
        let b = (6.0 / c_p as f64).sqrt();
        let classifier = Classifier {
            weight: Tensor::param(vec![config.classes, c_p], uniform_vec(rng, config.classes * c_p, -b, b))?,
            bias: Tensor::param(vec![config.classes], vec![T::zero(); config.classes])?,
        };
        Ok(OneShotNetwork { config, topology, stem, cells, classifier })
    }

    /// Forward to logits under a per-edge plan.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        alphas: &AlphaTable<T>,
        plan: &ForwardPlan,
        train: bool,
        stats: &mut ForwardStats,
    ) -> Result<Tensor<T>> {
        let s = self.stem.conv.forward(tape, x)?;
        let s = self.stem.bn.forward(tape, &s, train)?;
        let mut s0 = s.clone();
        let mut s1 = s;
        let topology = self.topology.clone();
        for cell in self.cells.iter_mut() {
            let out = cell.forward(tape, &topology, &s0, &s1, alphas, plan, train, stats)?;
            s0 = std::mem::replace(&mut s1, out);
        }
        let pooled = tape.global_avg_pool(&s1)?;
        tape.linear(&pooled, &self.classifier.weight, &self.classifier.bias)
    }

    /// All learnable operation weights in a fixed traversal order
    /// (architecture parameters are not included).
    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        out.push(self.stem.conv.weight.clone());
        self.stem.bn.params(&mut out);
        for cell in &self.cells {
            cell.params(&mut out);
        }
        out.push(self.classifier.weight.clone());
        out.push(self.classifier.bias.clone());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduction_positions() {
        assert_eq!(NetworkConfig::search(8, 8, 10).reduction_positions(), [2, 5]);
        assert_eq!(NetworkConfig::search(16, 20, 10).reduction_positions(), [6, 13]);
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::search(8, 1, 10).validate().is_err());
        assert!(NetworkConfig::search(7, 8, 10).validate().is_err());
        assert!(NetworkConfig::search(8, 8, 1).validate().is_err());
        assert!(NetworkConfig::search(8, 8, 10).validate().is_ok());
    }

    #[test]
    fn supernet_forward_shape_and_counts() {
        let (mut net, alphas) = build_supernet::<f32>(NetworkConfig::search(4, 4, 10), 7).unwrap();
        let x = Tensor::zeros(vec![2, 3, 16, 16]);
        let mut tape = Tape::no_grad();
        let mut stats = ForwardStats::default();
        let plan = ForwardPlan::all_argmax(net.topology.num_edges());
        let logits = net.forward(&mut tape, &x, &alphas, &plan, false, &mut stats).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        // 4 cells x 14 argmax edges.
        assert_eq!(stats.candidate_op_execs, 4 * 14);
    }

    #[test]
    fn plan_constructors() {
        let plan = ForwardPlan::single_edge(14, CellType::Reduce, 3, -1.0);
        assert_eq!(plan.normal.iter().filter(|e| matches!(e, EdgeEval::Mixed { .. })).count(), 0);
        assert_eq!(plan.reduce[3], EdgeEval::Mixed { sign: -1.0 });
        assert_eq!(plan.reduce.iter().filter(|e| matches!(e, EdgeEval::Argmax)).count(), 13);
    }
}
