//! Bilevel search loop: single-edge relaxation with its warmup variant,
//! plus the fully relaxed and argmax-only baselines, with edge sampling,
//! optimizer orchestration, and architecture-parameter dynamics logging.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::candidates::OpKind;
use crate::cell::{AlphaTable, CellType, Genotype};
use crate::data::{batches, AugmentConfig, LabeledImageSet};
use crate::derive::{derive_genotype, edge_choice, plan_accuracy};
use crate::error::{Error, Result};
use crate::network::{build_supernet, ForwardPlan, ForwardStats, NetworkConfig, OneShotNetwork};
use crate::optim::{cosine_lr, AlphaAdam, RowSelection, Sgd};
use crate::rng::{mix, rng_from};
use crate::scalar::Scalar;
use crate::tensor::Tape;

/// The four search modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Every edge mixed (full continuous relaxation).
    DartsFull,
    /// No edge mixed in the weight step; alpha still learns through the
    /// sampled edge's relaxed objective.
    AlphaMax,
    /// One sampled edge mixed per iteration, all others argmax.
    Edas,
    /// Same, with the sign-inversion warmup in the first epochs.
    EdasInv,
}

impl SearchMode {
    pub const ALL: [SearchMode; 4] =
        [SearchMode::DartsFull, SearchMode::AlphaMax, SearchMode::Edas, SearchMode::EdasInv];

    pub fn name(self) -> &'static str {
        match self {
            SearchMode::DartsFull => "darts_full",
            SearchMode::AlphaMax => "alpha_max",
            SearchMode::Edas => "edas",
            SearchMode::EdasInv => "edas_inv",
        }
    }
}

impl std::fmt::Display for SearchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SearchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SearchMode::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown search mode {s:?}")))
    }
}

/// Whether warmup inverts the sign on every iteration or alternates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WarmupPolicy {
    #[default]
    Alternate,
    AlwaysInverted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub cells: usize,
    pub channels: usize,
    pub w_lr_max: f64,
    pub w_lr_min: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub alpha_lr: f64,
    pub alpha_betas: (f64, f64),
    pub alpha_warmup_weight_decay: f64,
    pub warmup_epochs: usize,
    pub warmup_policy: WarmupPolicy,
    pub val_fraction: f64,
    /// Epoch cadence of the derived-model evaluations (the last epoch is
    /// always evaluated).
    pub derived_eval_every: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 25,
            batch_size: 64,
            cells: 20,
            channels: 16,
            w_lr_max: 0.025,
            w_lr_min: 0.001,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            alpha_lr: 0.025,
            alpha_betas: (0.5, 0.999),
            alpha_warmup_weight_decay: 1e-3,
            warmup_epochs: 10,
            warmup_policy: WarmupPolicy::Alternate,
            val_fraction: 0.5,
            derived_eval_every: 1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::arg("epochs and batch size must be positive"));
        }
        for (name, v) in [
            ("w_lr_max", self.w_lr_max),
            ("w_lr_min", self.w_lr_min),
            ("alpha_lr", self.alpha_lr),
        ] {
            if v <= 0.0 {
                return Err(Error::arg(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::arg(format!(
                "warmup epochs {} exceed total epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::arg("val fraction must lie in (0,1)"));
        }
        if self.derived_eval_every == 0 {
            return Err(Error::arg("derived_eval_every must be >= 1"));
        }
        NetworkConfig::search(self.channels, self.cells, 10).validate()
    }
}

/// Global edge ids: 1..=E for the normal cell, E+1..=2E for the reduction
/// cell, in lexicographic edge order.
pub fn edge_id(num_edges: usize, cell_type: CellType, edge: usize) -> u32 {
    match cell_type {
        CellType::Normal => (edge + 1) as u32,
        CellType::Reduce => (num_edges + edge + 1) as u32,
    }
}

pub fn edge_from_id(num_edges: usize, id: u32) -> Result<(CellType, usize)> {
    let id = id as usize;
    if id >= 1 && id <= num_edges {
        Ok((CellType::Normal, id - 1))
    } else if id > num_edges && id <= 2 * num_edges {
        Ok((CellType::Reduce, id - num_edges - 1))
    } else {
        Err(Error::arg(format!("edge id {id} outside 1..={}", 2 * num_edges)))
    }
}

/// Uniform draw over the shared alpha edges of both cell types.
pub fn sample_edge(rng: &mut crate::rng::ChaCha8Rng, num_edges: usize) -> (CellType, usize) {
    let r = rng.random_range(0..2 * num_edges);
    if r < num_edges {
        (CellType::Normal, r)
    } else {
        (CellType::Reduce, r - num_edges)
    }
}

/// Softmax sign for one iteration: -1 only for the inversion-warmup mode
/// during warmup epochs, under the configured policy.
pub fn warmup_sign(mode: SearchMode, policy: WarmupPolicy, warmup_epochs: usize, epoch: usize, iter: usize) -> f64 {
    if mode != SearchMode::EdasInv || epoch >= warmup_epochs {
        return 1.0;
    }
    match policy {
        WarmupPolicy::Alternate => {
            if iter % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        WarmupPolicy::AlwaysInverted => -1.0,
    }
}

/// One per-iteration log row. The wall-clock and weight-decay fields are
/// in-memory instrumentation; persisted scalar rows carry only the
/// deterministic columns.
#[derive(Clone, Debug)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iter: usize,
    /// Global edge id, or 0 when every edge is relaxed.
    pub edge: u32,
    pub sign: i8,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub op_exec_total: u64,
    pub alpha_wd: f64,
    pub wall_ms: f64,
}

/// Per-epoch snapshot: full-precision alpha values, per-edge top-1 ops,
/// the derived genotype, and (on eval epochs) the three accuracy probes.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Normal rows then reduce rows; each row is the 8 op scores.
    pub alpha: Vec<Vec<f64>>,
    pub top1: Vec<OpKind>,
    pub genotype: Genotype,
    pub derived_shared_acc: Option<f64>,
    pub argmax_acc: Option<f64>,
    pub mixed_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SearchLog {
    pub mode: SearchMode,
    pub seed: u64,
    pub num_edges: usize,
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
    /// In-loop bitwise checks that a non-sampled row moved (expected 0).
    pub isolation_violations: u64,
}

impl SearchLog {
    /// Number of epoch transitions where the edge's top-1 op changed.
    pub fn rank_change_count(&self, edge: u32) -> Result<usize> {
        let (ct, idx) = edge_from_id(self.num_edges, edge)?;
        if self.epochs.len() < 2 {
            return Err(Error::arg("rank changes need at least 2 epoch snapshots"));
        }
        let row = match ct {
            CellType::Normal => idx,
            CellType::Reduce => self.num_edges + idx,
        };
        Ok(self
            .epochs
            .windows(2)
            .filter(|w| w[0].top1[row] != w[1].top1[row])
            .count())
    }

    /// Sum of rank changes over all edges.
    pub fn total_rank_changes(&self) -> usize {
        (1..=2 * self.num_edges as u32)
            .map(|e| self.rank_change_count(e).unwrap_or(0))
            .sum()
    }

    /// Rank changes restricted to transitions at or after `from_epoch`.
    pub fn rank_changes_from(&self, from_epoch: usize) -> usize {
        let mut total = 0;
        for w in self.epochs.windows(2) {
            if w[1].epoch < from_epoch.max(1) {
                continue;
            }
            total += (0..2 * self.num_edges).filter(|&r| w[0].top1[r] != w[1].top1[r]).count();
        }
        total
    }
}

/// Bitwise isolation audit over the logged epoch snapshots: outside warmup,
/// any alpha row never sampled during an epoch must be identical across
/// that epoch's boundary snapshots. Returns the number of violating rows.
pub fn verify_alpha_isolation(log: &SearchLog, config: &SearchConfig) -> usize {
    if log.mode == SearchMode::DartsFull {
        return 0;
    }
    let mut violations = 0;
    for w in log.epochs.windows(2) {
        let epoch = w[1].epoch;
        if log.mode == SearchMode::EdasInv && epoch < config.warmup_epochs {
            continue; // weight decay legitimately moves every row
        }
        let sampled: std::collections::HashSet<u32> = log
            .iterations
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.edge)
            .collect();
        for row in 0..2 * log.num_edges {
            let id = row as u32 + 1;
            if sampled.contains(&id) {
                continue;
            }
            let same = w[0].alpha[row]
                .iter()
                .zip(&w[1].alpha[row])
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                violations += 1;
            }
        }
    }
    violations
}

fn top1_ops(alpha: &[Vec<f64>]) -> Vec<OpKind> {
    alpha.iter().map(|row| edge_choice(row).0).collect()
}

/// A search in progress: supernet, alpha table, optimizers, counters.
pub struct SearchRun<T: Scalar> {
    pub config: SearchConfig,
    pub mode: SearchMode,
    pub seed: u64,
    pub net: OneShotNetwork<T>,
    pub alphas: AlphaTable<T>,
    pub stats: ForwardStats,
    w_opt: Sgd<T>,
    a_opt: AlphaAdam<T>,
    edge_rng: crate::rng::ChaCha8Rng,
    isolation_violations: u64,
}

impl<T: Scalar> SearchRun<T> {
    pub fn new(config: SearchConfig, mode: SearchMode, seed: u64, classes: usize) -> Result<Self> {
        config.validate()?;
        let (net, alphas) = build_supernet::<T>(NetworkConfig::search(config.channels, config.cells, classes), seed)?;
        let w_opt = Sgd::new(net.params(), config.w_momentum, config.w_weight_decay);
        let a_opt = AlphaAdam::new(net.topology.num_edges(), config.alpha_lr, config.alpha_betas.0, config.alpha_betas.1);
        Ok(SearchRun {
            config,
            mode,
            seed,
            net,
            alphas,
            stats: ForwardStats::default(),
            w_opt,
            a_opt,
            edge_rng: rng_from(mix(seed, 0xed6e)),
            isolation_violations: 0,
        })
    }

    pub fn sample_edge(&mut self) -> (CellType, usize) {
        sample_edge(&mut self.edge_rng, self.net.topology.num_edges())
    }

    pub fn alpha_steps_taken(&self, cell_type: CellType, edge: usize) -> u64 {
        self.a_opt.row_steps(cell_type, edge)
    }

    pub fn last_alpha_weight_decay(&self) -> Option<f64> {
        self.a_opt.last_weight_decay
    }

    fn alpha_plan(&self, sampled: (CellType, usize), sign: f64) -> ForwardPlan {
        let e = self.net.topology.num_edges();
        match self.mode {
            SearchMode::DartsFull => ForwardPlan::full_mixed(e),
            _ => ForwardPlan::single_edge(e, sampled.0, sampled.1, sign),
        }
    }

    fn weight_plan(&self, sampled: (CellType, usize), sign: f64) -> ForwardPlan {
        let e = self.net.topology.num_edges();
        match self.mode {
            SearchMode::DartsFull => ForwardPlan::full_mixed(e),
            SearchMode::AlphaMax => ForwardPlan::all_argmax(e),
            SearchMode::Edas | SearchMode::EdasInv => ForwardPlan::single_edge(e, sampled.0, sampled.1, sign),
        }
    }

    /// Architecture-parameter update on a validation batch. Returns the
    /// validation loss. Operation weights are untouched (their gradients
    /// from this pass are discarded by the next weight step).
    pub fn alpha_step(
        &mut self,
        images: &crate::tensor::Tensor<T>,
        labels: &[usize],
        sampled: (CellType, usize),
        sign: f64,
        epoch: usize,
        iter: usize,
    ) -> Result<f64> {
        self.alphas.normal.reset_grad();
        self.alphas.reduce.reset_grad();
        let plan = self.alpha_plan(sampled, sign);
        let mut tape = Tape::new();
        let logits = self.net.forward(&mut tape, images, &self.alphas, &plan, true, &mut self.stats)?;
        let loss = tape.cross_entropy(&logits, labels)?;
        let lv = loss.item().to_f64_lossy();
        if !lv.is_finite() {
            return Err(Error::numeric(format!(
                "validation loss {lv} at epoch {epoch} iteration {iter} (batch index {iter})"
            )));
        }
        tape.backward(&loss)?;
        let warmup_decay = self.mode == SearchMode::EdasInv && epoch < self.config.warmup_epochs;
        let wd = if warmup_decay { self.config.alpha_warmup_weight_decay } else { 0.0 };
        let selection = match self.mode {
            SearchMode::DartsFull => RowSelection::All,
            SearchMode::EdasInv if warmup_decay => RowSelection::All,
            _ => RowSelection::Single(sampled.0, sampled.1),
        };
        if let RowSelection::Single(ct, e) = selection {
            let before = self.alphas.snapshot();
            self.a_opt.step(&self.alphas, selection, wd);
            let after = self.alphas.snapshot();
            let skip = match ct {
                CellType::Normal => e,
                CellType::Reduce => self.net.topology.num_edges() + e,
            };
            for (r, (b, a)) in before.iter().zip(&after).enumerate() {
                if r != skip && b.iter().zip(a).any(|(x, y)| x.to_bits() != y.to_bits()) {
                    self.isolation_violations += 1;
                }
            }
        } else {
            self.a_opt.step(&self.alphas, selection, wd);
        }
        Ok(lv)
    }

    /// Operation-weight update on a training batch. Returns the training
    /// loss. Only weights reached by the forward receive updates; alpha
    /// gradients from this pass are discarded.
    pub fn weight_step(
        &mut self,
        images: &crate::tensor::Tensor<T>,
        labels: &[usize],
        sampled: (CellType, usize),
        sign: f64,
        lr: f64,
        epoch: usize,
        iter: usize,
    ) -> Result<f64> {
        self.w_opt.zero_grads();
        self.alphas.normal.reset_grad();
        self.alphas.reduce.reset_grad();
        let plan = self.weight_plan(sampled, sign);
        let mut tape = Tape::new();
        let logits = self.net.forward(&mut tape, images, &self.alphas, &plan, true, &mut self.stats)?;
        let loss = tape.cross_entropy(&logits, labels)?;
        let lv = loss.item().to_f64_lossy();
        if !lv.is_finite() {
            return Err(Error::numeric(format!(
                "training loss {lv} at epoch {epoch} iteration {iter} (batch index {iter})"
            )));
        }
        tape.backward(&loss)?;
        self.w_opt.step(lr);
        self.alphas.normal.reset_grad();
        self.alphas.reduce.reset_grad();
        Ok(lv)
    }

    /// One bilevel iteration: alpha step on the validation batch, then
    /// weight step on the training batch.
    #[allow(clippy::too_many_arguments)]
    pub fn bilevel_step(
        &mut self,
        train_batch: (&crate::tensor::Tensor<T>, &[usize]),
        val_batch: (&crate::tensor::Tensor<T>, &[usize]),
        sampled: (CellType, usize),
        sign: f64,
        lr: f64,
        epoch: usize,
        iter: usize,
    ) -> Result<(f64, f64)> {
        let val_loss = self.alpha_step(val_batch.0, val_batch.1, sampled, sign, epoch, iter)?;
        let train_loss = self.weight_step(train_batch.0, train_batch.1, sampled, sign, lr, epoch, iter)?;
        Ok((train_loss, val_loss))
    }
}

/// A finished search: the log plus the trained supernet state.
pub struct SearchOutcome<T: Scalar> {
    pub log: SearchLog,
    pub net: OneShotNetwork<T>,
    pub alphas: AlphaTable<T>,
    pub genotype: Genotype,
}

/// Runs the full search stage on a dataset (internally split into disjoint
/// train/validation halves).
pub fn run_search<T: Scalar>(
    config: &SearchConfig,
    mode: SearchMode,
    seed: u64,
    dataset: &LabeledImageSet<T>,
) -> Result<SearchOutcome<T>> {
    config.validate()?;
    let (train, val) = dataset.split_train_val(config.val_fraction, seed)?;
    let iters_per_epoch = train.count() / config.batch_size;
    if iters_per_epoch == 0 {
        return Err(Error::arg(format!(
            "train split of {} samples yields no full batch of {}",
            train.count(),
            config.batch_size
        )));
    }
    let mut run = SearchRun::<T>::new(*config, mode, seed, dataset.classes)?;
    let augment = AugmentConfig::default();
    let mut log = SearchLog {
        mode,
        seed,
        num_edges: run.net.topology.num_edges(),
        iterations: Vec::with_capacity(config.epochs * iters_per_epoch),
        epochs: Vec::with_capacity(config.epochs),
        isolation_violations: 0,
    };

    // Validation batches cycle independently of the training stream.
    let mut val_epoch = 0usize;
    let mut val_iter = batches(&val, config.batch_size, Some(augment), mix(seed, 0x7a1), val_epoch)?;

    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.epochs, config.w_lr_max, config.w_lr_min);
        let mut train_iter = batches(&train, config.batch_size, Some(augment), seed, epoch)?;
        for iter in 0..iters_per_epoch {
            let t0 = Instant::now();
            let (timg, tlab) = train_iter.next().expect("full batch available");
            let (vimg, vlab) = match val_iter.next() {
                Some(b) => b,
                None => {
                    val_epoch += 1;
                    val_iter = batches(&val, config.batch_size, Some(augment), mix(seed, 0x7a1), val_epoch)?;
                    val_iter.next().expect("validation split is non-empty")
                }
            };
            let sampled = run.sample_edge();
            let sign = warmup_sign(mode, config.warmup_policy, config.warmup_epochs, epoch, iter);
            let (train_loss, val_loss) =
                run.bilevel_step((&timg, &tlab), (&vimg, &vlab), sampled, sign, lr, epoch, iter)?;
            log.iterations.push(IterationRecord {
                epoch,
                iter,
                edge: if mode == SearchMode::DartsFull {
                    0
                } else {
                    edge_id(log.num_edges, sampled.0, sampled.1)
                },
                sign: if sign < 0.0 { -1 } else { 1 },
                train_loss,
                val_loss,
                lr,
                op_exec_total: run.stats.candidate_op_execs,
                alpha_wd: run.last_alpha_weight_decay().unwrap_or(0.0),
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
        }

        let alpha = run.alphas.snapshot();
        let top1 = top1_ops(&alpha);
        let genotype = derive_genotype(&run.alphas, &run.net.topology);
        let eval_now = epoch % config.derived_eval_every == 0 || epoch + 1 == config.epochs;
        let (derived_shared_acc, argmax_acc, mixed_acc) = if eval_now {
            let e = run.net.topology.num_edges();
            let plan = ForwardPlan::from_genotype(&genotype, &run.net.topology)?;
            let d = plan_accuracy(&mut run.net, &run.alphas, &plan, &val, config.batch_size)?;
            let a = plan_accuracy(&mut run.net, &run.alphas, &ForwardPlan::all_argmax(e), &val, config.batch_size)?;
            let m = plan_accuracy(&mut run.net, &run.alphas, &ForwardPlan::full_mixed(e), &val, config.batch_size)?;
            (Some(d), Some(a), Some(m))
        } else {
            (None, None, None)
        };
        log.epochs.push(EpochRecord { epoch, alpha, top1, genotype, derived_shared_acc, argmax_acc, mixed_acc });
    }

    log.isolation_violations = run.isolation_violations;
    let genotype = log.epochs.last().unwrap().genotype.clone();
    Ok(SearchOutcome { log, net: run.net, alphas: run.alphas, genotype })
}
