//! Optimizers: SGD with momentum for operation weights, a per-edge-row Adam
//! for architecture parameters, and the cosine learning-rate schedule.

use crate::candidates::NUM_OPS;
use crate::cell::{AlphaTable, CellType};
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

/// Per-epoch cosine annealing from `lr_max` (epoch 0) to `lr_min` (last
/// epoch), monotone non-increasing.
pub fn cosine_lr(epoch: usize, epochs: usize, lr_max: f64, lr_min: f64) -> f64 {
    if epochs <= 1 {
        return lr_max;
    }
    let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// SGD with momentum and L2 weight decay. A parameter is stepped only when
/// it holds a gradient, so weights unreached by a forward pass (and their
/// momentum state) stay untouched.
pub struct Sgd<T> {
    params: Vec<Tensor<T>>,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: Vec<Tensor<T>>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = vec![None; params.len()];
        Sgd { params, momentum, weight_decay, velocity }
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.reset_grad();
        }
    }

    /// v <- momentum*v + g + wd*w;  w <- w - lr*v. Consumes gradients.
    pub fn step(&mut self, lr: f64) {
        let mu = sc::<T>(self.momentum);
        let wd = sc::<T>(self.weight_decay);
        let lr = sc::<T>(lr);
        for (i, p) in self.params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let mut w = p.values_mut();
            let v = self.velocity[i].get_or_insert_with(|| vec![T::zero(); w.len()]);
            for j in 0..w.len() {
                let g = wd.mul_add(w[j], grad[j]);
                v[j] = mu.mul_add(v[j], g);
                w[j] = w[j] - lr * v[j];
            }
            drop(w);
            p.reset_grad();
        }
    }
}

/// Which alpha rows an optimizer step may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowSelection {
    /// Every row (full relaxation, or warmup weight decay).
    All,
    /// Exactly one (cell type, edge) row.
    Single(CellType, usize),
}

#[derive(Clone, Default)]
struct RowState<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

/// Adam over the alpha tables with lazily advanced per-row state: a row's
/// moments and step count move only when that row is selected, which keeps
/// non-selected rows bitwise unchanged whenever weight decay is zero.
pub struct AlphaAdam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    rows: [Vec<RowState<T>>; 2],
    /// Weight decay applied by the most recent step (instrumentation).
    pub last_weight_decay: Option<f64>,
}

impl<T: Scalar> AlphaAdam<T> {
    pub fn new(num_edges: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        AlphaAdam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            rows: [vec![RowState::default(); num_edges], vec![RowState::default(); num_edges]],
            last_weight_decay: None,
        }
    }

    fn table_index(cell_type: CellType) -> usize {
        match cell_type {
            CellType::Normal => 0,
            CellType::Reduce => 1,
        }
    }

    /// Number of Adam steps a row has taken.
    pub fn row_steps(&self, cell_type: CellType, edge: usize) -> u64 {
        self.rows[Self::table_index(cell_type)][edge].t
    }

    /// Applies one Adam step (with L2 weight decay `wd`) to the selected
    /// rows, consuming the tables' gradients.
    pub fn step(&mut self, alphas: &AlphaTable<T>, selection: RowSelection, wd: f64) {
        self.last_weight_decay = Some(wd);
        for cell_type in CellType::BOTH {
            let table = alphas.table(cell_type);
            let grad = table.grad();
            let edges: Vec<usize> = match selection {
                RowSelection::All => (0..alphas.num_edges()).collect(),
                RowSelection::Single(ct, e) if ct == cell_type => vec![e],
                RowSelection::Single(..) => Vec::new(),
            };
            if edges.is_empty() {
                continue;
            }
            let mut w = table.values_mut();
            let ti = Self::table_index(cell_type);
            let (b1, b2) = (sc::<T>(self.beta1), sc::<T>(self.beta2));
            let wdt = sc::<T>(wd);
            let eps = sc::<T>(self.eps);
            for e in edges {
                let st = &mut self.rows[ti][e];
                if st.m.is_empty() {
                    st.m = vec![T::zero(); NUM_OPS];
                    st.v = vec![T::zero(); NUM_OPS];
                }
                st.t += 1;
                let bc1 = sc::<T>(1.0 - self.beta1.powi(st.t as i32));
                let bc2 = sc::<T>(1.0 - self.beta2.powi(st.t as i32));
                let lr = sc::<T>(self.lr);
                for k in 0..NUM_OPS {
                    let idx = e * NUM_OPS + k;
                    let g0 = grad.as_ref().map_or(T::zero(), |g| g[idx]);
                    let g = wdt.mul_add(w[idx], g0);
                    st.m[k] = b1 * st.m[k] + (T::one() - b1) * g;
                    st.v[k] = b2 * st.v[k] + (T::one() - b2) * g * g;
                    let mhat = st.m[k] / bc1;
                    let vhat = st.v[k] / bc2;
                    w[idx] = w[idx] - lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        alphas.normal.reset_grad();
        alphas.reduce.reset_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::CellTopology;
    use crate::rng::rng_from;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let (mx, mn) = (0.025, 0.001);
        assert!((cosine_lr(0, 25, mx, mn) - mx).abs() < 1e-12);
        assert!((cosine_lr(24, 25, mx, mn) - mn).abs() < 1e-12);
        // Half-way point is the arithmetic mean.
        assert!((cosine_lr(12, 25, mx, mn) - 0.013).abs() < 1e-12);
        // Monotone non-increasing.
        let mut prev = f64::INFINITY;
        for e in 0..25 {
            let lr = cosine_lr(e, 25, mx, mn);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
        assert_eq!(cosine_lr(0, 1, mx, mn), mx);
    }

    #[test]
    fn sgd_skips_gradless_params_entirely() {
        let a = Tensor::<f64>::param(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::param(vec![2], vec![3.0, 4.0]).unwrap();
        let mut opt = Sgd::new(vec![a.clone(), b.clone()], 0.9, 0.0);
        a.seed_grad_ones();
        opt.step(0.1);
        assert_eq!(a.to_vec(), vec![0.9, 1.9]);
        assert_eq!(b.to_vec(), vec![3.0, 4.0]);
        assert!(a.grad().is_none(), "step consumes gradients");
    }

    #[test]
    fn sgd_momentum_matches_hand_rolled() {
        let p = Tensor::<f64>::param(vec![1], vec![1.0]).unwrap();
        let mut opt = Sgd::new(vec![p.clone()], 0.5, 0.0);
        // g = 1 twice: v1 = 1, w = 1 - 0.1; v2 = 0.5 + 1, w = 0.9 - 0.15.
        p.seed_grad_ones();
        opt.step(0.1);
        p.seed_grad_ones();
        opt.step(0.1);
        assert!((p.item() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn alpha_adam_touches_only_selected_row() {
        let topo = CellTopology::default();
        let alphas = AlphaTable::<f64>::new(&topo, 1e-3, &mut rng_from(1));
        let mut opt = AlphaAdam::new(topo.num_edges(), 0.025, 0.5, 0.999);
        // Gradient on every entry; selection restricts the update.
        let before = alphas.snapshot();
        {
            let g = vec![1.0; 14 * NUM_OPS];
            let gr = alphas.normal.values_mut();
            drop(gr);
            alphas.normal.seed_grad_ones();
            let _ = g;
        }
        alphas.reduce.seed_grad_ones();
        opt.step(&alphas, RowSelection::Single(CellType::Normal, 3), 0.0);
        let after = alphas.snapshot();
        for (r, (b, a)) in before.iter().zip(after.iter()).enumerate() {
            if r == 3 {
                assert_ne!(b, a, "selected row must move");
            } else {
                // Bitwise identical.
                let eq = b.iter().zip(a).all(|(x, y)| x.to_bits() == y.to_bits());
                assert!(eq, "row {r} changed without being selected");
            }
        }
        assert_eq!(opt.row_steps(CellType::Normal, 3), 1);
        assert_eq!(opt.row_steps(CellType::Normal, 2), 0);
        assert_eq!(opt.last_weight_decay, Some(0.0));
        assert!(alphas.normal.grad().is_none());
    }

    #[test]
    fn alpha_adam_weight_decay_moves_all_selected_rows() {
        let topo = CellTopology::default();
        let alphas = AlphaTable::<f64>::new(&topo, 1.0, &mut rng_from(2));
        let mut opt = AlphaAdam::new(topo.num_edges(), 0.025, 0.5, 0.999);
        let before = alphas.snapshot();
        // No gradient at all; weight decay alone drives the update.
        opt.step(&alphas, RowSelection::All, 1e-3);
        let after = alphas.snapshot();
        let moved = before
            .iter()
            .flatten()
            .zip(after.iter().flatten())
            .filter(|(b, a)| b.to_bits() != a.to_bits())
            .count();
        assert_eq!(moved, 2 * 14 * NUM_OPS, "decay must touch every entry");
    }
}
