//! The Wengert tape: records one node per differentiable op during the
//! forward pass and replays them in reverse.

use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};
use crate::tensor::kernels::{self, Window};
use crate::tensor::{GradFlow, Tensor};

/// Convolution hyperparameters. Weight layout is OIHW with I = C/groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn plain(stride: usize, padding: usize) -> Self {
        ConvSpec { stride, padding, dilation: 1, groups: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Per-channel running statistics owned by a batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        BnStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

struct Node<T> {
    out: Tensor<T>,
    back: Box<dyn Fn(&mut GradFlow<T>, &[T])>,
}

/// Define-by-run recording context. Build one per forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    enabled: bool,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), enabled: true, check_finite: false }
    }

    /// A tape that records nothing; use for evaluation-only forwards.
    pub fn no_grad() -> Self {
        Tape { nodes: Vec::new(), enabled: false, check_finite: false }
    }

    /// Scan every op output for NaN/Inf and fail fast. Off by default: the
    /// training loop checks the (scalar) loss instead.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn recording(&self, inputs: &[&Tensor<T>]) -> bool {
        self.enabled && inputs.iter().any(|t| t.tracked())
    }

    fn guard(&self, vals: &[T], op: &str) -> Result<()> {
        if self.check_finite && vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite value produced by {op}")));
        }
        Ok(())
    }

    fn emit(
        &mut self,
        rec: bool,
        shape: Vec<usize>,
        vals: Vec<T>,
        back: impl Fn(&mut GradFlow<T>, &[T]) + 'static,
    ) -> Tensor<T> {
        if rec {
            let out = Tensor::from_op(shape, vals);
            self.nodes.push(Node { out: out.clone(), back: Box::new(back) });
            out
        } else {
            Tensor::from_vec(shape, vals).expect("op produced inconsistent shape")
        }
    }

    /// Propagates gradients from a scalar loss back through every recorded
    /// node. Repeated calls accumulate into leaf gradients; reset is explicit
    /// via [`Tensor::reset_grad`].
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::arg(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut flow = GradFlow::new();
        flow.seed(loss);
        for node in self.nodes.iter().rev() {
            if let Some(dy) = flow.take(&node.out) {
                (node.back)(&mut flow, &dy);
            }
        }
        Ok(())
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::dim(format!("add: shape {:?} vs {:?}", a.shape(), b.shape())));
        }
        let rec = self.recording(&[a, b]);
        let av = a.values();
        let bv = b.values();
        let vals: Vec<T> = av.iter().zip(bv.iter()).map(|(&x, &y)| x + y).collect();
        drop((av, bv));
        self.guard(&vals, "add")?;
        let (ac, bc) = (a.clone(), b.clone());
        Ok(self.emit(rec, a.shape().to_vec(), vals, move |flow, dy| {
            flow.accum(&ac, |g| {
                for (gi, &d) in g.iter_mut().zip(dy) {
                    *gi += d;
                }
            });
            flow.accum(&bc, |g| {
                for (gi, &d) in g.iter_mut().zip(dy) {
                    *gi += d;
                }
            });
        }))
    }

    /// Elementwise sum of any number of same-shaped tensors (one node).
    pub fn add_n(&mut self, xs: &[Tensor<T>]) -> Result<Tensor<T>> {
        if xs.is_empty() {
            return Err(Error::arg("add_n of zero tensors"));
        }
        let shape = xs[0].shape().to_vec();
        for x in xs {
            if x.shape() != shape {
                return Err(Error::dim(format!("add_n: shape {:?} vs {:?}", x.shape(), shape)));
            }
        }
        let refs: Vec<&Tensor<T>> = xs.iter().collect();
        let rec = self.recording(&refs);
        let mut vals = xs[0].to_vec();
        for x in &xs[1..] {
            let xv = x.values();
            for (v, &u) in vals.iter_mut().zip(xv.iter()) {
                *v += u;
            }
        }
        self.guard(&vals, "add_n")?;
        let handles: Vec<Tensor<T>> = xs.to_vec();
        Ok(self.emit(rec, shape, vals, move |flow, dy| {
            for x in &handles {
                flow.accum(x, |g| {
                    for (gi, &d) in g.iter_mut().zip(dy) {
                        *gi += d;
                    }
                });
            }
        }))
    }

    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::dim(format!("mul: shape {:?} vs {:?}", a.shape(), b.shape())));
        }
        let rec = self.recording(&[a, b]);
        let av = a.values();
        let bv = b.values();
        let vals: Vec<T> = av.iter().zip(bv.iter()).map(|(&x, &y)| x * y).collect();
        drop((av, bv));
        self.guard(&vals, "mul")?;
        let (ac, bc) = (a.clone(), b.clone());
        Ok(self.emit(rec, a.shape().to_vec(), vals, move |flow, dy| {
            {
                let bv = bc.values();
                flow.accum(&ac, |g| {
                    for i in 0..g.len() {
                        g[i] = dy[i].mul_add(bv[i], g[i]);
                    }
                });
            }
            let av = ac.values();
            flow.accum(&bc, |g| {
                for i in 0..g.len() {
                    g[i] = dy[i].mul_add(av[i], g[i]);
                }
            });
        }))
    }

    pub fn scale(&mut self, a: &Tensor<T>, s: T) -> Result<Tensor<T>> {
        let rec = self.recording(&[a]);
        let vals: Vec<T> = a.values().iter().map(|&x| x * s).collect();
        self.guard(&vals, "scale")?;
        let ac = a.clone();
        Ok(self.emit(rec, a.shape().to_vec(), vals, move |flow, dy| {
            flow.accum(&ac, |g| {
                for i in 0..g.len() {
                    g[i] = s.mul_add(dy[i], g[i]);
                }
            });
        }))
    }

    pub fn relu(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let rec = self.recording(&[a]);
        let vals: Vec<T> = a.values().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let ac = a.clone();
        Ok(self.emit(rec, a.shape().to_vec(), vals, move |flow, dy| {
            let xv = ac.values();
            flow.accum(&ac, |g| {
                for i in 0..g.len() {
                    if xv[i] > T::zero() {
                        g[i] += dy[i];
                    }
                }
            });
        }))
    }

    pub fn sum_all(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let rec = self.recording(&[a]);
        let total = kernels::sum(&a.values());
        let ac = a.clone();
        Ok(self.emit(rec, vec![1], vec![total], move |flow, dy| {
            let d = dy[0];
            flow.accum(&ac, |g| {
                for gi in g.iter_mut() {
                    *gi += d;
                }
            });
        }))
    }

    // ── Convolution and pooling ──────────────────────────────────────

    pub fn conv2d(&mut self, x: &Tensor<T>, w: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
        let (n, c, h, wd) = x.dims4()?;
        let (o, ig, kh, kw) = w.dims4()?;
        if spec.stride < 1 || spec.dilation < 1 || spec.groups < 1 {
            return Err(Error::arg(format!("conv2d: invalid spec {spec:?}")));
        }
        if c % spec.groups != 0 || o % spec.groups != 0 {
            return Err(Error::dim(format!(
                "conv2d: channels {c} / out {o} not divisible by groups {}",
                spec.groups
            )));
        }
        if ig != c / spec.groups {
            return Err(Error::dim(format!(
                "conv2d: weight expects {ig} input channels per group, input has {}",
                c / spec.groups
            )));
        }
        let oh = kernels::conv_out_dim(h, kh, spec.stride, spec.padding, spec.dilation)
            .ok_or_else(|| Error::dim(format!("conv2d: {kh}x{kw} window does not fit {h}x{wd}")))?;
        let ow = kernels::conv_out_dim(wd, kw, spec.stride, spec.padding, spec.dilation)
            .ok_or_else(|| Error::dim(format!("conv2d: {kh}x{kw} window does not fit {h}x{wd}")))?;
        let win = Window {
            in_h: h,
            in_w: wd,
            kh,
            kw,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
            out_h: oh,
            out_w: ow,
        };
        let groups = spec.groups;
        let (cg, og) = (c / groups, o / groups);
        let ckk = cg * kh * kw;
        let ohw = oh * ow;

        // Three strategies: 1x1/stride-1 convs are bare GEMMs, depthwise
        // convs run a direct sliding kernel, everything else goes through
        // im2col. The first two carry nearly all of the search FLOPs.
        let pointwise = kh == 1 && kw == 1 && spec.stride == 1 && spec.padding == 0;
        let depthwise = !pointwise && groups == c && og == 1;

        let mut vals = vec![T::zero(); n * o * ohw];
        {
            let xv = x.values();
            let wv = w.values();
            if pointwise {
                kernels::conv1x1_fwd(&xv, &wv, &mut vals, n, c, o, ohw, groups);
            } else if depthwise {
                kernels::depthwise_fwd(&xv, &wv, &mut vals, n, c, &win);
            } else {
                let mut col = vec![T::zero(); ckk * ohw];
                for ni in 0..n {
                    for g in 0..groups {
                        let xblk = &xv[(ni * c + g * cg) * h * wd..(ni * c + (g + 1) * cg) * h * wd];
                        kernels::im2col(xblk, cg, &win, &mut col);
                        let wblk = &wv[g * og * ckk..(g + 1) * og * ckk];
                        let oblk = &mut vals[(ni * o + g * og) * ohw..(ni * o + (g + 1) * og) * ohw];
                        kernels::gemm_accum(wblk, &col, oblk, og, ckk, ohw);
                    }
                }
            }
        }
        self.guard(&vals, "conv2d")?;

        let rec = self.recording(&[x, w]);
        let (xc, wc) = (x.clone(), w.clone());
        Ok(self.emit(rec, vec![n, o, oh, ow], vals, move |flow, dy| {
            {
                let wv = wc.values();
                flow.accum(&xc, |dx| {
                    if pointwise {
                        kernels::conv1x1_bwd_dx(&wv, dy, dx, n, c, o, ohw, groups);
                    } else if depthwise {
                        kernels::depthwise_bwd_dx(&wv, dy, dx, n, c, &win);
                    } else {
                        // dX = col2im(W^T . dY), per sample per group.
                        let mut dcol = vec![T::zero(); ckk * ohw];
                        for ni in 0..n {
                            for g in 0..groups {
                                for v in dcol.iter_mut() {
                                    *v = T::zero();
                                }
                                let dyblk =
                                    &dy[(ni * o + g * og) * ohw..(ni * o + (g + 1) * og) * ohw];
                                let wblk = &wv[g * og * ckk..(g + 1) * og * ckk];
                                for i in 0..ckk {
                                    let row = &mut dcol[i * ohw..(i + 1) * ohw];
                                    for oi in 0..og {
                                        let a = wblk[oi * ckk + i];
                                        let dyrow = &dyblk[oi * ohw..(oi + 1) * ohw];
                                        for j in 0..ohw {
                                            row[j] = a.mul_add(dyrow[j], row[j]);
                                        }
                                    }
                                }
                                let dxblk = &mut dx
                                    [(ni * c + g * cg) * h * wd..(ni * c + (g + 1) * cg) * h * wd];
                                kernels::col2im_add(&dcol, cg, &win, dxblk);
                            }
                        }
                    }
                });
            }
            let xv = xc.values();
            flow.accum(&wc, |dw| {
                if pointwise {
                    kernels::conv1x1_bwd_dw(&xv, dy, dw, n, c, o, ohw, groups);
                } else if depthwise {
                    kernels::depthwise_bwd_dw(&xv, dy, dw, n, c, &win);
                } else {
                    // dW[o, i] = sum_n <dY[n, o], col_n[i]>.
                    let mut col = vec![T::zero(); ckk * ohw];
                    for ni in 0..n {
                        for g in 0..groups {
                            let xblk =
                                &xv[(ni * c + g * cg) * h * wd..(ni * c + (g + 1) * cg) * h * wd];
                            kernels::im2col(xblk, cg, &win, &mut col);
                            let dyblk = &dy[(ni * o + g * og) * ohw..(ni * o + (g + 1) * og) * ohw];
                            for oi in 0..og {
                                let dyrow = &dyblk[oi * ohw..(oi + 1) * ohw];
                                let wrow = &mut dw[(g * og + oi) * ckk..(g * og + oi + 1) * ckk];
                                for i in 0..ckk {
                                    wrow[i] += kernels::dot(dyrow, &col[i * ohw..(i + 1) * ohw]);
                                }
                            }
                        }
                    }
                }
            });
        }))
    }

    pub fn pool2d(
        &mut self,
        x: &Tensor<T>,
        kind: PoolKind,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if kernel < 1 || stride < 1 {
            return Err(Error::arg("pool2d: kernel and stride must be >= 1"));
        }
        let oh = kernels::conv_out_dim(h, kernel, stride, padding, 1)
            .ok_or_else(|| Error::dim(format!("pool2d: {kernel}x{kernel} window does not fit {h}x{w}")))?;
        let ow = kernels::conv_out_dim(w, kernel, stride, padding, 1)
            .ok_or_else(|| Error::dim(format!("pool2d: {kernel}x{kernel} window does not fit {h}x{w}")))?;
        let rec = self.recording(&[x]);
        let planes = n * c;
        let mut vals = vec![T::zero(); planes * oh * ow];
        // Max pooling keeps the flat input offset of each selected cell;
        // ties resolve to the first cell in scan order.
        let mut argmax: Vec<u32> = if matches!(kind, PoolKind::Max) && rec {
            vec![u32::MAX; planes * oh * ow]
        } else {
            Vec::new()
        };
        {
            let xv = x.values();
            for p in 0..planes {
                let plane = &xv[p * h * w..(p + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let oidx = (p * oh + oy) * ow + ox;
                        match kind {
                            PoolKind::Max => {
                                let mut best = T::neg_infinity();
                                let mut best_at = u32::MAX;
                                for ky in 0..kernel {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kernel {
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let v = plane[iy as usize * w + ix as usize];
                                        if v > best {
                                            best = v;
                                            best_at = (p * h * w + iy as usize * w + ix as usize) as u32;
                                        }
                                    }
                                }
                                vals[oidx] = if best_at == u32::MAX { T::zero() } else { best };
                                if !argmax.is_empty() {
                                    argmax[oidx] = best_at;
                                }
                            }
                            PoolKind::Avg => {
                                let mut acc = T::zero();
                                let mut count = 0usize;
                                for ky in 0..kernel {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kernel {
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc += plane[iy as usize * w + ix as usize];
                                        count += 1;
                                    }
                                }
                                // Divisor excludes padded cells.
                                vals[oidx] = if count == 0 { T::zero() } else { acc / sc(count as f64) };
                            }
                        }
                    }
                }
            }
        }
        self.guard(&vals, "pool2d")?;
        let xc = x.clone();
        Ok(self.emit(rec, vec![n, c, oh, ow], vals, move |flow, dy| match kind {
            PoolKind::Max => {
                flow.accum(&xc, |dx| {
                    for (oidx, &at) in argmax.iter().enumerate() {
                        if at != u32::MAX {
                            dx[at as usize] += dy[oidx];
                        }
                    }
                });
            }
            PoolKind::Avg => {
                flow.accum(&xc, |dx| {
                    for p in 0..planes {
                        let dplane = &mut dx[p * h * w..(p + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let d = dy[(p * oh + oy) * ow + ox];
                                let mut count = 0usize;
                                for ky in 0..kernel {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kernel {
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if ix >= 0 && (ix as usize) < w {
                                            count += 1;
                                        }
                                    }
                                }
                                if count == 0 {
                                    continue;
                                }
                                let scaled = d / sc(count as f64);
                                for ky in 0..kernel {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kernel {
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        if ix >= 0 && (ix as usize) < w {
                                            dplane[iy as usize * w + ix as usize] += scaled;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }))
    }

    // ── Normalization ────────────────────────────────────────────────

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running: &mut BnStats<T>,
        momentum: f64,
        eps: f64,
        train: bool,
    ) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if gamma.numel() != c || beta.numel() != c || running.mean.len() != c || running.var.len() != c {
            return Err(Error::dim(format!(
                "batch_norm: channel mismatch (input C={c}, gamma {}, beta {})",
                gamma.numel(),
                beta.numel()
            )));
        }
        let m = n * h * w;
        let rec = self.recording(&[x, gamma, beta]);
        let plane = h * w;
        let mut vals = vec![T::zero(); n * c * plane];

        let (mu, istd) = {
            let xv = x.values();
            let gv = gamma.values();
            let bv = beta.values();
            let mut mu = vec![T::zero(); c];
            let mut istd = vec![T::zero(); c];
            if train {
                for ci in 0..c {
                    let mut acc = T::zero();
                    for ni in 0..n {
                        acc += kernels::sum(&xv[(ni * c + ci) * plane..(ni * c + ci + 1) * plane]);
                    }
                    mu[ci] = acc / sc(m as f64);
                }
                for ci in 0..c {
                    let mut acc = T::zero();
                    for ni in 0..n {
                        let blk = &xv[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                        for &v in blk {
                            let d = v - mu[ci];
                            acc = d.mul_add(d, acc);
                        }
                    }
                    let var = acc / sc(m as f64);
                    istd[ci] = T::one() / (var + sc(eps)).sqrt();
                    // Running stats use the unbiased variance.
                    let unbiased = if m > 1 { var * sc(m as f64 / (m as f64 - 1.0)) } else { var };
                    let mom = sc::<T>(momentum);
                    running.mean[ci] = (T::one() - mom) * running.mean[ci] + mom * mu[ci];
                    running.var[ci] = (T::one() - mom) * running.var[ci] + mom * unbiased;
                }
            } else {
                for ci in 0..c {
                    mu[ci] = running.mean[ci];
                    istd[ci] = T::one() / (running.var[ci] + sc(eps)).sqrt();
                }
            }
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let (g, b, mc, ic) = (gv[ci], bv[ci], mu[ci], istd[ci]);
                    let scale = g * ic;
                    for j in 0..plane {
                        vals[base + j] = scale.mul_add(xv[base + j] - mc, b);
                    }
                }
            }
            (mu, istd)
        };
        self.guard(&vals, "batch_norm")?;

        let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
        Ok(self.emit(rec, vec![n, c, h, w], vals, move |flow, dy| {
            let xv = xc.values();
            let gv = gc.values();
            // Per-channel reductions of dy and dy*xhat.
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dyx = vec![T::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let (mc, ic) = (mu[ci], istd[ci]);
                    let mut sdy = T::zero();
                    let mut sdyx = T::zero();
                    for j in 0..plane {
                        let d = dy[base + j];
                        sdy += d;
                        sdyx = d.mul_add((xv[base + j] - mc) * ic, sdyx);
                    }
                    sum_dy[ci] += sdy;
                    sum_dyx[ci] += sdyx;
                }
            }
            flow.accum(&gc, |g| {
                for ci in 0..c {
                    g[ci] += sum_dyx[ci];
                }
            });
            flow.accum(&bc, |g| {
                for ci in 0..c {
                    g[ci] += sum_dy[ci];
                }
            });
            flow.accum(&xc, |dx| {
                let minv = T::one() / sc(m as f64);
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let (mc, ic) = (mu[ci], istd[ci]);
                        let gs = gv[ci] * ic;
                        if train {
                            let mean_dy = sum_dy[ci] * minv;
                            let mean_dyx = sum_dyx[ci] * minv;
                            for j in 0..plane {
                                let xhat = (xv[base + j] - mc) * ic;
                                let term = dy[base + j] - mean_dy - xhat * mean_dyx;
                                dx[base + j] = gs.mul_add(term, dx[base + j]);
                            }
                        } else {
                            for j in 0..plane {
                                dx[base + j] = gs.mul_add(dy[base + j], dx[base + j]);
                            }
                        }
                    }
                }
            });
        }))
    }

    // ── Shape manipulation ───────────────────────────────────────────

    pub fn concat_channels(&mut self, xs: &[Tensor<T>]) -> Result<Tensor<T>> {
        if xs.is_empty() {
            return Err(Error::arg("concat_channels of zero tensors"));
        }
        let (n, _, h, w) = xs[0].dims4()?;
        let mut cs = Vec::with_capacity(xs.len());
        for x in xs {
            let (xn, xc, xh, xw) = x.dims4()?;
            if xn != n || xh != h || xw != w {
                return Err(Error::dim(format!(
                    "concat_channels: mismatched N/H/W {:?} vs {:?}",
                    x.shape(),
                    xs[0].shape()
                )));
            }
            cs.push(xc);
        }
        let ctot: usize = cs.iter().sum();
        let refs: Vec<&Tensor<T>> = xs.iter().collect();
        let rec = self.recording(&refs);
        let plane = h * w;
        let mut vals = vec![T::zero(); n * ctot * plane];
        {
            let mut coff = 0;
            for (x, &cx) in xs.iter().zip(&cs) {
                let xv = x.values();
                for ni in 0..n {
                    let src = &xv[ni * cx * plane..(ni + 1) * cx * plane];
                    let dst = &mut vals[(ni * ctot + coff) * plane..(ni * ctot + coff + cx) * plane];
                    dst.copy_from_slice(src);
                }
                coff += cx;
            }
        }
        let handles: Vec<Tensor<T>> = xs.to_vec();
        Ok(self.emit(rec, vec![n, ctot, h, w], vals, move |flow, dy| {
            let mut coff = 0;
            for (x, &cx) in handles.iter().zip(&cs) {
                flow.accum(x, |dx| {
                    for ni in 0..n {
                        let src = &dy[(ni * ctot + coff) * plane..(ni * ctot + coff + cx) * plane];
                        let dst = &mut dx[ni * cx * plane..(ni + 1) * cx * plane];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
                coff += cx;
            }
        }))
    }

    /// Drops `dy`/`dx` rows/columns from the top-left; used by the offset
    /// path of the factorized reduce.
    pub fn crop_tl(&mut self, x: &Tensor<T>, dy_off: usize, dx_off: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if dy_off >= h || dx_off >= w {
            return Err(Error::dim(format!("crop_tl: offset ({dy_off},{dx_off}) exceeds {h}x{w}")));
        }
        let (nh, nw) = (h - dy_off, w - dx_off);
        let rec = self.recording(&[x]);
        let mut vals = vec![T::zero(); n * c * nh * nw];
        {
            let xv = x.values();
            for p in 0..n * c {
                for y in 0..nh {
                    let src = &xv[p * h * w + (y + dy_off) * w + dx_off..][..nw];
                    let dst = &mut vals[p * nh * nw + y * nw..][..nw];
                    dst.copy_from_slice(src);
                }
            }
        }
        let xc = x.clone();
        Ok(self.emit(rec, vec![n, c, nh, nw], vals, move |flow, dy| {
            flow.accum(&xc, |dx| {
                for p in 0..n * c {
                    for y in 0..nh {
                        let src = &dy[p * nh * nw + y * nw..][..nw];
                        let dst = &mut dx[p * h * w + (y + dy_off) * w + dx_off..][..nw];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            });
        }))
    }

    /// Extracts row `r` of a 2-d tensor as a vector; gradients scatter back
    /// into that row only.
    pub fn row(&mut self, x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        let [rows, cols] = shape.as_slice() else {
            return Err(Error::dim(format!("row: expected 2-d tensor, got {shape:?}")));
        };
        let (rows, cols) = (*rows, *cols);
        if r >= rows {
            return Err(Error::arg(format!("row {r} out of range 0..{rows}")));
        }
        let rec = self.recording(&[x]);
        let vals = x.values()[r * cols..(r + 1) * cols].to_vec();
        let xc = x.clone();
        Ok(self.emit(rec, vec![cols], vals, move |flow, dy| {
            flow.accum(&xc, |dx| {
                for (d, &s) in dx[r * cols..(r + 1) * cols].iter_mut().zip(dy) {
                    *d += s;
                }
            });
        }))
    }

    // ── Heads and losses ─────────────────────────────────────────────

    pub fn global_avg_pool(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        let plane = h * w;
        let rec = self.recording(&[x]);
        let mut vals = vec![T::zero(); n * c];
        {
            let xv = x.values();
            for p in 0..n * c {
                vals[p] = kernels::sum(&xv[p * plane..(p + 1) * plane]) / sc(plane as f64);
            }
        }
        let xc = x.clone();
        Ok(self.emit(rec, vec![n, c], vals, move |flow, dy| {
            flow.accum(&xc, |dx| {
                let inv = T::one() / sc(plane as f64);
                for p in 0..n * c {
                    let d = dy[p] * inv;
                    for v in dx[p * plane..(p + 1) * plane].iter_mut() {
                        *v += d;
                    }
                }
            });
        }))
    }

    /// Fully connected layer: x (N,C) * w (K,C)^T + b (K) -> (N,K).
    pub fn linear(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let &[n, c] = x.shape() else {
            return Err(Error::dim(format!("linear: expected 2-d input, got {:?}", x.shape())));
        };
        let &[k, wc] = w.shape() else {
            return Err(Error::dim(format!("linear: expected 2-d weight, got {:?}", w.shape())));
        };
        if wc != c || b.numel() != k {
            return Err(Error::dim(format!(
                "linear: input C={c}, weight ({k},{wc}), bias {}",
                b.numel()
            )));
        }
        let rec = self.recording(&[x, w, b]);
        let mut vals = vec![T::zero(); n * k];
        {
            let xv = x.values();
            let wv = w.values();
            let bv = b.values();
            for ni in 0..n {
                let xrow = &xv[ni * c..(ni + 1) * c];
                for ki in 0..k {
                    vals[ni * k + ki] = kernels::dot(xrow, &wv[ki * c..(ki + 1) * c]) + bv[ki];
                }
            }
        }
        self.guard(&vals, "linear")?;
        let (xc, wc2, bc) = (x.clone(), w.clone(), b.clone());
        Ok(self.emit(rec, vec![n, k], vals, move |flow, dy| {
            {
                let wv = wc2.values();
                flow.accum(&xc, |dx| {
                    for ni in 0..n {
                        let drow = &mut dx[ni * c..(ni + 1) * c];
                        for ki in 0..k {
                            let d = dy[ni * k + ki];
                            let wrow = &wv[ki * c..(ki + 1) * c];
                            for j in 0..c {
                                drow[j] = d.mul_add(wrow[j], drow[j]);
                            }
                        }
                    }
                });
            }
            let xv = xc.values();
            flow.accum(&wc2, |dw| {
                for ni in 0..n {
                    let xrow = &xv[ni * c..(ni + 1) * c];
                    for ki in 0..k {
                        let d = dy[ni * k + ki];
                        let wrow = &mut dw[ki * c..(ki + 1) * c];
                        for j in 0..c {
                            wrow[j] = d.mul_add(xrow[j], wrow[j]);
                        }
                    }
                }
            });
            flow.accum(&bc, |db| {
                for ni in 0..n {
                    for ki in 0..k {
                        db[ki] += dy[ni * k + ki];
                    }
                }
            });
        }))
    }

    /// Numerically stable softmax over a rank-1 tensor.
    pub fn softmax_1d(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 1 {
            return Err(Error::arg(format!("softmax_1d: expected vector, got {:?}", x.shape())));
        }
        let rec = self.recording(&[x]);
        let xv = x.to_vec();
        let mut mx = T::neg_infinity();
        for &v in &xv {
            if v > mx {
                mx = v;
            }
        }
        let mut vals: Vec<T> = xv.iter().map(|&v| (v - mx).exp()).collect();
        let total = kernels::sum(&vals);
        for v in vals.iter_mut() {
            *v /= total;
        }
        self.guard(&vals, "softmax")?;
        let xc = x.clone();
        let s = vals.clone();
        Ok(self.emit(rec, x.shape().to_vec(), vals, move |flow, dy| {
            let mut inner = T::zero();
            for i in 0..s.len() {
                inner = dy[i].mul_add(s[i], inner);
            }
            flow.accum(&xc, |dx| {
                for i in 0..s.len() {
                    dx[i] = s[i].mul_add(dy[i] - inner, dx[i]);
                }
            });
        }))
    }

    /// Mean over the batch of -log softmax(logits)[label].
    pub fn cross_entropy(&mut self, logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        let &[n, k] = logits.shape() else {
            return Err(Error::dim(format!("cross_entropy: expected (N,K) logits, got {:?}", logits.shape())));
        };
        if labels.len() != n {
            return Err(Error::dim(format!("cross_entropy: {n} rows vs {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::arg(format!("cross_entropy: label {bad} out of range 0..{k}")));
        }
        let rec = self.recording(&[logits]);
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        {
            let lv = logits.values();
            for ni in 0..n {
                let rowv = &lv[ni * k..(ni + 1) * k];
                let mut mx = T::neg_infinity();
                for &v in rowv {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut z = T::zero();
                for (j, &v) in rowv.iter().enumerate() {
                    let e = (v - mx).exp();
                    probs[ni * k + j] = e;
                    z += e;
                }
                for j in 0..k {
                    probs[ni * k + j] /= z;
                }
                loss += z.ln() + mx - rowv[labels[ni]];
            }
        }
        loss /= sc(n as f64);
        self.guard(std::slice::from_ref(&loss), "cross_entropy")?;
        let lc = logits.clone();
        let labels = labels.to_vec();
        Ok(self.emit(rec, vec![1], vec![loss], move |flow, dy| {
            let d = dy[0] / sc(n as f64);
            flow.accum(&lc, |dl| {
                for ni in 0..n {
                    for j in 0..k {
                        dl[ni * k + j] = d.mul_add(probs[ni * k + j], dl[ni * k + j]);
                    }
                    dl[ni * k + labels[ni]] -= d;
                }
            });
        }))
    }

    /// out = sum_i weights[i] * xs[i]; differentiable in both the inputs and
    /// the weight vector. This is the mixing node of a relaxed edge.
    pub fn weighted_sum(&mut self, xs: &[Tensor<T>], weights: &Tensor<T>) -> Result<Tensor<T>> {
        if xs.is_empty() {
            return Err(Error::arg("weighted_sum of zero tensors"));
        }
        if weights.numel() != xs.len() {
            return Err(Error::dim(format!(
                "weighted_sum: {} tensors vs {} weights",
                xs.len(),
                weights.numel()
            )));
        }
        let shape = xs[0].shape().to_vec();
        for x in xs {
            if x.shape() != shape {
                return Err(Error::dim(format!("weighted_sum: shape {:?} vs {shape:?}", x.shape())));
            }
        }
        let mut refs: Vec<&Tensor<T>> = xs.iter().collect();
        refs.push(weights);
        let rec = self.recording(&refs);
        let wv = weights.to_vec();
        let numel = xs[0].numel();
        let mut vals = vec![T::zero(); numel];
        for (x, &wi) in xs.iter().zip(&wv) {
            let xv = x.values();
            for j in 0..numel {
                vals[j] = wi.mul_add(xv[j], vals[j]);
            }
        }
        self.guard(&vals, "weighted_sum")?;
        let handles: Vec<Tensor<T>> = xs.to_vec();
        let wc = weights.clone();
        Ok(self.emit(rec, shape, vals, move |flow, dy| {
            for (i, x) in handles.iter().enumerate() {
                let wi = wv[i];
                flow.accum(x, |dx| {
                    for j in 0..dx.len() {
                        dx[j] = wi.mul_add(dy[j], dx[j]);
                    }
                });
            }
            flow.accum(&wc, |dw| {
                for (i, x) in handles.iter().enumerate() {
                    let xv = x.values();
                    dw[i] += kernels::dot(dy, &xv);
                }
            });
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, v: Vec<f64>) -> Tensor<f64> {
        Tensor::param(shape, v).unwrap()
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::new();
        let x = t64(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]);
        let loss = tape.sum_all(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn sum_of_squares_backward_is_2x() {
        let mut tape = Tape::new();
        let x = t64(vec![3], vec![1.0, -2.0, 0.5]);
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = t64(vec![2], vec![3.0, 4.0]);
        let loss = tape.sum_all(&x).unwrap();
        tape.backward(&loss).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn unreachable_tensor_keeps_no_grad() {
        let mut tape = Tape::new();
        let x = t64(vec![2], vec![1.0, 2.0]);
        let y = t64(vec![2], vec![5.0, 6.0]);
        let _unused = tape.scale(&y, 2.0).unwrap();
        let loss = tape.sum_all(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert!(x.grad().is_some());
        assert!(y.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = t64(vec![2], vec![1.0, 2.0]);
        let y = tape.relu(&x).unwrap();
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_vec(vec![2], vec![-1.0, 2.0]).unwrap();
        let y = tape.relu(&x).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 2.0]);
    }

    #[test]
    fn conv_shape_example() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::zeros(vec![2, 3, 8, 8]);
        let w = Tensor::zeros(vec![4, 3, 3, 3]);
        let y = tape.conv2d(&x, &w, ConvSpec::plain(1, 1)).unwrap();
        assert_eq!(y.shape(), &[2, 4, 8, 8]);
    }

    #[test]
    fn depthwise_identity_conv() {
        // 1x1 depthwise conv with all-one weights passes the input through.
        let mut tape = Tape::<f64>::new();
        let vals: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| i as f64 * 0.25 - 3.0).collect();
        let x = Tensor::from_vec(vec![2, 3, 4, 4], vals.clone()).unwrap();
        let w = Tensor::from_vec(vec![3, 1, 1, 1], vec![1.0; 3]).unwrap();
        let spec = ConvSpec { stride: 1, padding: 0, dilation: 1, groups: 3 };
        let y = tape.conv2d(&x, &w, spec).unwrap();
        assert_eq!(y.to_vec(), vals);
    }

    #[test]
    fn conv_group_mismatch_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::zeros(vec![1, 3, 4, 4]);
        let w = Tensor::zeros(vec![4, 3, 3, 3]);
        let spec = ConvSpec { stride: 1, padding: 1, dilation: 1, groups: 2 };
        assert!(tape.conv2d(&x, &w, spec).is_err());
    }

    #[test]
    fn max_pool_quadrants() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_vec(vec![1, 1, 4, 4], (1..=16).map(|v| v as f64).collect()).unwrap();
        let y = tape.pool2d(&x, PoolKind::Max, 2, 2, 0).unwrap();
        assert_eq!(y.to_vec(), vec![6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn avg_pool_constant_invariance() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::full(vec![1, 2, 6, 6], 2.5);
        let y = tape.pool2d(&x, PoolKind::Avg, 3, 1, 0).unwrap();
        assert!(y.to_vec().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        // With padding the divisor excludes padded cells, so constants survive.
        let y2 = tape.pool2d(&x, PoolKind::Avg, 3, 1, 1).unwrap();
        assert!(y2.to_vec().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn pool_kernel_too_large_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::zeros(vec![1, 1, 2, 2]);
        assert!(tape.pool2d(&x, PoolKind::Max, 5, 1, 0).is_err());
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = t64(vec![1, 1, 2, 2], vec![1.0, 5.0, 2.0, 3.0]);
        let y = tape.pool2d(&x, PoolKind::Max, 2, 2, 0).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn batch_norm_normalizes_in_train_mode() {
        let mut tape = Tape::<f64>::new();
        let vals: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| (i as f64 * 0.713).sin() * 3.0 + 1.0).collect();
        let x = Tensor::from_vec(vec![2, 3, 4, 4], vals).unwrap();
        let gamma = Tensor::from_vec(vec![3], vec![1.0; 3]).unwrap();
        let beta = Tensor::from_vec(vec![3], vec![0.0; 3]).unwrap();
        let mut stats = BnStats::new(3);
        let y = tape.batch_norm(&x, &gamma, &beta, &mut stats, 0.1, 1e-5, true).unwrap();
        let yv = y.to_vec();
        let m = 2 * 4 * 4;
        for c in 0..3 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for n in 0..2 {
                for j in 0..16 {
                    mean += yv[(n * 3 + c) * 16 + j];
                }
            }
            mean /= m as f64;
            for n in 0..2 {
                for j in 0..16 {
                    let d = yv[(n * 3 + c) * 16 + j] - mean;
                    var += d * d;
                }
            }
            var /= m as f64;
            assert!(mean.abs() < 1e-10, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
        }
    }

    #[test]
    fn batch_norm_constant_input_gives_beta() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::full(vec![2, 2, 3, 3], 7.0);
        let gamma = Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
        let beta = Tensor::from_vec(vec![2], vec![0.25, -0.5]).unwrap();
        let mut stats = BnStats::new(2);
        let y = tape.batch_norm(&x, &gamma, &beta, &mut stats, 0.1, 1e-5, true).unwrap();
        let yv = y.to_vec();
        for n in 0..2 {
            for (c, expect) in [(0usize, 0.25f64), (1, -0.5)] {
                for j in 0..9 {
                    assert!((yv[(n * 2 + c) * 9 + j] - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_vec(vec![8], vec![0.3; 8]).unwrap();
        let s = tape.softmax_1d(&x).unwrap();
        for v in s.to_vec() {
            assert!((v - 0.125).abs() < 1e-12);
        }
        let x2 = Tensor::from_vec(vec![2], vec![0.0, 3.0f64.ln()]).unwrap();
        let s2 = tape.softmax_1d(&x2).unwrap().to_vec();
        assert!((s2[0] - 0.25).abs() < 1e-12);
        assert!((s2[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::<f64>::new();
        let base = vec![0.1, -1.2, 2.4, 0.0, 7.7];
        let a = Tensor::from_vec(vec![5], base.clone()).unwrap();
        let b = Tensor::from_vec(vec![5], base.iter().map(|v| v + 1000.0).collect()).unwrap();
        let sa = tape.softmax_1d(&a).unwrap().to_vec();
        let sb = tape.softmax_1d(&b).unwrap().to_vec();
        let sum: f64 = sa.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (x, y) in sa.iter().zip(&sb) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(sa.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut tape = Tape::<f64>::new();
        let logits = Tensor::from_vec(vec![4, 10], vec![0.7; 40]).unwrap();
        let loss = tape.cross_entropy(&logits, &[0, 3, 9, 5]).unwrap();
        assert!((loss.item() - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_is_tiny() {
        let mut tape = Tape::<f64>::new();
        let mut vals = vec![0.0; 10];
        vals[4] = 30.0;
        let logits = Tensor::from_vec(vec![1, 10], vals).unwrap();
        let loss = tape.cross_entropy(&logits, &[4]).unwrap();
        assert!(loss.item() < 1e-9);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let logits = Tensor::from_vec(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(tape.cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn concat_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = Tensor::zeros(vec![1, 2, 4, 4]);
        let b = Tensor::zeros(vec![1, 3, 4, 4]);
        let y = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(y.shape(), &[1, 5, 4, 4]);
    }

    #[test]
    fn weighted_sum_mixes() {
        let mut tape = Tape::new();
        let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![10.0, 20.0]).unwrap();
        let w = t64(vec![2], vec![0.25, 0.75]);
        let y = tape.weighted_sum(&[a, b], &w).unwrap();
        assert_eq!(y.to_vec(), vec![7.75, 15.5]);
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![3.0, 30.0]);
    }

    #[test]
    fn finite_check_catches_inf() {
        let mut tape = Tape::<f64>::new();
        tape.set_check_finite(true);
        let x = Tensor::from_vec(vec![2], vec![1e308, 1e308]).unwrap();
        let doubled = tape.scale(&x, 2.0);
        assert!(matches!(doubled, Err(Error::Numeric(_))));
    }
}
