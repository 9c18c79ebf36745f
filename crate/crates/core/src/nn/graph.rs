use super::kernels::{self, ConvGeometry};
use super::{NnError, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum BatchNormMode<'a> {
    /// Normalise with batch statistics.
    Train { eps: f64 },
    /// Normalise with accumulated running statistics.
    Eval { running_mean: &'a [f64], running_var: &'a [f64], eps: f64 },
}

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Linear { x: Var, w: Var, b: Var },
    Softmax(Var),
    FocalLoss { probs: Var, targets: Vec<usize>, gamma: f64, alpha: Vec<f64> },
    Sum(Var),
    WeightedSum { x: Var, weights: Tensor },
    ClassScore { x: Var, class: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::BatchNorm { .. } => "batch_norm3d",
            Op::Relu(_) => "relu",
            Op::AvgPool2(_) => "avg_pool3d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Concat(_) => "concat",
            Op::Linear { .. } => "linear",
            Op::Softmax(_) => "softmax",
            Op::FocalLoss { .. } => "focal_loss",
            Op::Sum(_) => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::ClassScore { .. } => "class_score",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape. Nodes are recorded in execution order, which is also a
/// topological order for the reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` if the loss does not depend on it (or it was not retained).
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`; exact zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn check(op: &'static str, t: &Tensor) -> Result<(), NnError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NnError::NonFinite { op, phase: "forward" })
    }
}

fn shape_err(op: &'static str, detail: String) -> NnError {
    NnError::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    /// Records a constant or parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, NnError> {
        check(op.name(), &value)?;
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Conv3d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu(x) | Op::AvgPool2(x) | Op::GlobalAvgPool(x) | Op::Softmax(x) | Op::Sum(x) => vec![*x],
            Op::Concat(xs) => xs.clone(),
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::FocalLoss { probs, .. } => vec![*probs],
            Op::WeightedSum { x, .. } | Op::ClassScore { x, .. } => vec![*x],
        }
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var, NnError> {
        let [n, ci, h, wd, d] = self.value(x).dims5("conv3d")?;
        let [co, wci, k0, k1, k2] = self.value(w).dims5("conv3d")?;
        if wci != ci {
            return Err(shape_err("conv3d", format!("input has {ci} channels, weight expects {wci}")));
        }
        if k0 != k1 || k1 != k2 {
            return Err(shape_err("conv3d", format!("kernel must be cubic, got {k0}x{k1}x{k2}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [co] {
                return Err(shape_err("conv3d", format!("bias shape {:?} for {co} outputs", self.value(b).shape())));
            }
        }
        let geom = ConvGeometry {
            batch: n,
            in_channels: ci,
            out_channels: co,
            input: [h, wd, d],
            kernel: k0,
            stride,
            padding,
        };
        let out = geom
            .output()
            .ok_or_else(|| shape_err("conv3d", format!("kernel {k0} does not fit input {h}x{wd}x{d}")))?;
        let y = kernels::conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![n, co, out[0], out[1], out[2]], y)?;
        self.push(value, Op::Conv3d { x, w, b, geom })
    }

    /// Batch normalisation over `(N, H, W, D)` per channel. In training mode the
    /// batch statistics are returned so the caller can update running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>), NnError> {
        let xv = self.value(x);
        let [n, c, h, w, d] = xv.dims5("batch_norm3d")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err("batch_norm3d", format!("affine parameters must have {c} channels")));
        }
        let s = h * w * d;
        let count = n * s;
        let data = xv.data();
        let (mean, var, eps, train) = match mode {
            BatchNormMode::Train { eps } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..n {
                        acc += data[(b * c + ch) * s..(b * c + ch + 1) * s].iter().sum::<f64>();
                    }
                    let m = acc / count as f64;
                    let mut sq = 0.0;
                    for b in 0..n {
                        sq += data[(b * c + ch) * s..(b * c + ch + 1) * s].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count as f64;
                }
                (mean, var, eps, true)
            }
            BatchNormMode::Eval { running_mean, running_var, eps } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(shape_err("batch_norm3d", "running statistics length".into()));
                }
                (running_mean.to_vec(), running_var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut y = vec![0.0; data.len()];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * s..(b * c + ch + 1) * s;
                let (m, is, gg, bb) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                for (o, v) in y[range.clone()].iter_mut().zip(&data[range]) {
                    *o = gg * ((v - m) * is) + bb;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w, d], y)?;
        let stats = train.then(|| BatchStats { mean: mean.clone(), var, count });
        let var_out = self.push(value, Op::BatchNorm { x, gamma, beta, mean, inv_std, train })?;
        Ok((var_out, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        let y = xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(xv.shape().to_vec(), y)?;
        self.push(value, Op::Relu(x))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, NnError> {
        let [n, c, h, w, d] = self.value(x).dims5("avg_pool3d")?;
        if h < 2 || w < 2 || d < 2 {
            return Err(shape_err("avg_pool3d", format!("spatial dims {h}x{w}x{d} smaller than the 2x2x2 window")));
        }
        let y = kernels::avg_pool2_forward(self.value(x).data(), n * c, [h, w, d]);
        let [ho, wo, dout] = kernels::pool2_output([h, w, d]);
        let value = Tensor::new(vec![n, c, ho, wo, dout], y)?;
        self.push(value, Op::AvgPool2(x))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        let shape = xv.shape();
        if shape.len() < 3 {
            return Err(shape_err("global_avg_pool", format!("need spatial dims, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let y = xv.data().chunks_exact(s).map(|p| p.iter().sum::<f64>() / s as f64).collect();
        let value = Tensor::new(vec![n, c], y)?;
        self.push(value, Op::GlobalAvgPool(x))
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, NnError> {
        let first = self.value(xs[0]).shape().to_vec();
        let n = first[0];
        let rest = &first[2..];
        let mut channels = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s[0] != n || &s[2..] != rest {
                return Err(shape_err("concat", format!("{:?} vs {:?}", s, first)));
            }
            channels += s[1];
        }
        let inner: usize = rest.iter().product();
        let mut y = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for &x in xs {
                let v = self.value(x);
                let c = v.shape()[1];
                y.extend_from_slice(&v.data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let value = Tensor::new(shape, y)?;
        self.push(value, Op::Concat(xs.to_vec()))
    }

    /// `x (N, F)` times `w (K, F)` transposed, plus `b (K)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let [n, f] = self.value(x).dims2("linear")?;
        let [k, wf] = self.value(w).dims2("linear")?;
        if wf != f || self.value(b).shape() != [k] {
            return Err(shape_err("linear", format!("input features {f}, weight {k}x{wf}")));
        }
        let mut y = vec![0.0; n * k];
        for i in 0..n {
            let xi = &self.value(x).data()[i * f..(i + 1) * f];
            for j in 0..k {
                let wj = &self.value(w).data()[j * f..(j + 1) * f];
                y[i * k + j] = xi.iter().zip(wj).map(|(a, b)| a * b).sum::<f64>() + self.value(b).data()[j];
            }
        }
        let value = Tensor::new(vec![n, k], y)?;
        self.push(value, Op::Linear { x, w, b })
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, NnError> {
        let [n, k] = self.value(x).dims2("softmax")?;
        let value = Tensor::new(vec![n, k], softmax_rows(self.value(x).data(), k))?;
        self.push(value, Op::Softmax(x))
    }

    /// Mean over the batch of `-alpha_y (1 - p_y)^gamma ln p_y`, with `p` clamped
    /// to `[1e-7, 1 - 1e-7]`.
    pub fn focal_loss(&mut self, probs: Var, targets: &[usize], gamma: f64, alpha: &[f64]) -> Result<Var, NnError> {
        let [n, k] = self.value(probs).dims2("focal_loss")?;
        if targets.len() != n || alpha.len() != k {
            return Err(shape_err("focal_loss", format!("{n} rows, {} targets, {} alphas", targets.len(), alpha.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(NnError::TargetOutOfRange { target: t, classes: k });
        }
        let p = self.value(probs).data();
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let py = p[i * k + t].clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
                -alpha[t] * (1.0 - py).powf(gamma) * py.ln()
            })
            .sum();
        let value = Tensor::scalar(total / n as f64);
        self.push(value, Op::FocalLoss { probs, targets: targets.to_vec(), gamma, alpha: alpha.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NnError> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x))
    }

    /// `sum(x * weights)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var, NnError> {
        if weights.shape() != self.value(x).shape() {
            return Err(shape_err("weighted_sum", format!("{:?} vs {:?}", weights.shape(), self.value(x).shape())));
        }
        let v = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(v), Op::WeightedSum { x, weights })
    }

    /// Sum over the batch of column `class` of an `(N, K)` tensor.
    pub fn class_score(&mut self, x: Var, class: usize) -> Result<Var, NnError> {
        let [n, k] = self.value(x).dims2("class_score")?;
        if class >= k {
            return Err(NnError::TargetOutOfRange { target: class, classes: k });
        }
        let v = (0..n).map(|i| self.value(x).data()[i * k + class]).sum();
        self.push(Tensor::scalar(v), Op::ClassScore { x, class })
    }

    /// Reverse sweep from a scalar `loss`. Gradients are kept for leaves that
    /// require them and for every var in `retain`; other intermediates are freed.
    pub fn backward_retaining(&self, loss: Var, retain: &[Var]) -> Result<Gradients, NnError> {
        let lv = self.value(loss);
        if lv.numel() != 1 || !lv.is_finite() {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut keep = vec![false; self.nodes.len()];
        for v in retain {
            keep[v.0] = true;
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            let name = node.op.name();
            let contributions = self.node_backward(node, &gout)?;
            for (var, g) in contributions {
                if !g.is_finite() {
                    return Err(NnError::NonFinite { op: name, phase: "backward" });
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            if matches!(node.op, Op::Leaf) || keep[i] {
                grads[i] = Some(gout);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        self.backward_retaining(loss, &[])
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node, gout: &Tensor) -> Result<Vec<(Var, Tensor)>, NnError> {
        let mut out = Vec::new();
        let g = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, geom } => {
                let need_bias = b.is_some_and(|b| self.wants(b));
                let (dx, dw, db) = kernels::conv3d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    self.wants(*x),
                    need_bias,
                );
                if let Some(dx) = dx {
                    out.push((*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?));
                }
                if self.wants(*w) {
                    out.push((*w, Tensor::new(self.value(*w).shape().to_vec(), dw)?));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, Tensor::new(vec![db.len()], db)?));
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
                let xv = self.value(*x);
                let [n, c, h, w, d] = xv.dims5("batch_norm3d")?;
                let s = h * w * d;
                let m = (n * s) as f64;
                let xd = xv.data();
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    for b in 0..n {
                        let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                        for (gy, xv) in g[r.clone()].iter().zip(&xd[r]) {
                            dbeta[ch] += gy;
                            dgamma[ch] += gy * (xv - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; xd.len()];
                    for ch in 0..c {
                        let scale = gm[ch] * inv_std[ch];
                        for b in 0..n {
                            let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                            for ((o, gy), xv) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xd[r]) {
                                *o = if *train {
                                    let xhat = (xv - mean[ch]) * inv_std[ch];
                                    scale / m * (m * gy - dbeta[ch] - xhat * dgamma[ch])
                                } else {
                                    scale * gy
                                };
                            }
                        }
                    }
                    out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, Tensor::new(vec![c], dgamma)?));
                }
                if self.wants(*beta) {
                    out.push((*beta, Tensor::new(vec![c], dbeta)?));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let dx = xv.data().iter().zip(g).map(|(&v, &gy)| if v > 0.0 { gy } else { 0.0 }).collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            Op::AvgPool2(x) => {
                let [n, c, h, w, d] = self.value(*x).dims5("avg_pool3d")?;
                let dx = kernels::avg_pool2_backward(g, n * c, [h, w, d]);
                out.push((*x, Tensor::new(vec![n, c, h, w, d], dx)?));
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let s: usize = xv.shape()[2..].iter().product();
                let mut dx = vec![0.0; xv.numel()];
                for (p, chunk) in dx.chunks_exact_mut(s).enumerate() {
                    chunk.fill(g[p] / s as f64);
                }
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            Op::Concat(xs) => {
                let shape = gout.shape();
                let (n, total_c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let mut offset = 0;
                for &x in xs {
                    let xs_shape = self.value(x).shape().to_vec();
                    let c = xs_shape[1];
                    if self.wants(x) {
                        let mut dx = Vec::with_capacity(n * c * inner);
                        for b in 0..n {
                            let start = (b * total_c + offset) * inner;
                            dx.extend_from_slice(&g[start..start + c * inner]);
                        }
                        out.push((x, Tensor::new(xs_shape, dx)?));
                    }
                    offset += c;
                }
            }
            Op::Linear { x, w, b } => {
                let [n, f] = self.value(*x).dims2("linear")?;
                let k = self.value(*w).shape()[0];
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * f];
                    for i in 0..n {
                        for j in 0..k {
                            let gy = g[i * k + j];
                            for q in 0..f {
                                dx[i * f + q] += gy * wd[j * f + q];
                            }
                        }
                    }
                    out.push((*x, Tensor::new(vec![n, f], dx)?));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; k * f];
                    for j in 0..k {
                        for i in 0..n {
                            let gy = g[i * k + j];
                            for q in 0..f {
                                dw[j * f + q] += gy * xd[i * f + q];
                            }
                        }
                    }
                    out.push((*w, Tensor::new(vec![k, f], dw)?));
                }
                if self.wants(*b) {
                    let db = (0..k).map(|j| (0..n).map(|i| g[i * k + j]).sum()).collect();
                    out.push((*b, Tensor::new(vec![k], db)?));
                }
            }
            Op::Softmax(x) => {
                let k = gout.shape()[1];
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_exact_mut(k).zip(y.chunks_exact(k)).zip(g.chunks_exact(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                out.push((*x, Tensor::new(gout.shape().to_vec(), dx)?));
            }
            Op::FocalLoss { probs, targets, gamma, alpha } => {
                let pv = self.value(*probs);
                let [n, k] = pv.dims2("focal_loss")?;
                let mut dp = vec![0.0; n * k];
                let scale = g[0] / n as f64;
                for (i, &t) in targets.iter().enumerate() {
                    let raw = pv.data()[i * k + t];
                    if !(FOCAL_CLAMP..=1.0 - FOCAL_CLAMP).contains(&raw) {
                        continue;
                    }
                    let q = 1.0 - raw;
                    let d = if *gamma == 0.0 {
                        -1.0 / raw
                    } else {
                        gamma * q.powf(gamma - 1.0) * raw.ln() - q.powf(*gamma) / raw
                    };
                    dp[i * k + t] = scale * alpha[t] * d;
                }
                out.push((*probs, Tensor::new(vec![n, k], dp)?));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(self.value(*x).shape(), g[0])));
            }
            Op::WeightedSum { x, weights } => {
                let dx = weights.data().iter().map(|w| w * g[0]).collect();
                out.push((*x, Tensor::new(weights.shape().to_vec(), dx)?));
            }
            Op::ClassScore { x, class } => {
                let [n, k] = self.value(*x).dims2("class_score")?;
                let mut dx = vec![0.0; n * k];
                for i in 0..n {
                    dx[i * k + class] = g[0];
                }
                out.push((*x, Tensor::new(vec![n, k], dx)?));
            }
        }
        Ok(out)
    }
}

/// Probability clamp used by the focal loss.
pub const FOCAL_CLAMP: f64 = 1e-7;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (o, row) in out.chunks_exact_mut(k).zip(logits.chunks_exact(k)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - max).exp();
            total += *ov;
        }
        o.iter_mut().for_each(|v| *v /= total);
    }
    out
}
