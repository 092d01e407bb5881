use rand::Rng;

use super::kernels::{col2im_add, gemm, im2col, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (divides by the element count).
    pub var: Vec<f64>,
    /// Elements per channel that the statistics were taken over.
    pub count: usize,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Vec<Var>),
    Scale(Var, f64),
    Mean(Var),
    Softmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
    },
    GumbelSoftmax {
        p: Var,
        tau: f64,
        eps: f64,
    },
    StraightThrough(Var),
    Mix {
        h: Var,
        ys: Vec<Var>,
    },
    RowDot {
        h: Var,
        weights: Vec<f64>,
    },
    Hinge {
        x: Var,
        offset: f64,
        scale: f64,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv2d { x, w, b, .. } | Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Relu(x) | GlobalAvgPool(x) | Scale(x, _) | Mean(x) | Softmax(x) | StraightThrough(x) => {
                vec![*x]
            }
            MaxPool { x, .. } | Hinge { x, .. } | Dropout { x, .. } => vec![*x],
            BatchNormTrain { x, gamma, beta, .. } | BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Add(a, b) | Mul(a, b) => vec![*a, *b],
            Sum(xs) => xs.clone(),
            SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            GumbelSoftmax { p, .. } => vec![*p],
            Mix { h, ys } => {
                let mut v = vec![*h];
                v.extend(ys.iter().copied());
                v
            }
            RowDot { h, .. } => vec![*h],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Operators append nodes; [`Graph::backward`] replays them
/// in reverse. Every convolution and fully-connected op adds its
/// multiply-accumulate count to [`Graph::macs`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    macs: u64,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn dim_err(op: &str, msg: impl std::fmt::Display) -> Error {
    Error::Dimension(format!("{op}: {msg}"))
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

    /// Multiply-accumulates executed by conv/linear ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let parents = op.parents();
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        if cfg!(debug_assertions) && parents.iter().all(|p| self.nodes[p.0].value.is_finite()) {
            debug_assert!(value.is_finite(), "non-finite output from finite inputs");
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Direct cross-correlation. Output extents are
    /// `floor((H + 2·pad − kh)/stride) + 1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).dims4()?;
        let [cout, wcin, kh, kw] = self.value(w).dims4()?;
        if wcin != cin {
            return Err(dim_err(
                "conv2d",
                format!("input channel axis (axis 1) is {cin} but weight expects {wcin}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(dim_err(
                    "conv2d",
                    format!("bias shape {:?} does not match {cout} output channels", self.value(b).shape()),
                ));
            }
        }
        let hout = conv_out_extent(h, kh, stride, pad, "height")?;
        let wout = conv_out_extent(wd, kw, stride, pad, "width")?;
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            hout,
            wout,
        };
        let (k, np) = (geom.patch_len(), geom.out_pixels());
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let mut out = vec![0.0; n * cout * np];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![0.0; k * np] };
        for i in 0..n {
            let img = &xin[i * cin * h * wd..(i + 1) * cin * h * wd];
            let patches: &[f64] = if geom.is_pointwise() {
                img
            } else {
                im2col(img, &geom, &mut col);
                &col
            };
            let dst = &mut out[i * cout * np..(i + 1) * cout * np];
            gemm(cout, k, np, wt, (k as isize, 1), patches, (np as isize, 1), dst, 0.0);
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (chunk, bv) in out.chunks_mut(np).zip(bias.iter().cycle()) {
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        self.macs += (n * cout * k * np) as u64;
        let value = Tensor::from_parts(vec![n, cout, hout, wout], out);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }))
    }

    /// `out[n,k] = Σ_d x[n,d]·w[k,d] + b[k]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, d] = self.value(x).dims2()?;
        let [k, wd] = self.value(w).dims2()?;
        if wd != d {
            return Err(dim_err(
                "linear",
                format!("input width {d} does not match weight width {wd}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [k] {
                return Err(dim_err(
                    "linear",
                    format!("bias shape {:?} does not match {k} outputs", self.value(b).shape()),
                ));
            }
        }
        let mut out = vec![0.0; n * k];
        // Row at a time so every sample sees the same reduction order
        // regardless of batch size.
        for i in 0..n {
            gemm(
                1,
                d,
                k,
                &self.value(x).data()[i * d..(i + 1) * d],
                (d as isize, 1),
                self.value(w).data(),
                (1, d as isize),
                &mut out[i * k..(i + 1) * k],
                0.0,
            );
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(k) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        self.macs += (n * d * k) as u64;
        Ok(self.push(Tensor::from_parts(vec![n, k], out), Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > 0.0 || v.is_nan() { v } else { 0.0 }).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(value, Op::Relu(x))
    }

    /// Windowed max with implicit `-inf` padding. Gradient goes to the first
    /// (row-major) maximal element of each window.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if k == 0 || stride == 0 {
            return Err(Error::Config("max_pool2d: window and stride must be positive".into()));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Config(format!(
                "max_pool2d: window {k} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if pad >= k {
            return Err(Error::Config(format!("max_pool2d: padding {pad} must be below window {k}")));
        }
        let hout = (h + 2 * pad - k) / stride + 1;
        let wout = (w + 2 * pad - k) / stride + 1;
        let xin = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * hout * wout);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..n * c {
            let base = plane * h * w;
            for oh in 0..hout {
                for ow in 0..wout {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = usize::MAX;
                    for ki in 0..k {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let at = base + ih as usize * w + iw as usize;
                            if best_at == usize::MAX || xin[at] > best {
                                best = xin[at];
                                best_at = at;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_at);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, hout, wout], out);
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if h == 0 || w == 0 {
            return Err(dim_err("global_avg_pool", "empty spatial extent"));
        }
        let hw = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n, c], data), Op::GlobalAvgPool(x)))
    }

    /// Batch-norm using statistics of `x` itself (training mode).
    ///
    /// Works on `[N,C]` and `[N,C,H,W]`; statistics are per channel over every
    /// other axis.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, spatial) = self.bn_layout(x, gamma, beta)?;
        let count = n * spatial;
        let xin = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let s = &xin[(i * c + ch) * spatial..(i * c + ch + 1) * spatial];
                mean[ch] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for i in 0..n {
            for ch in 0..c {
                let s = &xin[(i * c + ch) * spatial..(i * c + ch + 1) * spatial];
                var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, &mean, &inv_std, n, c, spatial);
        let value = Tensor::from_parts(self.value(x).shape().to_vec(), out);
        let v = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Batch-norm with fixed statistics (evaluation mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, spatial) = self.bn_layout(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(dim_err("batch_norm", "running statistics width mismatch"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, mean, &inv_std, n, c, spatial);
        let value = Tensor::from_parts(self.value(x).shape().to_vec(), out);
        Ok(self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let shape = self.value(x).shape();
        if shape.len() < 2 {
            return Err(dim_err("batch_norm", format!("input rank {} below 2", shape.len())));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial = shape[2..].iter().product();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(dim_err(
                "batch_norm",
                format!("channel axis (axis 1) is {c} but affine parameters do not match"),
            ));
        }
        if n * spatial == 0 {
            return Err(dim_err("batch_norm", "empty batch"));
        }
        Ok((n, c, spatial))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        n: usize,
        c: usize,
        spatial: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let xin = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xin.len()];
        let mut out = vec![0.0; xin.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * spatial..(i * c + ch + 1) * spatial;
                for at in r {
                    let xh = (xin[at] - mean[ch]) * inv_std[ch];
                    xhat[at] = xh;
                    out[at] = g[ch] * xh + b[ch];
                }
            }
        }
        (xhat, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(
                "add",
                format!("shapes {:?} and {:?} differ", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(
                "mul",
                format!("shapes {:?} and {:?} differ", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Elementwise sum of equally shaped values.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Argument("sum of nothing".into()))?;
        let shape = self.value(first).shape().to_vec();
        let mut data = vec![0.0; self.value(first).numel()];
        for &v in xs {
            if self.value(v).shape() != shape.as_slice() {
                return Err(dim_err("sum", "operand shapes differ"));
            }
            data.iter_mut().zip(self.value(v).data()).for_each(|(a, b)| *a += b);
        }
        Ok(self.push(Tensor::from_parts(shape, data), Op::Sum(xs.to_vec())))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(value, Op::Scale(x, c))
    }

    /// Mean of every element, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Row-wise softmax of a `[N,m]` value.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let [n, m] = self.value(x).dims2()?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(m) {
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::Softmax(x)))
    }

    /// Batch mean of `−log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let [n, k] = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(dim_err(
                "softmax_cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!("target class {t} outside [0, {k})")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Gumbel-softmax relaxation `softmax((log(p + eps) + g) / tau)` per row.
    pub fn gumbel_softmax(&mut self, p: Var, noise: &Tensor, tau: f64, eps: f64) -> Result<Var> {
        let [n, m] = self.value(p).dims2()?;
        if noise.shape() != [n, m] {
            return Err(dim_err(
                "gumbel_softmax",
                format!("noise shape {:?} does not match [{n}, {m}]", noise.shape()),
            ));
        }
        if tau.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let mut data: Vec<f64> = self
            .value(p)
            .data()
            .iter()
            .zip(noise.data())
            .map(|(pv, g)| ((pv + eps).ln() + g) / tau)
            .collect();
        for row in data.chunks_mut(m) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(vec![n, m], data);
        Ok(self.push(value, Op::GumbelSoftmax { p, tau, eps }))
    }

    /// Forward value is `hard`; the backward pass routes the incoming gradient
    /// unchanged into `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.value(soft).shape() {
            return Err(dim_err("straight_through", "hard and soft shapes differ"));
        }
        Ok(self.push(hard, Op::StraightThrough(soft)))
    }

    /// `out[n,:] = Σ_j h[n,j]·ys[j][n,:]`.
    pub fn mix(&mut self, h: Var, ys: &[Var]) -> Result<Var> {
        let [n, m] = self.value(h).dims2()?;
        if ys.len() != m {
            return Err(dim_err("mix", format!("{} branches for {m} mixing weights", ys.len())));
        }
        let [yn, k] = self.value(ys[0]).dims2()?;
        if yn != n {
            return Err(dim_err("mix", "branch batch size differs from weights"));
        }
        let mut out = vec![0.0; n * k];
        for (j, &y) in ys.iter().enumerate() {
            if self.value(y).shape() != [n, k] {
                return Err(dim_err("mix", format!("branch {j} has a different shape")));
            }
            let yd = self.value(y).data();
            let hd = self.value(h).data();
            for i in 0..n {
                let hij = hd[i * m + j];
                if hij != 0.0 {
                    for c in 0..k {
                        out[i * k + c] += hij * yd[i * k + c];
                    }
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, k], out), Op::Mix { h, ys: ys.to_vec() }))
    }

    /// `out[n] = Σ_j h[n,j]·weights[j]`.
    pub fn row_dot(&mut self, h: Var, weights: &[f64]) -> Result<Var> {
        let [n, m] = self.value(h).dims2()?;
        if weights.len() != m {
            return Err(dim_err(
                "row_dot",
                format!("{} weights for rows of width {m}", weights.len()),
            ));
        }
        let data = self
            .value(h)
            .data()
            .chunks(m)
            .map(|row| row.iter().zip(weights).map(|(a, b)| a * b).sum())
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![n], data),
            Op::RowDot {
                h,
                weights: weights.to_vec(),
            },
        ))
    }

    /// `max(0, (x − offset)·scale)` elementwise.
    pub fn hinge(&mut self, x: Var, offset: f64, scale: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| ((v - offset) * scale).max(0.0)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(value, Op::Hinge { x, offset, scale })
    }

    /// Inverted dropout. A rate of zero records an identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let t = self.value(x);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rate > 0.0 && rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Gradients of the scalar `loss` with respect to every upstream node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(dim_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, g, grads),
            Op::Linear { x, w, b } => {
                let [n, d] = self.value(*x).dims2().expect("checked in forward");
                let k = self.value(*w).shape()[0];
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * d];
                    gemm(n, k, d, g, (k as isize, 1), self.value(*w).data(), (d as isize, 1), &mut dx, 0.0);
                    accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; k * d];
                    gemm(k, n, d, g, (1, k as isize), self.value(*x).data(), (d as isize, 1), &mut dw, 0.0);
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![0.0; k];
                    for row in g.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    accumulate(grads, b, db);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let dx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(grads, *x, dx);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants(*x) {
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for (&at, gv) in argmax.iter().zip(g) {
                        dx[at] += gv;
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.wants(*x) {
                    let [_, _, h, w] = self.value(*x).dims4().expect("checked in forward");
                    let hw = h * w;
                    let mut dx = Vec::with_capacity(self.value(*x).numel());
                    for gv in g {
                        dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, spatial) = self.bn_layout(*x, *gamma, *beta).expect("checked in forward");
                let (sum_g, sum_gx) = bn_reductions(g, xhat, n, c, spatial);
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let m = (n * spatial) as f64;
                    let mut dx = vec![0.0; g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch] / m;
                            for at in (i * c + ch) * spatial..(i * c + ch + 1) * spatial {
                                dx[at] = scale * (m * g[at] - sum_g[ch] - xhat[at] * sum_gx[ch]);
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                self.bn_affine_grads(*gamma, *beta, sum_gx, sum_g, grads);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, spatial) = self.bn_layout(*x, *gamma, *beta).expect("checked in forward");
                let (sum_g, sum_gx) = bn_reductions(g, xhat, n, c, spatial);
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![0.0; g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            for at in (i * c + ch) * spatial..(i * c + ch + 1) * spatial {
                                dx[at] = g[at] * gam[ch] * inv_std[ch];
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                self.bn_affine_grads(*gamma, *beta, sum_gx, sum_g, grads);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.iter().zip(self.value(*b).data()).map(|(g, v)| g * v).collect();
                    accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = g.iter().zip(self.value(*a).data()).map(|(g, v)| g * v).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Sum(xs) => {
                for &v in xs {
                    if self.wants(v) {
                        accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.iter().map(|v| v * c).collect());
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    accumulate(grads, *x, vec![g[0] / n as f64; n]);
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let s = node.value.data();
                    let m = node.value.shape()[1];
                    accumulate(grads, *x, softmax_vjp(s, g, m));
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                if self.wants(*logits) {
                    let n = targets.len();
                    let k = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        dx[i * k + t] -= scale;
                    }
                    accumulate(grads, *logits, dx);
                }
            }
            Op::GumbelSoftmax { p, tau, eps } => {
                if self.wants(*p) {
                    let s = node.value.data();
                    let m = node.value.shape()[1];
                    let dz = softmax_vjp(s, g, m);
                    let dp = dz
                        .iter()
                        .zip(self.value(*p).data())
                        .map(|(d, pv)| d / (tau * (pv + eps)))
                        .collect();
                    accumulate(grads, *p, dp);
                }
            }
            Op::StraightThrough(soft) => {
                if self.wants(*soft) {
                    accumulate(grads, *soft, g.to_vec());
                }
            }
            Op::Mix { h, ys } => {
                let [n, m] = self.value(*h).dims2().expect("checked in forward");
                let k = g.len() / n;
                let hd = self.value(*h).data();
                if self.wants(*h) {
                    let mut dh = vec![0.0; n * m];
                    for (j, &y) in ys.iter().enumerate() {
                        let yd = self.value(y).data();
                        for i in 0..n {
                            dh[i * m + j] = (0..k).map(|c| g[i * k + c] * yd[i * k + c]).sum();
                        }
                    }
                    accumulate(grads, *h, dh);
                }
                for (j, &y) in ys.iter().enumerate() {
                    if self.wants(y) {
                        let mut dy = vec![0.0; n * k];
                        for i in 0..n {
                            let hij = hd[i * m + j];
                            for c in 0..k {
                                dy[i * k + c] = hij * g[i * k + c];
                            }
                        }
                        accumulate(grads, y, dy);
                    }
                }
            }
            Op::RowDot { h, weights } => {
                if self.wants(*h) {
                    let m = weights.len();
                    let mut dh = Vec::with_capacity(g.len() * m);
                    for gv in g {
                        dh.extend(weights.iter().map(|w| w * gv));
                    }
                    accumulate(grads, *h, dh);
                }
            }
            Op::Hinge { x, offset, scale } => {
                if self.wants(*x) {
                    let dx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(v, gv)| if (v - offset) * scale > 0.0 { gv * scale } else { 0.0 })
                        .collect();
                    accumulate(grads, *x, dx);
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.iter().zip(mask).map(|(a, m)| a * m).collect());
                }
            }
        }
    }

    fn bn_affine_grads(
        &self,
        gamma: Var,
        beta: Var,
        sum_gx: Vec<f64>,
        sum_g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
    ) {
        if self.wants(gamma) {
            accumulate(grads, gamma, sum_gx);
        }
        if self.wants(beta) {
            accumulate(grads, beta, sum_g);
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let n = self.value(x).shape()[0];
        let cout = self.value(w).shape()[0];
        let (k, np) = (geom.patch_len(), geom.out_pixels());
        let img_len = geom.cin * geom.h * geom.w;
        let xin = self.value(x).data();
        let wt = self.value(w).data();
        let (want_x, want_w) = (self.wants(x), self.wants(w));
        let mut dx = if want_x { vec![0.0; xin.len()] } else { Vec::new() };
        let mut dw = if want_w { vec![0.0; wt.len()] } else { Vec::new() };
        let mut col = vec![0.0; k * np];
        for i in 0..n {
            let gout = &g[i * cout * np..(i + 1) * cout * np];
            let img = &xin[i * img_len..(i + 1) * img_len];
            if want_w {
                let patches: &[f64] = if geom.is_pointwise() {
                    img
                } else {
                    im2col(img, geom, &mut col);
                    &col
                };
                // dW += gout · patchesᵀ
                gemm(cout, np, k, gout, (np as isize, 1), patches, (1, np as isize), &mut dw, 1.0);
            }
            if want_x {
                let dimg = &mut dx[i * img_len..(i + 1) * img_len];
                if geom.is_pointwise() {
                    gemm(k, cout, np, wt, (1, k as isize), gout, (np as isize, 1), dimg, 1.0);
                } else {
                    // dpatches = Wᵀ · gout
                    gemm(k, cout, np, wt, (1, k as isize), gout, (np as isize, 1), &mut col, 0.0);
                    col2im_add(&col, geom, dimg);
                }
            }
        }
        if want_x {
            accumulate(grads, x, dx);
        }
        if want_w {
            accumulate(grads, w, dw);
        }
        if let Some(b) = b.filter(|b| self.wants(*b)) {
            let mut db = vec![0.0; cout];
            for (chunk, slot) in g.chunks(np).zip((0..cout).cycle()) {
                db[slot] += chunk.iter().sum::<f64>();
            }
            accumulate(grads, b, db);
        }
    }
}

fn conv_out_extent(len: usize, k: usize, stride: usize, pad: usize, axis: &str) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("conv2d: stride must be positive".into()));
    }
    if k == 0 || len + 2 * pad < k {
        return Err(Error::Config(format!(
            "conv2d: kernel {k} does not fit padded input {axis} {}",
            len + 2 * pad
        )));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

fn bn_reductions(
    g: &[f64],
    xhat: &[f64],
    n: usize,
    c: usize,
    spatial: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            for at in (i * c + ch) * spatial..(i * c + ch + 1) * spatial {
                sum_g[ch] += g[at];
                sum_gx[ch] += g[at] * xhat[at];
            }
        }
    }
    (sum_g, sum_gx)
}

fn softmax_vjp(s: &[f64], g: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; s.len()];
    for ((srow, grow), orow) in s.chunks(m).zip(g.chunks(m)).zip(out.chunks_mut(m)) {
        let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
        for j in 0..m {
            orow[j] = srow[j] * (grow[j] - dot);
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
