use super::interp::ResizePlan;
use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Max,
    Avg,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    TransposeLast2(Var),
    BroadcastTo { x: Var, map: Vec<usize> },
    MatMul(Var, Var),
    Concat { inputs: Vec<Var> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Gather { x: Var, index: Vec<usize> },
    AvgPool { x: Var, k: usize },
    GlobalAvg(Var),
    Resize { x: Var, plan: ResizePlan },
    Bce { pred: Var, target: Var, eps: f64 },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Linear record of a forward computation, replayed in reverse by
/// [`backward`](Tape::backward).
///
/// Nodes are appended after their inputs, so index order is a topological
/// order. A tape built with [`Tape::no_grad`] stores values only.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    grad_enabled: bool,
    consumed: bool,
    kinks: Option<u64>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            consumed: false,
            kinks: None,
            check_finite: false,
        }
    }

    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Panic as soon as any op produces NaN or infinity.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Start hashing every branch decision (ReLU signs, argmax picks, loss
    /// clamps) into a signature; see [`kink_signature`](Self::kink_signature).
    pub fn track_kinks(&mut self) {
        self.kinks = Some(0xcbf2_9ce4_8422_2325);
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    fn mix_kinks(&mut self, words: impl Iterator<Item = u64>) {
        if let Some(h) = self.kinks.as_mut() {
            for w in words {
                *h ^= w;
                *h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded nodes that participate in differentiation.
    pub fn grad_node_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad).count()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            requires_grad: rg,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        if self.check_finite {
            assert!(value.all_finite(), "non-finite value produced at node {}", self.nodes.len());
        }
        let rg = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad: rg,
            op: if rg { op } else { Op::Leaf },
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.shape(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.zip_map(a, b, |x, y| x / y);
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v + k);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so numerical faults surface in the loss.
        let out = self.value(x).map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 });
        if self.kinks.is_some() {
            let signs: Vec<u64> = self.value(x).data().iter().map(|&v| (v > 0.0) as u64).collect();
            self.mix_kinks(signs.into_iter());
        }
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose_last2", &shape, &[0, 0]));
        }
        let out = transpose_last2(self.value(x));
        Ok(self.push(out, Op::TransposeLast2(x), &[x]))
    }

    /// Expands unit extents of `x` to `shape` (ranks must agree).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let compatible = in_shape.len() == shape.len()
            && in_shape.iter().zip(shape).all(|(&i, &o)| i == o || i == 1);
        if !compatible {
            return Err(Error::shape("broadcast_to", &in_shape, shape));
        }
        let map = broadcast_map(&in_shape, shape);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, Op::BroadcastTo { x, map }, &[x]))
    }

    /// Matrix product of `[m,k]·[k,n]`, or batched `[B,m,k]·[B,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = matmul_dims(&sa, &sb).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &va[bi * m * k..(bi + 1) * m * k],
                (k, 1),
                &vb[bi * k * n..(bi + 1) * k * n],
                (n, 1),
                0.0,
                &mut out[bi * m * n..(bi + 1) * m * n],
                (n, 1),
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Stacks tensors along axis 1 in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::Config("concat of zero tensors".into()))?)
            .to_vec();
        if first.len() < 2 {
            return Err(Error::shape("concat_channels", &first, &[0, 0]));
        }
        let mut channels = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::shape("concat_channels", &first, s));
            }
            channels += s[1];
        }
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        let mut data = Vec::with_capacity(outer * channels * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let block = v.shape()[1] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::Concat { inputs: xs.to_vec() }, xs))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Config(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(out, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Cross-correlation of `x:[N,C,H,W]` with `w:[K,C,kh,kw]`. Output
    /// extents follow `(H + 2p - kh) / stride + 1`, rounded down.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c, h, wd) = match xs[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("conv2d", &xs, &ws)),
        };
        let (k, kc, kh, kw) = match ws[..] {
            [k, kc, kh, kw] => (k, kc, kh, kw),
            _ => return Err(Error::shape("conv2d", &xs, &ws)),
        };
        if kc != c {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[k]));
            }
        }
        if stride == 0 || kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {h}x{wd}"
            )));
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let (rows, plane) = (geom.col_rows(), geom.col_cols());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * k * plane];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; rows * plane] };
        for ni in 0..n {
            let xn = &xv[ni * c * h * wd..(ni + 1) * c * h * wd];
            let src: &[f64] = if geom.is_pointwise() {
                xn
            } else {
                kernels::im2col(xn, &geom, &mut cols);
                &cols
            };
            let on = &mut out[ni * k * plane..(ni + 1) * k * plane];
            kernels::gemm(k, rows, plane, wv, (rows, 1), src, (plane, 1), 0.0, on, (plane, 1));
            if let Some(b) = b {
                for (ki, &bias) in self.value(b).data().iter().enumerate() {
                    on[ki * plane..(ki + 1) * plane].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let out = Tensor::from_vec(&[n, k, geom.oh, geom.ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Per-channel normalization of `[N,C,H,W]`. Train mode normalizes with
    /// batch statistics and folds them into `stats` (unbiased variance,
    /// momentum [`BN_MOMENTUM`]); eval mode uses `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        train: bool,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c {
            return Err(Error::shape("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let m = n * h * w;
        if m == 0 {
            return Err(Error::Config("batch_norm over an empty batch".into()));
        }
        if !train && !stats.initialized {
            return Err(Error::UninitializedStats);
        }
        let plane = h * w;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut inv_std = vec![0.0; c];
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ci in 0..c {
            let blocks = (0..n).map(|ni| (ni * c + ci) * plane);
            let (mean, var) = if train {
                let mut s = 0.0;
                for b in blocks.clone() {
                    s += xv[b..b + plane].iter().sum::<f64>();
                }
                let mean = s / m as f64;
                let mut ss = 0.0;
                for b in blocks.clone() {
                    ss += xv[b..b + plane].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                }
                let var = ss / m as f64;
                let unbiased = if m > 1 { ss / (m - 1) as f64 } else { var };
                stats.mean[ci] = (1.0 - BN_MOMENTUM) * stats.mean[ci] + BN_MOMENTUM * mean;
                stats.var[ci] = (1.0 - BN_MOMENTUM) * stats.var[ci] + BN_MOMENTUM * unbiased;
                (mean, var)
            } else {
                (stats.mean[ci], stats.var[ci])
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ci] = is;
            for b in blocks {
                for j in b..b + plane {
                    let xh = (xv[j] - mean) * is;
                    xhat[j] = xh;
                    out[j] = gv[ci] * xh + bv[ci];
                }
            }
        }
        if train {
            stats.initialized = true;
        }
        let out = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, &[x, gamma, beta]))
    }

    /// Square-window max pooling; padded cells never win.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if k == 0 || stride == 0 || pad >= k || k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::Config(format!("max_pool2d k={k} s={stride} p={pad} on {h}x{w}")));
        }
        let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
        let (out, index) = kernels::max_pool(self.value(x).data(), n * c, (h, w), k, stride, pad, (oh, ow));
        self.mix_kinks(index.iter().map(|&i| i as u64));
        let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(out, Op::Gather { x, index }, &[x]))
    }

    /// Non-overlapping `k x k` average pooling; extents must divide by `k`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Config(format!("avg_pool2d window {k} does not divide {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let norm = 1.0 / (k * k) as f64;
        for p in 0..n * c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut s = 0.0;
                    for di in 0..k {
                        let row = p * h * w + (oi * k + di) * w + oj * k;
                        s += xv[row..row + k].iter().sum::<f64>();
                    }
                    out[(p * oh + oi) * ow + oj] = s * norm;
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(out, Op::AvgPool { x, k }, &[x]))
    }

    /// Per-channel spatial max or mean, `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_reduce(&mut self, x: Var, kind: Reduce) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::Config("global_reduce over an empty map".into()));
        }
        let xv = self.value(x).data();
        match kind {
            Reduce::Avg => {
                let out = (0..n * c).map(|p| xv[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64).collect();
                let out = Tensor::from_vec(&[n, c, 1, 1], out)?;
                Ok(self.push(out, Op::GlobalAvg(x), &[x]))
            }
            Reduce::Max => {
                let mut out = Vec::with_capacity(n * c);
                let mut index = Vec::with_capacity(n * c);
                for p in 0..n * c {
                    let mut best = p * plane;
                    for j in p * plane..(p + 1) * plane {
                        if xv[j] > xv[best] || (xv[j].is_nan() && !xv[best].is_nan()) {
                            best = j;
                        }
                    }
                    out.push(xv[best]);
                    index.push(best);
                }
                self.mix_kinks(index.iter().map(|&i| i as u64));
                let out = Tensor::from_vec(&[n, c, 1, 1], out)?;
                Ok(self.push(out, Op::Gather { x, index }, &[x]))
            }
        }
    }

    /// Bilinear resampling to `oh x ow` with half-pixel centers.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h == 0 || w == 0 || oh == 0 || ow == 0 {
            return Err(Error::Config("resize of an empty map".into()));
        }
        let plan = ResizePlan::bilinear(h, w, oh, ow);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            plan.apply(&xv[p * h * w..(p + 1) * h * w], &mut out[p * oh * ow..(p + 1) * oh * ow]);
        }
        let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(out, Op::Resize { x, plan }, &[x]))
    }

    pub fn upsample_bilinear_2x(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        self.resize_bilinear(x, 2 * h, 2 * w)
    }

    /// Mean binary cross-entropy with predictions clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, pred: Var, target: Var, eps: f64) -> Result<Var> {
        self.same_shape("bce", pred, target)?;
        let (p, y) = (self.value(pred).data(), self.value(target).data());
        let n = p.len() as f64;
        let total: f64 = p
            .iter()
            .zip(y)
            .map(|(&p, &y)| {
                let p = p.clamp(eps, 1.0 - eps);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        if self.kinks.is_some() {
            let flags: Vec<u64> = p.iter().map(|&v| (v < eps) as u64 | (((v > 1.0 - eps) as u64) << 1)).collect();
            self.mix_kinks(flags.into_iter());
        }
        Ok(self.push(Tensor::scalar(total / n), Op::Bce { pred, target, eps }, &[pred, target]))
    }

    /// Reverse sweep from a one-element `loss`, seeding d(loss)/d(loss) = 1.
    /// Leaf gradients are then available through [`grad`](Self::grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::NoGradTape);
        }
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let seed = self.value(loss).shape().to_vec();
        if seed.iter().product::<usize>() != 1 {
            return Err(Error::NonScalar(seed));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(&seed));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            let mut acc = Acc {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            backprop(&mut acc, node, g);
        }
        self.grads = grads;
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match (sa, sb) {
        ([m, k], [k2, n]) if k == k2 => Some((1, *m, *k, *n)),
        ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => Some((*b, *m, *k, *n)),
        _ => None,
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = t.len() / (r * c).max(1);
    let src = t.data();
    let mut out = vec![0.0; t.len()];
    for b in 0..batch {
        let off = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[off + j * r + i] = src[off + i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let l = shape.len();
    shape.swap(l - 1, l - 2);
    Tensor::from_vec(&shape, out).expect("transpose preserves length")
}

fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        in_strides[d] = if in_shape[d] == 1 { 0 } else { s };
        s *= in_shape[d];
    }
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(total);
    let mut cur = 0usize;
    for _ in 0..total {
        map.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += in_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= in_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

struct Acc<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Tensor>],
}

impl<'a> Acc<'a> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn value(&self, v: Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn add(&mut self, v: Var, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(g),
        }
    }

    fn add_data(&mut self, v: Var, data: Vec<f64>) {
        let shape = self.value(v).shape().to_vec();
        self.add(v, Tensor::from_vec(&shape, data).expect("gradient shape"));
    }
}

fn backprop(acc: &mut Acc, node: &Node, g: Tensor) {
    let gd = g.data();
    match &node.op {
        Op::Leaf => unreachable!(),
        Op::Add(a, b) => {
            acc.add(*a, g.clone());
            acc.add(*b, g);
        }
        Op::Sub(a, b) => {
            acc.add(*a, g.clone());
            acc.add(*b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if acc.wants(*a) {
                let d = gd.iter().zip(acc.value(*b).data()).map(|(g, y)| g * y).collect();
                acc.add_data(*a, d);
            }
            if acc.wants(*b) {
                let d = gd.iter().zip(acc.value(*a).data()).map(|(g, x)| g * x).collect();
                acc.add_data(*b, d);
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (acc.value(*a).data(), acc.value(*b).data());
            if acc.wants(*a) {
                let d = gd.iter().zip(vb).map(|(g, y)| g / y).collect();
                acc.add_data(*a, d);
            }
            if acc.wants(*b) {
                let d = gd
                    .iter()
                    .zip(va.iter().zip(vb))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                acc.add_data(*b, d);
            }
        }
        Op::Scale(x, k) => acc.add(*x, g.map(|v| v * k)),
        Op::AddScalar(x) => acc.add(*x, g),
        Op::Relu(x) => {
            let d = gd
                .iter()
                .zip(acc.value(*x).data())
                .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                .collect();
            acc.add_data(*x, d);
        }
        Op::Sigmoid(x) => {
            let d = gd
                .iter()
                .zip(node.value.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            acc.add_data(*x, d);
        }
        Op::Sum(x) => {
            let n = acc.value(*x).len();
            acc.add_data(*x, vec![gd[0]; n]);
        }
        Op::Mean(x) => {
            let n = acc.value(*x).len();
            acc.add_data(*x, vec![gd[0] / n as f64; n]);
        }
        Op::Reshape(x) => acc.add_data(*x, g.into_data()),
        Op::TransposeLast2(x) => acc.add(*x, transpose_last2(&g)),
        Op::BroadcastTo { x, map } => {
            let mut d = vec![0.0; acc.value(*x).len()];
            for (&i, &gv) in map.iter().zip(gd) {
                d[i] += gv;
            }
            acc.add_data(*x, d);
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (acc.value(*a).shape(), acc.value(*b).shape());
            let (batch, m, k, n) = matmul_dims(sa, sb).expect("validated in forward");
            if acc.wants(*a) {
                let vb = acc.value(*b).data();
                let mut d = vec![0.0; batch * m * k];
                for bi in 0..batch {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &gd[bi * m * n..(bi + 1) * m * n],
                        (n, 1),
                        &vb[bi * k * n..(bi + 1) * k * n],
                        (1, n),
                        0.0,
                        &mut d[bi * m * k..(bi + 1) * m * k],
                        (k, 1),
                    );
                }
                acc.add_data(*a, d);
            }
            if acc.wants(*b) {
                let va = acc.value(*a).data();
                let mut d = vec![0.0; batch * k * n];
                for bi in 0..batch {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        &va[bi * m * k..(bi + 1) * m * k],
                        (1, k),
                        &gd[bi * m * n..(bi + 1) * m * n],
                        (n, 1),
                        0.0,
                        &mut d[bi * k * n..(bi + 1) * k * n],
                        (n, 1),
                    );
                }
                acc.add_data(*b, d);
            }
        }
        Op::Concat { inputs } => {
            let shape = node.value.shape();
            let outer = shape[0];
            let inner: usize = shape[2..].iter().product();
            let total_block = shape[1] * inner;
            let mut offset = 0;
            for &x in inputs {
                let block = acc.value(x).shape()[1] * inner;
                if acc.wants(x) {
                    let mut d = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let start = o * total_block + offset;
                        d.extend_from_slice(&gd[start..start + block]);
                    }
                    acc.add_data(x, d);
                }
                offset += block;
            }
        }
        Op::Softmax { x, outer, len, inner } => {
            let y = node.value.data();
            let mut d = vec![0.0; y.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..*len).map(|j| gd[at(j)] * y[at(j)]).sum();
                    for j in 0..*len {
                        d[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
            acc.add_data(*x, d);
        }
        Op::Conv2d { x, w, b, geom } => conv2d_backward(acc, *x, *w, *b, geom, gd),
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
            let (n, c, h, w) = acc.value(*x).dims4().expect("4-d");
            let plane = h * w;
            let m = (n * plane) as f64;
            let gamma_v = acc.value(*gamma).data().to_vec();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ci in 0..c {
                for ni in 0..n {
                    let b = (ni * c + ci) * plane;
                    for j in b..b + plane {
                        dbeta[ci] += gd[j];
                        dgamma[ci] += gd[j] * xhat[j];
                    }
                }
            }
            if acc.wants(*x) {
                let mut dx = vec![0.0; gd.len()];
                for ci in 0..c {
                    let scale = gamma_v[ci] * inv_std[ci];
                    for ni in 0..n {
                        let b = (ni * c + ci) * plane;
                        for j in b..b + plane {
                            dx[j] = if *train {
                                scale * (gd[j] - dbeta[ci] / m - xhat[j] * dgamma[ci] / m)
                            } else {
                                scale * gd[j]
                            };
                        }
                    }
                }
                acc.add_data(*x, dx);
            }
            acc.add_data(*gamma, dgamma);
            acc.add_data(*beta, dbeta);
        }
        Op::Gather { x, index } => {
            let mut d = vec![0.0; acc.value(*x).len()];
            for (&i, &gv) in index.iter().zip(gd) {
                d[i] += gv;
            }
            acc.add_data(*x, d);
        }
        Op::AvgPool { x, k } => {
            let (n, c, h, w) = acc.value(*x).dims4().expect("4-d");
            let (oh, ow) = (h / k, w / k);
            let norm = 1.0 / (k * k) as f64;
            let mut d = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                for i in 0..h {
                    for j in 0..w {
                        d[(p * h + i) * w + j] = gd[(p * oh + i / k) * ow + j / k] * norm;
                    }
                }
            }
            acc.add_data(*x, d);
        }
        Op::GlobalAvg(x) => {
            let (n, c, h, w) = acc.value(*x).dims4().expect("4-d");
            let plane = h * w;
            let mut d = vec![0.0; n * c * plane];
            for p in 0..n * c {
                d[p * plane..(p + 1) * plane].fill(gd[p] / plane as f64);
            }
            acc.add_data(*x, d);
        }
        Op::Resize { x, plan } => {
            let (n, c, h, w) = acc.value(*x).dims4().expect("4-d");
            let (oh, ow) = (plan.out_h, plan.out_w);
            let mut d = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                plan.apply_transpose(&gd[p * oh * ow..(p + 1) * oh * ow], &mut d[p * h * w..(p + 1) * h * w]);
            }
            acc.add_data(*x, d);
        }
        Op::Bce { pred, target, eps } => {
            let (p, y) = (acc.value(*pred).data(), acc.value(*target).data());
            let scale = gd[0] / p.len() as f64;
            if acc.wants(*pred) {
                let d = p
                    .iter()
                    .zip(y)
                    .map(|(&p, &y)| {
                        if p < *eps || p > 1.0 - eps {
                            0.0
                        } else {
                            scale * (p - y) / (p * (1.0 - p))
                        }
                    })
                    .collect();
                acc.add_data(*pred, d);
            }
            if acc.wants(*target) {
                let d = p
                    .iter()
                    .map(|&p| {
                        let p = p.clamp(*eps, 1.0 - eps);
                        scale * ((1.0 - p).ln() - p.ln())
                    })
                    .collect();
                acc.add_data(*target, d);
            }
        }
    }
}

fn conv2d_backward(acc: &mut Acc, x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, gd: &[f64]) {
    let n = acc.value(x).shape()[0];
    let k = acc.value(w).shape()[0];
    let (rows, plane) = (geom.col_rows(), geom.col_cols());
    let in_len = geom.c * geom.h * geom.w;
    if let Some(b) = b {
        if acc.wants(b) {
            let mut db = vec![0.0; k];
            for ni in 0..n {
                for (ki, d) in db.iter_mut().enumerate() {
                    let off = (ni * k + ki) * plane;
                    *d += gd[off..off + plane].iter().sum::<f64>();
                }
            }
            acc.add_data(b, db);
        }
    }
    let want_w = acc.wants(w);
    let want_x = acc.wants(x);
    if !want_w && !want_x {
        return;
    }
    let xv = acc.value(x).data();
    let wv = acc.value(w).data();
    let mut dw = if want_w { vec![0.0; k * rows] } else { Vec::new() };
    let mut dx = if want_x { vec![0.0; n * in_len] } else { Vec::new() };
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; rows * plane] };
    let mut dcols = if geom.is_pointwise() || !want_x { Vec::new() } else { vec![0.0; rows * plane] };
    for ni in 0..n {
        let gn = &gd[ni * k * plane..(ni + 1) * k * plane];
        let xn = &xv[ni * in_len..(ni + 1) * in_len];
        if want_w {
            let src: &[f64] = if geom.is_pointwise() {
                xn
            } else {
                kernels::im2col(xn, geom, &mut cols);
                &cols
            };
            kernels::gemm(k, plane, rows, gn, (plane, 1), src, (1, plane), 1.0, &mut dw, (rows, 1));
        }
        if want_x {
            let dxn = &mut dx[ni * in_len..(ni + 1) * in_len];
            if geom.is_pointwise() {
                kernels::gemm(rows, k, plane, wv, (1, rows), gn, (plane, 1), 0.0, dxn, (plane, 1));
            } else {
                kernels::gemm(rows, k, plane, wv, (1, rows), gn, (plane, 1), 0.0, &mut dcols, (plane, 1));
                kernels::col2im(&dcols, geom, dxn);
            }
        }
    }
    if want_w {
        acc.add_data(w, dw);
    }
    if want_x {
        acc.add_data(x, dx);
    }
}
