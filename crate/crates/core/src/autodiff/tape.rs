//! Wengert tape: every operation appends a node holding its output value and
//! whatever it needs for the reverse pass. One tape per optimization step.

use crate::error::{dim_err, ArlError, Result};
use crate::tensor::{r, Real, Tensor};

use super::kernels::{self, ConvGeom};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every differentiable operation the tape knows about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale,
    Sum,
    Mean,
    Square,
    FullyConnected,
    Conv2d,
    BatchNorm2d,
    Relu,
    Sigmoid,
    MaxPool2x2,
    GlobalAvgPool,
    Softmax,
    LogSoftmax,
    Concat,
    Reshape,
    Gather,
    GroupMean,
    TileSpatial,
    BceWithLogits,
    Pick,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Square,
        OpKind::FullyConnected,
        OpKind::Conv2d,
        OpKind::BatchNorm2d,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::MaxPool2x2,
        OpKind::GlobalAvgPool,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Concat,
        OpKind::Reshape,
        OpKind::Gather,
        OpKind::GroupMean,
        OpKind::TileSpatial,
        OpKind::BceWithLogits,
        OpKind::Pick,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Square => "square",
            OpKind::FullyConnected => "fully_connected",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm2d => "batchnorm2d",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::MaxPool2x2 => "maxpool2x2",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
            OpKind::Gather => "gather",
            OpKind::GroupMean => "group_mean",
            OpKind::TileSpatial => "tile_spatial",
            OpKind::BceWithLogits => "bce_with_logits",
            OpKind::Pick => "pick",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Batch-norm running statistics, owned by the model.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Real> RunningStats<T> {
    /// Mean 0, variance 1: the usual starting point for a freshly built layer.
    pub fn standard(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: true,
        }
    }

    pub fn uninitialized(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// How a batch-norm layer normalizes.
pub enum BnMode<'a, T> {
    /// Batch statistics; running statistics are updated by exponential moving average.
    Train {
        stats: &'a mut RunningStats<T>,
        momentum: T,
    },
    /// Frozen running statistics.
    Eval { stats: &'a RunningStats<T> },
}

pub(crate) enum Op<T> {
    Leaf,
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Square(Var),
    FullyConnected {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    GroupMean {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    TileSpatial {
        x: Var,
        h: usize,
        w: usize,
    },
    BceWithLogits {
        x: Var,
        target: Vec<T>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf | Op::Detach => return None,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Square(_) => OpKind::Square,
            Op::FullyConnected { .. } => OpKind::FullyConnected,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm2d,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::MaxPool { .. } => OpKind::MaxPool2x2,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Gather { .. } => OpKind::Gather,
            Op::GroupMean { .. } => OpKind::GroupMean,
            Op::TileSpatial { .. } => OpKind::TileSpatial,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
            Op::Pick { .. } => OpKind::Pick,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for a single reverse pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            fault: None,
        }
    }

    /// Test fixture: scale the backward rule of `kind` by 1.5 so gradient
    /// checks have something to catch.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf; its gradient is accumulated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    fn binary_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                op,
                format!("operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.map(a, |x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s / r(n as f64)), Op::Mean(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // NaN passes through so a diverged loss stays visible
        let v = self.map(a, |x| if x <= T::zero() { T::zero() } else { x });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// `x[N, in] -> x * w[out, in]^T + b[out]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(dim_err(
                "fully_connected",
                format!("expected x[N,in], w[out,in], b[out]; got {:?}, {:?}, {:?}", xs, ws, bs),
            ));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if ws[1] != din {
            return Err(dim_err(
                "fully_connected",
                format!("input axis 1 has {} features but weight axis 1 has {}", din, ws[1]),
            ));
        }
        if bs[0] != dout {
            return Err(dim_err(
                "fully_connected",
                format!("bias axis 0 has {} but weight axis 0 has {}", bs[0], dout),
            ));
        }
        let y = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            din,
            dout,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, dout], y)?, Op::FullyConnected { x, w, b }, rg))
    }

    /// NCHW convolution with an OIHW kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(dim_err(
                "conv2d",
                format!("expected 4-d input and kernel, got {:?} and {:?}", xs, ws),
            ));
        }
        if xs[1] != ws[1] {
            return Err(dim_err(
                "conv2d",
                format!("input channel axis 1 is {} but kernel axis 1 is {}", xs[1], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(dim_err(
                "conv2d",
                format!("bias shape {:?} does not match kernel axis 0 ({})", bs, ws[0]),
            ));
        }
        if stride == 0 {
            return Err(ArlError::Contract("conv2d stride must be >= 1".into()));
        }
        let (h, wd, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(dim_err(
                "conv2d",
                format!("kernel {}x{} exceeds padded input {}x{} on axes 2/3", kh, kw, h + 2 * pad, wd + 2 * pad),
            ));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h,
            w: wd,
            o: ws[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let y = kernels::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let shape = vec![geom.n, geom.o, geom.ho, geom.wo];
        Ok(self.push(Tensor::new(shape, y)?, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Per-channel batch normalization of an NCHW tensor.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(dim_err("batchnorm2d", format!("expected NCHW input, got {:?}", xs)));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err(
                "batchnorm2d",
                format!(
                    "gamma {:?} / beta {:?} must have length {} (channel axis 1)",
                    self.shape(gamma),
                    self.shape(beta),
                    c
                ),
            ));
        }
        if eps <= T::zero() {
            return Err(ArlError::Contract("batchnorm2d eps must be > 0".into()));
        }
        let xv = self.value(x).data();
        let (mean, var, train) = match &mode {
            BnMode::Train { .. } => {
                let count = r::<T>((n * plane) as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += xv[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied().sum();
                    }
                    let m = s / count;
                    let mut v = T::zero();
                    for b in 0..n {
                        for &val in &xv[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                            v += (val - m) * (val - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / count;
                }
                (mean, var, true)
            }
            BnMode::Eval { stats } => {
                if !stats.initialized {
                    return Err(ArlError::StatsUninitialized(format!("{} channels", c)));
                }
                if stats.channels() != c {
                    return Err(dim_err(
                        "batchnorm2d",
                        format!("running stats hold {} channels, input has {}", stats.channels(), c),
                    ));
                }
                (stats.mean.clone(), stats.var.clone(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for k in off..off + plane {
                    let h = (xv[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    y[k] = g[ch] * h + be[ch];
                }
            }
        }
        if let BnMode::Train { stats, momentum } = mode {
            let m_count = n * plane;
            let unbias = if m_count > 1 {
                r::<T>(m_count as f64 / (m_count - 1) as f64)
            } else {
                T::one()
            };
            if stats.channels() != c {
                return Err(dim_err(
                    "batchnorm2d",
                    format!("running stats hold {} channels, input has {}", stats.channels(), c),
                ));
            }
            for ch in 0..c {
                if stats.initialized {
                    stats.mean[ch] = (T::one() - momentum) * stats.mean[ch] + momentum * mean[ch];
                    stats.var[ch] = (T::one() - momentum) * stats.var[ch] + momentum * var[ch] * unbias;
                } else {
                    stats.mean[ch] = mean[ch];
                    stats.var[ch] = var[ch] * unbias;
                }
            }
            stats.initialized = true;
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(xs, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(dim_err(
                "maxpool2x2",
                format!("need NCHW input with H, W >= 2 on axes 2/3, got {:?}", xs),
            ));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(nc * ho * wo);
        let mut argmax = Vec::with_capacity(nc * ho * wo);
        for p in 0..nc {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let k = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[k] > xv[best] || (xv[k].is_nan() && !xv[best].is_nan()) {
                            best = k;
                        }
                    }
                    y.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![xs[0], xs[1], ho, wo], y)?,
            Op::MaxPool { x, argmax },
            rg,
        ))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(dim_err("global_avg_pool", format!("expected NCHW, got {:?}", xs)));
        }
        let plane = xs[2] * xs[3];
        let inv = r::<T>(1.0 / plane as f64);
        let y = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![xs[0], xs[1]], y)?, Op::GlobalAvgPool(x), rg))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(dim_err(
                op,
                format!("axis {} out of range for shape {:?}", axis, self.shape(x)),
            ));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let v = self.value(x);
        let y = kernels::softmax_forward(v.data(), v.shape(), axis, false);
        let shape = v.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, y)?, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let v = self.value(x);
        let y = kernels::softmax_forward(v.data(), v.shape(), axis, true);
        let shape = v.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, y)?, Op::LogSoftmax { x, axis }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| ArlError::Contract("concat of zero tensors".into()))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() {
                return Err(dim_err(
                    "concat",
                    format!("rank mismatch: {:?} vs {:?}", base, s),
                ));
            }
            for (d, (&a, &b)) in base.iter().zip(s).enumerate() {
                if d != axis && a != b {
                    return Err(dim_err(
                        "concat",
                        format!("axis {} differs ({} vs {}) outside concat axis {}", d, a, b, axis),
                    ));
                }
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Flatten everything after axis 0.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Select slices along axis 0 (repeats allowed).
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(dim_err("gather", "cannot gather from a scalar"));
        }
        let row: usize = s[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= s[0] {
                return Err(dim_err(
                    "gather",
                    format!("index {} out of range for axis 0 of length {}", i, s[0]),
                ));
            }
            out.extend_from_slice(&xv[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Mean of groups of axis-0 slices. Each element is summed in ascending
    /// value order, so the result does not depend on member order.
    pub fn group_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(dim_err("group_mean", "cannot pool a scalar"));
        }
        let row: usize = s[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(groups.len() * row);
        let mut scratch = Vec::new();
        for g in groups {
            if g.is_empty() {
                return Err(ArlError::Contract("group_mean with an empty group".into()));
            }
            if let Some(&bad) = g.iter().find(|&&i| i >= s[0]) {
                return Err(dim_err(
                    "group_mean",
                    format!("index {} out of range for axis 0 of length {}", bad, s[0]),
                ));
            }
            let inv = r::<T>(1.0 / g.len() as f64);
            for k in 0..row {
                scratch.clear();
                scratch.extend(g.iter().map(|&i| xv[i * row + k]));
                scratch.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                let total: T = scratch.iter().copied().sum();
                out.push(total * inv);
            }
        }
        let mut shape = s;
        shape[0] = groups.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::GroupMean {
                x,
                groups: groups.to_vec(),
            },
            rg,
        ))
    }

    /// `[N, C] -> [N, C, h, w]` by repeating each value over the plane.
    pub fn tile_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(dim_err("tile_spatial", format!("expected [N, C], got {:?}", s)));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(s[0] * s[1] * plane);
        for &v in self.value(x).data() {
            out.extend(std::iter::repeat(v).take(plane));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![s[0], s[1], h, w], out)?,
            Op::TileSpatial { x, h, w },
            rg,
        ))
    }

    /// Elementwise binary cross-entropy against fixed 0/1 (or soft) targets.
    pub fn bce_with_logits(&mut self, x: Var, target: &[T]) -> Result<Var> {
        if self.value(x).len() != target.len() {
            return Err(dim_err(
                "bce_with_logits",
                format!("{} logits vs {} targets", self.value(x).len(), target.len()),
            ));
        }
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .zip(target)
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln())
            .collect();
        let y = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(
            y,
            Op::BceWithLogits {
                x,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// `x[N, C], idx[N] -> [N]` with `out[n] = x[n, idx[n]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(dim_err(
                "pick",
                format!("expected [{}, C] input, got {:?}", idx.len(), s),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[1]) {
            return Err(dim_err(
                "pick",
                format!("class index {} out of range for axis 1 of length {}", bad, s[1]),
            ));
        }
        let xv = self.value(x).data();
        let out = idx.iter().enumerate().map(|(n, &i)| xv[n * s[1] + i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![s[0]], out)?,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar. Leaf gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(ArlError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let (Some(f), Some(k)) = (self.fault, node.op.kind()) {
                if f == k {
                    let s = r::<T>(1.5);
                    g.iter_mut().for_each(|x| *x *= s);
                }
            }
            let nodes = &self.nodes;
            let mut send = |v: Var, grad: Vec<T>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(grad),
                }
            };
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => {
                    match &mut self.leaf_grads[i] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
                Op::Detach => {}
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|&x| -x).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect();
                    let gb = g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect();
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Scale(a, s) => send(*a, g.iter().map(|&x| x * *s).collect()),
                Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
                Op::Mean(a) => {
                    let n = val(*a).len();
                    send(*a, vec![g[0] / r::<T>(n as f64); n]);
                }
                Op::Square(a) => {
                    let two = r::<T>(2.0);
                    send(*a, g.iter().zip(val(*a)).map(|(&x, &y)| two * x * y).collect());
                }
                Op::Relu(a) => send(
                    *a,
                    g.iter()
                        .zip(val(*a))
                        .map(|(&x, &y)| if y > T::zero() { x } else { T::zero() })
                        .collect(),
                ),
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    send(
                        *a,
                        g.iter()
                            .zip(y)
                            .map(|(&x, &s)| x * s * (T::one() - s))
                            .collect(),
                    );
                }
                Op::FullyConnected { x, w, b } => {
                    let xs = nodes[x.0].value.shape();
                    let (n, din) = (xs[0], xs[1]);
                    let dout = nodes[w.0].value.shape()[0];
                    if nodes[b.0].requires_grad {
                        let mut db = vec![T::zero(); dout];
                        for row in g.chunks(dout.max(1)) {
                            db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                        send(*b, db);
                    }
                    if nodes[w.0].requires_grad {
                        let mut dw = vec![T::zero(); dout * din];
                        T::gemm(
                            dout, n, din, T::one(), &g, 1, dout as isize, val(*x), din as isize,
                            1, T::zero(), &mut dw, din as isize, 1,
                        );
                        send(*w, dw);
                    }
                    if nodes[x.0].requires_grad {
                        let mut dx = vec![T::zero(); n * din];
                        T::gemm(
                            n, dout, din, T::one(), &g, dout as isize, 1, val(*w), din as isize,
                            1, T::zero(), &mut dx, din as isize, 1,
                        );
                        send(*x, dx);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let want = (
                        nodes[x.0].requires_grad,
                        nodes[w.0].requires_grad,
                        nodes[b.0].requires_grad,
                    );
                    let grads = kernels::conv_backward(val(*x), val(*w), &g, geom, want);
                    if let Some(dx) = grads.dx {
                        send(*x, dx);
                    }
                    if let Some(dw) = grads.dw {
                        send(*w, dw);
                    }
                    if let Some(db) = grads.db {
                        send(*b, db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let xs = nodes[x.0].value.shape();
                    let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                    let gam = val(*gamma);
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for bb in 0..n {
                        for ch in 0..c {
                            let off = (bb * c + ch) * plane;
                            for k in off..off + plane {
                                dgamma[ch] += g[k] * xhat[k];
                                dbeta[ch] += g[k];
                            }
                        }
                    }
                    if nodes[x.0].requires_grad {
                        let mut dx = vec![T::zero(); g.len()];
                        let m = r::<T>((n * plane) as f64);
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch];
                            for bb in 0..n {
                                let off = (bb * c + ch) * plane;
                                for k in off..off + plane {
                                    dx[k] = if *train {
                                        scale / m * (m * g[k] - dbeta[ch] - xhat[k] * dgamma[ch])
                                    } else {
                                        scale * g[k]
                                    };
                                }
                            }
                        }
                        send(*x, dx);
                    }
                    send(*gamma, dgamma);
                    send(*beta, dbeta);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![T::zero(); val(*x).len()];
                    for (&k, &v) in argmax.iter().zip(&g) {
                        dx[k] += v;
                    }
                    send(*x, dx);
                }
                Op::GlobalAvgPool(x) => {
                    let s = nodes[x.0].value.shape();
                    let plane = s[2] * s[3];
                    let inv = r::<T>(1.0 / plane as f64);
                    let mut dx = Vec::with_capacity(val(*x).len());
                    for &v in &g {
                        dx.extend(std::iter::repeat(v * inv).take(plane));
                    }
                    send(*x, dx);
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, len, inner) = kernels::split_axis(node.value.shape(), *axis);
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + ii;
                            let dot: T = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                dx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::LogSoftmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, len, inner) = kernels::split_axis(node.value.shape(), *axis);
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + ii;
                            let gs: T = (0..len).map(|k| g[idx(k)]).sum();
                            for k in 0..len {
                                dx[idx(k)] = g[idx(k)] - y[idx(k)].exp() * gs;
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::Concat { xs, axis } => {
                    let (outer, total, inner) = kernels::split_axis(node.value.shape(), *axis);
                    let mut offset = 0;
                    for &v in xs {
                        let len = nodes[v.0].value.shape()[*axis] * inner;
                        if nodes[v.0].requires_grad {
                            let mut part = Vec::with_capacity(outer * len);
                            for o in 0..outer {
                                let start = o * total * inner + offset;
                                part.extend_from_slice(&g[start..start + len]);
                            }
                            send(v, part);
                        }
                        offset += len;
                    }
                }
                Op::Reshape(x) => send(*x, g),
                Op::Gather { x, idx } => {
                    let s = nodes[x.0].value.shape();
                    let row: usize = s[1..].iter().product();
                    let mut dx = vec![T::zero(); s[0] * row];
                    for (j, &i) in idx.iter().enumerate() {
                        dx[i * row..(i + 1) * row]
                            .iter_mut()
                            .zip(&g[j * row..(j + 1) * row])
                            .for_each(|(a, &b)| *a += b);
                    }
                    send(*x, dx);
                }
                Op::GroupMean { x, groups } => {
                    let s = nodes[x.0].value.shape();
                    let row: usize = s[1..].iter().product();
                    let mut dx = vec![T::zero(); s[0] * row];
                    for (j, grp) in groups.iter().enumerate() {
                        let inv = r::<T>(1.0 / grp.len() as f64);
                        for &i in grp {
                            dx[i * row..(i + 1) * row]
                                .iter_mut()
                                .zip(&g[j * row..(j + 1) * row])
                                .for_each(|(a, &b)| *a += b * inv);
                        }
                    }
                    send(*x, dx);
                }
                Op::TileSpatial { x, h, w } => {
                    let plane = h * w;
                    send(*x, g.chunks(plane).map(|c| c.iter().copied().sum()).collect());
                }
                Op::BceWithLogits { x, target } => {
                    send(
                        *x,
                        g.iter()
                            .zip(val(*x))
                            .zip(target)
                            .map(|((&gg, &z), &t)| gg * (sigmoid(z) - t))
                            .collect(),
                    );
                }
                Op::Pick { x, idx } => {
                    let c = nodes[x.0].value.shape()[1];
                    let mut dx = vec![T::zero(); idx.len() * c];
                    for (n, &i) in idx.iter().enumerate() {
                        dx[n * c + i] = g[n];
                    }
                    send(*x, dx);
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
