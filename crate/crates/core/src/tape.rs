//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the records in reverse and returns the
//! gradient of that scalar with respect to every node that needs one.
//!
//! Tensors are laid out row-major. Image-like values use `[B, C, H, W]`
//! (batched) or `[C, H, W]` (single sample); vector batches use `[B, D]`.

use std::cell::{Cell, Ref, RefCell};
use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use crate::error::{contract, Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const CE_FLOOR: f64 = 1e-12;

/// Operation kinds, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    BatchNorm,
    Relu,
    Mul,
    Add,
    Sub,
    Scale,
    Sum,
    Mean,
    Concat,
    GlobalAvgPool,
    Linear,
    Softmax,
    CrossEntropy,
    L2Norm,
    ChannelOuter,
    PairProject,
    NeighborMean,
    Max,
    Reshape,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batchnorm2d",
            OpKind::Relu => "relu",
            OpKind::Mul => "elementwise_mul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat => "concat_channels",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Linear => "linear",
            OpKind::Softmax => "softmax",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::L2Norm => "l2_norm",
            OpKind::ChannelOuter => "channel_outer",
            OpKind::PairProject => "pair_project",
            OpKind::NeighborMean => "neighbor_mean",
            OpKind::Max => "max",
            OpKind::Reshape => "reshape",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        use OpKind::*;
        [
            Leaf,
            Conv2d,
            BatchNorm,
            Relu,
            Mul,
            Add,
            Sub,
            Scale,
            Sum,
            Mean,
            Concat,
            GlobalAvgPool,
            Linear,
            Softmax,
            CrossEntropy,
            L2Norm,
            ChannelOuter,
            PairProject,
            NeighborMean,
            Max,
            Reshape,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Batch-norm running statistics for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of train-mode updates folded into the statistics.
    pub tracked: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            tracked: 0,
        }
    }
}

/// How a batch-norm layer normalizes.
pub enum BnMode<'a> {
    /// Batch statistics; the running statistics are updated when given.
    Train(Option<&'a mut RunningStats>),
    /// Running statistics.
    Eval(&'a RunningStats),
}

enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        cols: Vec<f64>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
        outer: usize,
        channels: usize,
        inner: usize,
    },
    Relu(usize),
    Mul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Mean(usize),
    Concat {
        parts: Vec<usize>,
        widths: Vec<usize>,
        outer: usize,
    },
    GlobalAvgPool {
        x: usize,
        spatial: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Softmax {
        x: usize,
        cols: usize,
    },
    CrossEntropy {
        p: usize,
        labels: Vec<usize>,
        cols: usize,
    },
    L2Norm(usize),
    ChannelOuter {
        x: usize,
        y: usize,
        batch: usize,
        m: usize,
        spatial: usize,
    },
    PairProject {
        x: usize,
        y: usize,
        w: usize,
        b: usize,
        geom: kernels::PairGeom,
    },
    NeighborMean {
        x: usize,
        neighbors: Rc<Vec<Vec<usize>>>,
        width: usize,
    },
    Max(usize, usize),
    Reshape(usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu(_) => OpKind::Relu,
            Op::Mul(..) => OpKind::Mul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Concat { .. } => OpKind::Concat,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Linear { .. } => OpKind::Linear,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::L2Norm(_) => OpKind::L2Norm,
            Op::ChannelOuter { .. } => OpKind::ChannelOuter,
            Op::PairProject { .. } => OpKind::PairProject,
            Op::NeighborMean { .. } => OpKind::NeighborMean,
            Op::Max(..) => OpKind::Max,
            Op::Reshape(_) => OpKind::Reshape,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recording of a computation. Single-threaded by construction.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<OpKind>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; v.numel()],
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].data.len()
    }

    pub fn data(&self) -> Ref<'t, [f64]> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].data.as_slice())
    }

    /// Detached copy of the value.
    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn item(&self) -> f64 {
        self.data()[0]
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.relu(self)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.mul(self, other)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.add(self, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.sub(self, other)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.scale(self, c)
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.sum(self)
    }

    pub fn mean(self) -> Var<'t> {
        self.tape.mean(self)
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(contract(op, format!("shapes {:?} and {:?} differ", a, b)));
    }
    Ok(())
}

/// Splits an image-like shape into (batch, channels, height, width).
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(contract(
            op,
            format!("expected [C,H,W] or [B,C,H,W], got {:?}", shape),
        )),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scales the input gradients produced by every `kind` node by 1.5.
    /// Exists so gradient checks can be shown to catch a broken backward.
    pub fn inject_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Records `t` as a leaf. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn variable(&self, t: Tensor) -> Var<'_> {
        self.push(t.shape, t.data, Op::Leaf, true)
    }

    /// Same-padded 2-D cross-correlation with bias.
    ///
    /// `x` is `[C_in,H,W]` or `[B,C_in,H,W]`, `kernel` is `[C_out,C_in,k,k]`
    /// with odd `k`, `bias` is `[C_out]`.
    pub fn conv2d<'a>(&'a self, x: Var<'a>, kernel: Var<'a>, bias: Var<'a>) -> Result<Var<'a>> {
        const OP: &str = "conv2d";
        let xs = x.shape();
        let ks = kernel.shape();
        let (batch, cin, h, w) = image_dims(OP, &xs)?;
        let [cout, kcin, kh, kw] = ks[..] else {
            return Err(contract(OP, format!("kernel must be rank 4, got {:?}", ks)));
        };
        if kcin != cin {
            return Err(contract(
                OP,
                format!("kernel expects {} input channels, input has {}", kcin, cin),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(contract(OP, format!("kernel must be square and odd, got {}x{}", kh, kw)));
        }
        if bias.shape() != [cout] {
            return Err(contract(OP, format!("bias must be [{}], got {:?}", cout, bias.shape())));
        }
        let geom = ConvGeom {
            batch,
            cin,
            cout,
            h,
            w,
            k: kh,
        };
        let (out, cols) = {
            let xd = x.data();
            let kd = kernel.data();
            let bd = bias.data();
            kernels::conv2d_forward(&geom, &xd, &kd, &bd)
        };
        let shape = if xs.len() == 3 {
            vec![cout, h, w]
        } else {
            vec![batch, cout, h, w]
        };
        let needs = self.needs(&[x.id, kernel.id, bias.id]);
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                x: x.id,
                w: kernel.id,
                b: bias.id,
                cols,
                geom,
            },
            needs,
        ))
    }

    /// Per-channel batch normalization over every axis except axis 1
    /// (`[B,C,...]`). Rank-3 `[C,H,W]` input is treated as a batch of one.
    pub fn batch_norm<'a>(
        &'a self,
        x: Var<'a>,
        gamma: Var<'a>,
        beta: Var<'a>,
        mode: BnMode<'_>,
    ) -> Result<Var<'a>> {
        const OP: &str = "batchnorm2d";
        let xs = x.shape();
        let (outer, channels, inner) = match xs.len() {
            2 => (xs[0], xs[1], 1),
            3 => (1, xs[0], xs[1] * xs[2]),
            4 => (xs[0], xs[1], xs[2] * xs[3]),
            _ => return Err(contract(OP, format!("unsupported shape {:?}", xs))),
        };
        if gamma.shape() != [channels] || beta.shape() != [channels] {
            return Err(contract(OP, format!("affine parameters must be [{}]", channels)));
        }
        let count = outer * inner;
        let xd = x.data().to_vec();
        let g = gamma.data().to_vec();
        let bt = beta.data().to_vec();
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        let train = matches!(mode, BnMode::Train(_));
        match mode {
            BnMode::Train(running) => {
                if count < 2 {
                    return Err(contract(OP, "train mode needs at least two values per channel"));
                }
                for o in 0..outer {
                    for c in 0..channels {
                        let base = (o * channels + c) * inner;
                        mean[c] += xd[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for o in 0..outer {
                    for c in 0..channels {
                        let base = (o * channels + c) * inner;
                        var[c] += xd[base..base + inner]
                            .iter()
                            .map(|v| (v - mean[c]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                if let Some(rs) = running {
                    if rs.mean.len() != channels {
                        return Err(contract(OP, "running statistics have the wrong width"));
                    }
                    let unbias = count as f64 / (count as f64 - 1.0);
                    for c in 0..channels {
                        rs.mean[c] = (1.0 - BN_MOMENTUM) * rs.mean[c] + BN_MOMENTUM * mean[c];
                        rs.var[c] = (1.0 - BN_MOMENTUM) * rs.var[c] + BN_MOMENTUM * var[c] * unbias;
                    }
                    rs.tracked += 1;
                }
            }
            BnMode::Eval(rs) => {
                if rs.tracked == 0 {
                    return Err(Error::UninitializedStats);
                }
                if rs.mean.len() != channels {
                    return Err(contract(OP, "running statistics have the wrong width"));
                }
                mean.copy_from_slice(&rs.mean);
                var.copy_from_slice(&rs.var);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                for i in base..base + inner {
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + bt[c];
                }
            }
        }
        let needs = self.needs(&[x.id, gamma.id, beta.id]);
        Ok(self.push(
            xs,
            out,
            Op::BatchNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                train,
                outer,
                channels,
                inner,
            },
            needs,
        ))
    }

    pub fn relu<'a>(&'a self, x: Var<'a>) -> Var<'a> {
        let out: Vec<f64> = x.data().iter().map(|&v| v.max(0.0)).collect();
        let needs = self.needs(&[x.id]);
        self.push(x.shape(), out, Op::Relu(x.id), needs)
    }

    fn binary<'a>(
        &'a self,
        op: &'static str,
        a: Var<'a>,
        b: Var<'a>,
        f: impl Fn(f64, f64) -> f64,
        rec: Op,
    ) -> Result<Var<'a>> {
        let shape = a.shape();
        same_shape(op, &shape, &b.shape())?;
        let out: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(&[a.id, b.id]);
        Ok(self.push(shape, out, rec, needs))
    }

    /// Hadamard product.
    pub fn mul<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        self.binary("elementwise_mul", a, b, |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn add<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.id, b.id))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        self.binary("max", a, b, f64::max, Op::Max(a.id, b.id))
    }

    pub fn scale<'a>(&'a self, x: Var<'a>, c: f64) -> Var<'a> {
        let out: Vec<f64> = x.data().iter().map(|v| v * c).collect();
        let needs = self.needs(&[x.id]);
        self.push(x.shape(), out, Op::Scale(x.id, c), needs)
    }

    pub fn sum<'a>(&'a self, x: Var<'a>) -> Var<'a> {
        let s: f64 = x.data().iter().sum();
        let needs = self.needs(&[x.id]);
        self.push(vec![], vec![s], Op::Sum(x.id), needs)
    }

    pub fn mean<'a>(&'a self, x: Var<'a>) -> Var<'a> {
        let n = x.numel().max(1) as f64;
        let s: f64 = x.data().iter().sum::<f64>() / n;
        let needs = self.needs(&[x.id]);
        self.push(vec![], vec![s], Op::Mean(x.id), needs)
    }

    pub fn reshape<'a>(&'a self, x: Var<'a>, shape: Vec<usize>) -> Result<Var<'a>> {
        if shape.iter().product::<usize>() != x.numel() {
            return Err(contract(
                "reshape",
                format!("cannot view {:?} as {:?}", x.shape(), shape),
            ));
        }
        let data = x.data().to_vec();
        let needs = self.needs(&[x.id]);
        Ok(self.push(shape, data, Op::Reshape(x.id), needs))
    }

    /// Concatenates along `axis`; every other extent must agree.
    pub fn concat<'a>(&'a self, parts: &[Var<'a>], axis: usize) -> Result<Var<'a>> {
        const OP: &str = "concat_channels";
        let first = parts
            .first()
            .ok_or_else(|| contract(OP, "nothing to concatenate"))?
            .shape();
        if axis >= first.len() {
            return Err(contract(OP, format!("axis {} out of range for {:?}", axis, first)));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(contract(
                    OP,
                    format!("part {:?} does not match {:?} off axis {}", s, first, axis),
                ));
            }
            widths.push(s[axis] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        {
            let datas: Vec<Ref<'_, [f64]>> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (d, &wd) in datas.iter().zip(&widths) {
                    out.extend_from_slice(&d[o * wd..(o + 1) * wd]);
                }
            }
        }
        let mut shape = first.clone();
        shape[axis] = total / inner;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: ids,
                widths,
                outer,
            },
            needs,
        ))
    }

    /// Channel-axis concatenation of `[C_i,H,W]` or `[B,C_i,H,W]` parts.
    pub fn concat_channels<'a>(&'a self, parts: &[Var<'a>]) -> Result<Var<'a>> {
        let rank = parts
            .first()
            .map(|p| p.shape().len())
            .ok_or_else(|| contract("concat_channels", "nothing to concatenate"))?;
        if rank < 3 {
            return Err(contract("concat_channels", "parts must be image-like"));
        }
        self.concat(parts, rank - 3)
    }

    /// Spatial mean: `[..., C, H, W]` to `[..., C]`.
    pub fn global_avg_pool<'a>(&'a self, x: Var<'a>) -> Result<Var<'a>> {
        let xs = x.shape();
        if xs.len() < 3 {
            return Err(contract("global_avg_pool", format!("expected image-like input, got {:?}", xs)));
        }
        let spatial = xs[xs.len() - 1] * xs[xs.len() - 2];
        if spatial == 0 {
            return Err(contract("global_avg_pool", "empty spatial extent"));
        }
        let out: Vec<f64> = x
            .data()
            .chunks(spatial)
            .map(|c| c.iter().sum::<f64>() / spatial as f64)
            .collect();
        let needs = self.needs(&[x.id]);
        Ok(self.push(
            xs[..xs.len() - 2].to_vec(),
            out,
            Op::GlobalAvgPool { x: x.id, spatial },
            needs,
        ))
    }

    /// Affine map `x W^T + b` for `x` of shape `[D_in]` or `[B, D_in]`.
    pub fn linear<'a>(&'a self, x: Var<'a>, w: Var<'a>, b: Option<Var<'a>>) -> Result<Var<'a>> {
        const OP: &str = "linear";
        let xs = x.shape();
        let ws = w.shape();
        let (rows, din) = match xs[..] {
            [d] => (1, d),
            [r, d] => (r, d),
            _ => return Err(contract(OP, format!("input must be rank 1 or 2, got {:?}", xs))),
        };
        let [dout, wdin] = ws[..] else {
            return Err(contract(OP, format!("weight must be rank 2, got {:?}", ws)));
        };
        if wdin != din {
            return Err(contract(
                OP,
                format!("weight expects width {}, input has {}", wdin, din),
            ));
        }
        if let Some(b) = b {
            if b.shape() != [dout] {
                return Err(contract(OP, format!("bias must be [{}], got {:?}", dout, b.shape())));
            }
        }
        let mut out = vec![0.0; rows * dout];
        {
            let xd = x.data();
            let wd = w.data();
            // out[rows, dout] = x[rows, din] * W^T
            kernels::gemm(rows, din, dout, &xd, din, 1, &wd, 1, din, &mut out, 0.0);
            if let Some(b) = b {
                let bd = b.data();
                for r in 0..rows {
                    out[r * dout..(r + 1) * dout]
                        .iter_mut()
                        .zip(bd.iter())
                        .for_each(|(o, bv)| *o += bv);
                }
            }
        }
        let shape = if xs.len() == 1 { vec![dout] } else { vec![rows, dout] };
        let mut ids = vec![x.id, w.id];
        ids.extend(b.map(|b| b.id));
        let needs = self.needs(&ids);
        Ok(self.push(
            shape,
            out,
            Op::Linear {
                x: x.id,
                w: w.id,
                b: b.map(|b| b.id),
                rows,
                din,
                dout,
            },
            needs,
        ))
    }

    /// Row-wise softmax over the last axis, stabilized by max subtraction.
    pub fn softmax<'a>(&'a self, x: Var<'a>) -> Result<Var<'a>> {
        let xs = x.shape();
        let cols = *xs
            .last()
            .ok_or_else(|| contract("softmax", "scalar input"))?;
        let xd = x.data().to_vec();
        if xd.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut out = vec![0.0; xd.len()];
        for (row, o) in xd.chunks(cols).zip(out.chunks_mut(cols)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = (v - mx).exp();
                s += *oi;
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        let needs = self.needs(&[x.id]);
        Ok(self.push(xs, out, Op::Softmax { x: x.id, cols }, needs))
    }

    /// Mean over rows of `-ln(max(p[label], 1e-12))`; `p` is `[C]` or `[B, C]`.
    pub fn cross_entropy<'a>(&'a self, p: Var<'a>, labels: &[usize]) -> Result<Var<'a>> {
        const OP: &str = "cross_entropy";
        let ps = p.shape();
        let (rows, cols) = match ps[..] {
            [c] => (1, c),
            [r, c] => (r, c),
            _ => return Err(contract(OP, format!("expected [C] or [B,C], got {:?}", ps))),
        };
        if labels.len() != rows {
            return Err(contract(OP, format!("{} labels for {} rows", labels.len(), rows)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(contract(OP, format!("label {} out of range [0,{})", bad, cols)));
        }
        let loss = {
            let pd = p.data();
            labels
                .iter()
                .enumerate()
                .map(|(r, &l)| -pd[r * cols + l].max(CE_FLOOR).ln())
                .sum::<f64>()
                / rows as f64
        };
        let needs = self.needs(&[p.id]);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                p: p.id,
                labels: labels.to_vec(),
                cols,
            },
            needs,
        ))
    }

    /// Euclidean norm of the flattened tensor.
    pub fn l2_norm<'a>(&'a self, x: Var<'a>) -> Var<'a> {
        let n = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let needs = self.needs(&[x.id]);
        self.push(vec![], vec![n], Op::L2Norm(x.id), needs)
    }

    /// All pairwise channel products of two image-like tensors with `m`
    /// channels each. Output channel `i*m + j` is `x[i] * y[j]`.
    pub fn channel_outer<'a>(&'a self, x: Var<'a>, y: Var<'a>) -> Result<Var<'a>> {
        const OP: &str = "cifem_correlate";
        let xs = x.shape();
        let ys = y.shape();
        let (batch, m, h, w) = image_dims(OP, &xs)?;
        let (yb, ym, yh, yw) = image_dims(OP, &ys)?;
        if (yb, ym, yh, yw) != (batch, m, h, w) || xs.len() != ys.len() {
            return Err(contract(
                OP,
                format!("operands {:?} and {:?} must have equal shapes", xs, ys),
            ));
        }
        let spatial = h * w;
        let out = {
            let xd = x.data();
            let yd = y.data();
            kernels::channel_outer_forward(&xd, &yd, batch, m, spatial)
        };
        let shape = if xs.len() == 3 {
            vec![m * m, h, w]
        } else {
            vec![batch, m * m, h, w]
        };
        let needs = self.needs(&[x.id, y.id]);
        Ok(self.push(
            shape,
            out,
            Op::ChannelOuter {
                x: x.id,
                y: y.id,
                batch,
                m,
                spatial,
            },
            needs,
        ))
    }

    /// `conv2d(channel_outer(x, y), kernel, bias)` with a 1x1 `kernel` of
    /// shape `[C_out, m*m, 1, 1]`, computed without the `m*m` channel
    /// intermediate.
    pub fn pair_project<'a>(&'a self, x: Var<'a>, y: Var<'a>, kernel: Var<'a>, bias: Var<'a>) -> Result<Var<'a>> {
        const OP: &str = "pair_project";
        let xs = x.shape();
        let ys = y.shape();
        let (batch, m, h, w) = image_dims(OP, &xs)?;
        if ys != xs {
            return Err(contract(
                OP,
                format!("operands {:?} and {:?} must have equal shapes", xs, ys),
            ));
        }
        let ks = kernel.shape();
        let [cout, kc, 1, 1] = ks[..] else {
            return Err(contract(OP, format!("kernel must be [C_out, m*m, 1, 1], got {:?}", ks)));
        };
        if kc != m * m {
            return Err(contract(OP, format!("kernel expects {} channels, operands give {}", kc, m * m)));
        }
        if bias.shape() != [cout] {
            return Err(contract(OP, format!("bias must be [{}], got {:?}", cout, bias.shape())));
        }
        let geom = kernels::PairGeom {
            batch,
            m,
            cout,
            spatial: h * w,
        };
        let out = {
            let (xd, yd, kd, bd) = (x.data(), y.data(), kernel.data(), bias.data());
            kernels::pair_project_forward(&geom, &xd, &yd, &kd, &bd)
        };
        let shape = if xs.len() == 3 {
            vec![cout, h, w]
        } else {
            vec![batch, cout, h, w]
        };
        let needs = self.needs(&[x.id, y.id, kernel.id, bias.id]);
        Ok(self.push(
            shape,
            out,
            Op::PairProject {
                x: x.id,
                y: y.id,
                w: kernel.id,
                b: bias.id,
                geom,
            },
            needs,
        ))
    }

    /// Row `v` of the output is the mean of row `v` and the rows listed in
    /// `neighbors[v]` of the `[N, D]` input.
    pub fn neighbor_mean<'a>(&'a self, x: Var<'a>, neighbors: Rc<Vec<Vec<usize>>>) -> Result<Var<'a>> {
        const OP: &str = "neighbor_mean";
        let xs = x.shape();
        let [n, width] = xs[..] else {
            return Err(contract(OP, format!("expected [N, D], got {:?}", xs)));
        };
        if neighbors.len() != n {
            return Err(contract(OP, format!("{} neighbor lists for {} nodes", neighbors.len(), n)));
        }
        if neighbors.iter().flatten().any(|&u| u >= n) {
            return Err(contract(OP, "neighbor index out of range"));
        }
        let mut out = vec![0.0; n * width];
        {
            let xd = x.data();
            for (v, nb) in neighbors.iter().enumerate() {
                let row = &mut out[v * width..(v + 1) * width];
                row.copy_from_slice(&xd[v * width..(v + 1) * width]);
                for &u in nb {
                    row.iter_mut()
                        .zip(&xd[u * width..(u + 1) * width])
                        .for_each(|(a, b)| *a += b);
                }
                let inv = 1.0 / (1 + nb.len()) as f64;
                row.iter_mut().for_each(|a| *a *= inv);
            }
        }
        let needs = self.needs(&[x.id]);
        Ok(self.push(
            xs,
            out,
            Op::NeighborMean {
                x: x.id,
                neighbors,
                width,
            },
            needs,
        ))
    }

    /// Hash of every piecewise branch taken (relu masks, max selections).
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let nodes = self.nodes.borrow();
        let mut h = DefaultHasher::new();
        for node in nodes.iter() {
            match node.op {
                Op::Relu(x) => {
                    for v in &nodes[x].data {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::Max(a, b) => {
                    for (x, y) in nodes[a].data.iter().zip(&nodes[b].data) {
                        (x >= y).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Back-propagates from the scalar `loss`. Gradients of nodes used on
    /// several paths are summed.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.data.len() != 1 {
            return Err(contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        let fault = self.fault.get();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut sink = GradSink {
                nodes: &nodes,
                grads: &mut grads,
                factor: if fault == Some(node.op.kind()) { 1.5 } else { 1.0 },
            };
            backprop_node(node, &g, &nodes, &mut sink);
            // Intermediate gradients are kept so callers can inspect them.
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

struct GradSink<'n, 'g> {
    nodes: &'n [Node],
    grads: &'g mut Vec<Option<Vec<f64>>>,
    factor: f64,
}

impl GradSink<'_, '_> {
    fn wants(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn add(&mut self, id: usize, contribution: Vec<f64>) {
        if !self.wants(id) {
            return;
        }
        let mut contribution = contribution;
        if self.factor != 1.0 {
            contribution.iter_mut().for_each(|v| *v *= self.factor);
        }
        match &mut self.grads[id] {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn add_with(&mut self, id: usize, f: impl FnOnce() -> Vec<f64>) {
        if self.wants(id) {
            let c = f();
            self.add(id, c);
        }
    }
}

fn backprop_node(node: &Node, g: &[f64], nodes: &[Node], sink: &mut GradSink<'_, '_>) {
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            x,
            w,
            b,
            cols,
            geom,
        } => {
            let (dx, dw, db) = kernels::conv2d_backward(
                geom,
                g,
                &nodes[*x].data,
                &nodes[*w].data,
                cols,
                sink.wants(*x),
                sink.wants(*w),
            );
            if let Some(dx) = dx {
                sink.add(*x, dx);
            }
            if let Some(dw) = dw {
                sink.add(*w, dw);
            }
            sink.add(*b, db);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
            outer,
            channels,
            inner,
        } => {
            let (outer, channels, inner) = (*outer, *channels, *inner);
            let gam = &nodes[*gamma].data;
            let mut dgamma = vec![0.0; channels];
            let mut dbeta = vec![0.0; channels];
            for o in 0..outer {
                for c in 0..channels {
                    let base = (o * channels + c) * inner;
                    for i in base..base + inner {
                        dgamma[c] += g[i] * xhat[i];
                        dbeta[c] += g[i];
                    }
                }
            }
            if sink.wants(*x) {
                let mut dx = vec![0.0; g.len()];
                let count = (outer * inner) as f64;
                for o in 0..outer {
                    for c in 0..channels {
                        let base = (o * channels + c) * inner;
                        for i in base..base + inner {
                            dx[i] = if *train {
                                gam[c] * inv_std[c] / count
                                    * (count * g[i] - dbeta[c] - xhat[i] * dgamma[c])
                            } else {
                                gam[c] * inv_std[c] * g[i]
                            };
                        }
                    }
                }
                sink.add(*x, dx);
            }
            sink.add(*gamma, dgamma);
            sink.add(*beta, dbeta);
        }
        Op::Relu(x) => {
            let xd = &nodes[*x].data;
            sink.add_with(*x, || {
                g.iter()
                    .zip(xd)
                    .map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 })
                    .collect()
            });
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (&nodes[*a].data, &nodes[*b].data);
            sink.add_with(*a, || g.iter().zip(bd).map(|(x, y)| x * y).collect());
            sink.add_with(*b, || g.iter().zip(ad).map(|(x, y)| x * y).collect());
        }
        Op::Add(a, b) => {
            sink.add_with(*a, || g.to_vec());
            sink.add_with(*b, || g.to_vec());
        }
        Op::Sub(a, b) => {
            sink.add_with(*a, || g.to_vec());
            sink.add_with(*b, || g.iter().map(|v| -v).collect());
        }
        Op::Max(a, b) => {
            let (ad, bd) = (&nodes[*a].data, &nodes[*b].data);
            sink.add_with(*a, || {
                g.iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(gi, (x, y))| if x >= y { *gi } else { 0.0 })
                    .collect()
            });
            sink.add_with(*b, || {
                g.iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(gi, (x, y))| if x >= y { 0.0 } else { *gi })
                    .collect()
            });
        }
        Op::Scale(x, c) => sink.add_with(*x, || g.iter().map(|v| v * c).collect()),
        Op::Sum(x) => {
            let n = nodes[*x].data.len();
            sink.add_with(*x, || vec![g[0]; n]);
        }
        Op::Mean(x) => {
            let n = nodes[*x].data.len();
            sink.add_with(*x, || vec![g[0] / n.max(1) as f64; n]);
        }
        Op::Reshape(x) => sink.add_with(*x, || g.to_vec()),
        Op::Concat {
            parts,
            widths,
            outer,
        } => {
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for (&p, &wd) in parts.iter().zip(widths) {
                sink.add_with(p, || {
                    let mut d = Vec::with_capacity(outer * wd);
                    for o in 0..*outer {
                        let s = o * total + offset;
                        d.extend_from_slice(&g[s..s + wd]);
                    }
                    d
                });
                offset += wd;
            }
        }
        Op::GlobalAvgPool { x, spatial } => {
            let inv = 1.0 / *spatial as f64;
            sink.add_with(*x, || {
                g.iter()
                    .flat_map(|v| std::iter::repeat_n(v * inv, *spatial))
                    .collect()
            });
        }
        Op::Linear {
            x,
            w,
            b,
            rows,
            din,
            dout,
        } => {
            let (rows, din, dout) = (*rows, *din, *dout);
            let xd = &nodes[*x].data;
            let wd = &nodes[*w].data;
            sink.add_with(*x, || {
                // dx[rows, din] = g[rows, dout] * W[dout, din]
                let mut dx = vec![0.0; rows * din];
                kernels::gemm(rows, dout, din, g, dout, 1, wd, din, 1, &mut dx, 0.0);
                dx
            });
            sink.add_with(*w, || {
                // dW[dout, din] = g^T * x
                let mut dw = vec![0.0; dout * din];
                kernels::gemm(dout, rows, din, g, 1, dout, xd, din, 1, &mut dw, 0.0);
                dw
            });
            if let Some(b) = b {
                sink.add_with(*b, || {
                    let mut db = vec![0.0; dout];
                    for r in 0..rows {
                        db.iter_mut()
                            .zip(&g[r * dout..(r + 1) * dout])
                            .for_each(|(a, v)| *a += v);
                    }
                    db
                });
            }
        }
        Op::Softmax { x, cols } => {
            let y = &node.data;
            sink.add_with(*x, || {
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(*cols).zip(g.chunks(*cols)).zip(dx.chunks_mut(*cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                dx
            });
        }
        Op::CrossEntropy { p, labels, cols } => {
            let pd = &nodes[*p].data;
            let rows = labels.len() as f64;
            sink.add_with(*p, || {
                let mut dp = vec![0.0; pd.len()];
                for (r, &l) in labels.iter().enumerate() {
                    let v = pd[r * cols + l];
                    if v > CE_FLOOR {
                        dp[r * cols + l] = -g[0] / (rows * v);
                    }
                }
                dp
            });
        }
        Op::L2Norm(x) => {
            let xd = &nodes[*x].data;
            let n = node.data[0];
            sink.add_with(*x, || {
                if n == 0.0 {
                    vec![0.0; xd.len()]
                } else {
                    xd.iter().map(|v| g[0] * v / n).collect()
                }
            });
        }
        Op::ChannelOuter {
            x,
            y,
            batch,
            m,
            spatial,
        } => {
            let (xd, yd) = (&nodes[*x].data, &nodes[*y].data);
            if sink.wants(*x) {
                let dx = kernels::channel_outer_backward_left(g, yd, *batch, *m, *spatial);
                sink.add(*x, dx);
            }
            if sink.wants(*y) {
                let dy = kernels::channel_outer_backward_right(g, xd, *batch, *m, *spatial);
                sink.add(*y, dy);
            }
        }
        Op::PairProject { x, y, w, b, geom } => {
            let grads = kernels::pair_project_backward(
                geom,
                g,
                &nodes[*x].data,
                &nodes[*y].data,
                &nodes[*w].data,
                sink.wants(*x),
                sink.wants(*y),
                sink.wants(*w),
            );
            if let Some(dx) = grads.dx {
                sink.add(*x, dx);
            }
            if let Some(dy) = grads.dy {
                sink.add(*y, dy);
            }
            if let Some(dw) = grads.dw {
                sink.add(*w, dw);
            }
            if sink.wants(*b) {
                sink.add(*b, grads.db);
            }
        }
        Op::NeighborMean {
            x,
            neighbors,
            width,
        } => {
            let width = *width;
            sink.add_with(*x, || {
                let mut dx = vec![0.0; g.len()];
                for (v, nb) in neighbors.iter().enumerate() {
                    let inv = 1.0 / (1 + nb.len()) as f64;
                    let gv = &g[v * width..(v + 1) * width];
                    for u in std::iter::once(v).chain(nb.iter().copied()) {
                        dx[u * width..(u + 1) * width]
                            .iter_mut()
                            .zip(gv)
                            .for_each(|(a, b)| *a += b * inv);
                    }
                }
                dx
            });
        }
    }
}
