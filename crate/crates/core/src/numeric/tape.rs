//! Reverse-mode differentiation over a recorded list of primitive ops.
//!
//! Every op appends one node whose inputs are strictly earlier nodes, so the
//! node list is already a topological order and the backward pass is a
//! single reverse sweep.

use super::kernels::{
    broadcast_shape, broadcast_strides, for_each_strided, for_each_strided2, gelu, gelu_grad, gemm,
};
use super::tensor::{split_axis, strides};
use super::{RngStream, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Gelu,
    Relu,
    Cos,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize, batch: usize, a_shared: bool, b_shared: bool },
    Binary { kind: Binary, a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Unary { kind: Unary, a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64>, train: bool },
    Conv1d { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    AvgPool { a: Var, window: usize, stride: usize },
    L2Norm { a: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    BroadcastTo { a: Var },
    SumAxis { a: Var, axis: usize },
    SumAll { a: Var },
    Dropout { a: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    len: usize,
    k: usize,
    groups: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    flops: u64,
}

/// Batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
    /// Number of values each statistic was taken over.
    pub count: usize,
}

/// Gradients returned by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn arg_err(op: &'static str, detail: String) -> TensorError {
    TensorError::InvalidArgument { op, detail }
}

fn resolve_axis(op: &'static str, axis: isize, rank: usize) -> Result<usize, TensorError> {
    let a = if axis < 0 { axis + rank as isize } else { axis };
    if a < 0 || a as usize >= rank {
        return Err(arg_err(op, format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(a as usize)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Smallest `|input|` over all recorded ReLUs, or infinity when there
    /// are none. Finite differences are only meaningful away from the kink.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Unary { kind: Unary::Relu, a } => Some(self.nodes[a.0].value.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Total floating-point operations recorded so far.
    pub fn flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.flops).sum()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf, flops: 0 });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var], flops: u64) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op, flops });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product over the last two axes, `op(a) · op(b)`.
    ///
    /// Leading axes are batch axes. Either operand may be a plain matrix, in
    /// which case it is shared across the other's batch.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("operands need rank >= 2, got {sa:?} and {sb:?}")));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != kb {
            return Err(shape_err("matmul", format!("inner extents differ: {sa:?} x {sb:?}")));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let ba: usize = lead_a.iter().product();
        let bb: usize = lead_b.iter().product();
        let (lead, batch, a_shared, b_shared) = if lead_a == lead_b {
            (lead_a.to_vec(), ba, false, false)
        } else if bb == 1 {
            (lead_a.to_vec(), ba, false, true)
        } else if ba == 1 {
            (lead_b.to_vec(), bb, true, false)
        } else {
            return Err(shape_err("matmul", format!("batch axes differ: {sa:?} x {sb:?}")));
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ao = if a_shared { 0 } else { i * m * k };
            let bo = if b_shared { 0 } else { i * k * n };
            gemm(&mut out[i * m * n..(i + 1) * m * n], &av[ao..ao + m * k], &bv[bo..bo + k * n], m, k, n, ta, tb);
        }
        let mut shape = lead;
        shape.extend([m, n]);
        let flops = 2 * (batch * m * k * n) as u64;
        let op = Op::MatMul { a, b, ta, tb, m, k, n, batch, a_shared, b_shared };
        self.push("matmul", Tensor::from_parts(shape, out), op, &[a, b], flops)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_t(a, b, false, false)
    }

    // ---- element-wise ---------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, TensorError> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| shape_err(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let out: Vec<f64> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n: usize = out_shape.iter().product();
            let mut out = vec![0.0; n];
            let (ta, tb) = (broadcast_strides(&sa, &out_shape), broadcast_strides(&sb, &out_shape));
            for_each_strided2(&out_shape, &ta, &tb, |o, i, j| out[o] = f(av[i], bv[j]));
            out
        };
        let flops = out.len() as u64;
        self.push(name, Tensor::from_parts(out_shape, out), Op::Binary { kind, a, b }, &[a, b], flops)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|x| x * s).collect();
        let shape = t.shape().to_vec();
        let flops = out.len() as u64;
        self.push("scale", Tensor::from_parts(shape, out), Op::Scale { a, s }, &[a], flops)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var, TensorError> {
        let (name, f): (&'static str, fn(f64) -> f64) = match kind {
            Unary::Gelu => ("gelu", gelu),
            Unary::Relu => ("relu", |x| x.max(0.0)),
            Unary::Cos => ("cos", f64::cos),
        };
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        let flops = out.len() as u64;
        self.push(name, Tensor::from_parts(shape, out), Op::Unary { kind, a }, &[a], flops)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Gelu, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Relu, a)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Cos, a)
    }

    // ---- normalization --------------------------------------------------

    /// Numerically stable softmax along `axis` (negative counts from the end).
    pub fn softmax(&mut self, a: Var, axis: isize) -> Result<Var, TensorError> {
        let t = self.value(a);
        let axis = resolve_axis("softmax", axis, t.rank())?;
        if t.data().iter().any(|x| x.is_infinite()) {
            return Err(arg_err("softmax", "infinite input".into()));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mx = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        let shape = t.shape().to_vec();
        // subtract, exp, accumulate, divide
        let flops = 4 * out.len() as u64;
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax { a, axis }, &[a], flops)
    }

    /// Layer normalization over the last axis with affine `gain`, `bias` of
    /// that extent.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        if eps <= 0.0 {
            return Err(arg_err("layernorm", format!("eps must be positive, got {eps}")));
        }
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| shape_err("layernorm", "scalar input".into()))?;
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != [d] || b.shape() != [d] {
            return Err(shape_err(
                "layernorm",
                format!("input {:?} needs gain/bias [{d}], got {:?} and {:?}", t.shape(), g.shape(), b.shape()),
            ));
        }
        let rows = t.numel() / d;
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let shape = t.shape().to_vec();
        let flops = 7 * out.len() as u64;
        let op = Op::LayerNorm { x, gain, bias, xhat, rstd };
        self.push("layernorm", Tensor::from_parts(shape, out), op, &[x, gain, bias], flops)
    }

    fn bn_dims(&self, op: &'static str, x: Var, gain: Var, bias: Var) -> Result<(usize, usize, usize), TensorError> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(shape_err(op, format!("input needs [batch, features, ...], got {s:?}")));
        }
        let (n, f) = (s[0], s[1]);
        let l: usize = s[2..].iter().product();
        if self.shape(gain) != [f] || self.shape(bias) != [f] {
            return Err(shape_err(
                op,
                format!("input {s:?} needs gain/bias [{f}], got {:?} and {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        Ok((n, f, l))
    }

    /// Batch normalization over axis 1 using batch statistics.
    pub fn batchnorm_train(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<(Var, BatchStats), TensorError> {
        let (n, f, l) = self.bn_dims("batchnorm", x, gain, bias)?;
        if n < 2 {
            return Err(arg_err("batchnorm", format!("train mode needs batch >= 2, got {n}")));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let count = n * l;
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for c in 0..f {
            let mut s = 0.0;
            for i in 0..n {
                s += xv[(i * f + c) * l..(i * f + c + 1) * l].iter().sum::<f64>();
            }
            let mu = s / count as f64;
            let mut v = 0.0;
            for i in 0..n {
                v += xv[(i * f + c) * l..(i * f + c + 1) * l].iter().map(|x| (x - mu).powi(2)).sum::<f64>();
            }
            mean[c] = mu;
            var[c] = v / count as f64;
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for c in 0..f {
                for t in 0..l {
                    let idx = (i * f + c) * l + t;
                    let h = (xv[idx] - mean[c]) * rstd[c];
                    xhat[idx] = h;
                    out[idx] = h * g[c] + b[c];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let flops = 7 * out.len() as u64;
        let op = Op::BatchNorm { x, gain, bias, xhat, rstd, train: true };
        let v = self.push("batchnorm", Tensor::from_parts(shape, out), op, &[x, gain, bias], flops)?;
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Batch normalization over axis 1 using fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (n, f, l) = self.bn_dims("batchnorm", x, gain, bias)?;
        if running_mean.len() != f || running_var.len() != f {
            return Err(shape_err("batchnorm", format!("running stats need {f} features")));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for c in 0..f {
                for t in 0..l {
                    let idx = (i * f + c) * l + t;
                    let h = (xv[idx] - running_mean[c]) * rstd[c];
                    xhat[idx] = h;
                    out[idx] = h * g[c] + b[c];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        // folds to one multiply-add per element
        let flops = 2 * out.len() as u64;
        let op = Op::BatchNorm { x, gain, bias, xhat, rstd, train: false };
        self.push("batchnorm", Tensor::from_parts(shape, out), op, &[x, gain, bias], flops)
    }

    // ---- convolution and pooling -----------------------------------------

    /// Grouped 1-D convolution with zero "same" padding.
    ///
    /// `x: [N, Cin, L]`, `w: [Cout, Cin/groups, K]` with odd `K`,
    /// optional `bias: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, groups: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 {
            return Err(shape_err("conv1d", format!("need x [N,Cin,L] and w [Cout,Cin/g,K], got {sx:?} and {sw:?}")));
        }
        let (batch, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, cin_g, k) = (sw[0], sw[1], sw[2]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(shape_err("conv1d", format!("x {sx:?} and w {sw:?} incompatible with {groups} groups")));
        }
        if k % 2 == 0 {
            return Err(arg_err("conv1d", format!("same padding needs an odd kernel, got {k}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv1d", format!("bias must be [{cout}], got {:?}", self.shape(b))));
            }
        }
        let dims = ConvDims { batch, cin, cout, len, k, groups };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = bias.map(|b| self.value(b).data());
        let mut out = vec![0.0; batch * cout * len];
        conv_visit(dims, |n, co, ci, _, wi, off| {
            let t0 = (-off).max(0) as usize;
            let t1 = (len as isize - off.max(0)) as usize;
            let w = wv[wi];
            let xo = (n * cin + ci) * len;
            let oo = (n * cout + co) * len;
            for t in t0..t1 {
                out[oo + t] += w * xv[xo + (t as isize + off) as usize];
            }
        });
        if let Some(bv) = bv {
            for n in 0..batch {
                for co in 0..cout {
                    out[(n * cout + co) * len..(n * cout + co + 1) * len].iter_mut().for_each(|o| *o += bv[co]);
                }
            }
        }
        let mut flops = 2 * (batch * cout * len * cin_g * k) as u64;
        if bias.is_some() {
            flops += (batch * cout * len) as u64;
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let op = Op::Conv1d { x, w, b: bias, dims };
        self.push("conv1d", Tensor::from_parts(vec![batch, cout, len], out), op, &inputs, flops)
    }

    /// Channel-mixing convolution, `w: [Cout, Cin]`.
    pub fn conv1d_pointwise(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 {
            return Err(shape_err("conv1d_pointwise", format!("weights must be [Cout, Cin], got {sw:?}")));
        }
        let w3 = self.reshape(w, &[sw[0], sw[1], 1])?;
        self.conv1d(x, w3, bias, 1)
    }

    /// Per-channel temporal convolution, `w: [C, K]`.
    pub fn conv1d_depthwise(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 {
            return Err(shape_err("conv1d_depthwise", format!("weights must be [C, K], got {sw:?}")));
        }
        let w3 = self.reshape(w, &[sw[0], 1, sw[1]])?;
        self.conv1d(x, w3, bias, sw[0])
    }

    /// Average pooling along the last axis.
    pub fn avgpool1d(&mut self, a: Var, window: usize, stride: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let len = *shape.last().ok_or_else(|| shape_err("avgpool1d", "scalar input".into()))?;
        if window == 0 || stride == 0 || window > len {
            return Err(arg_err("avgpool1d", format!("window {window} / stride {stride} invalid for length {len}")));
        }
        let lout = (len - window) / stride + 1;
        let rows = self.value(a).numel() / len;
        let x = self.value(a).data();
        let mut out = vec![0.0; rows * lout];
        let inv = 1.0 / window as f64;
        for r in 0..rows {
            for p in 0..lout {
                let s: f64 = x[r * len + p * stride..r * len + p * stride + window].iter().sum();
                out[r * lout + p] = s * inv;
            }
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = lout;
        let flops = (rows * lout * (window + 1)) as u64;
        self.push("avgpool1d", Tensor::from_parts(oshape, out), Op::AvgPool { a, window, stride }, &[a], flops)
    }

    // ---- reductions -----------------------------------------------------

    /// Euclidean norm along `axis`, which is removed.
    pub fn l2norm(&mut self, a: Var, axis: isize) -> Result<Var, TensorError> {
        let t = self.value(a);
        let axis = resolve_axis("l2norm", axis, t.rank())?;
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..n).map(|j| x[o * n * inner + j * inner + i].powi(2)).sum();
                out[o * inner + i] = s.sqrt();
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let flops = 2 * x.len() as u64;
        self.push("l2norm", Tensor::from_parts(shape, out), Op::L2Norm { a, axis }, &[a], flops)
    }

    /// Sum along `axis`, which is removed.
    pub fn sum_axis(&mut self, a: Var, axis: isize) -> Result<Var, TensorError> {
        let t = self.value(a);
        let axis = resolve_axis("sum_axis", axis, t.rank())?;
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += x[o * n * inner + j * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let flops = x.len() as u64;
        self.push("sum_axis", Tensor::from_parts(shape, out), Op::SumAxis { a, axis }, &[a], flops)
    }

    pub fn mean_axis(&mut self, a: Var, axis: isize) -> Result<Var, TensorError> {
        let rank = self.value(a).rank();
        let n = self.shape(a)[resolve_axis("mean_axis", axis, rank)?];
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum();
        let flops = t.numel() as u64;
        self.push("sum", Tensor::scalar(s), Op::SumAll { a }, &[a], flops)
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", t, Op::Reshape { a }, &[a], 0)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(arg_err("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let own = strides(t.shape());
        let oshape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
        let s: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for_each_strided(&oshape, &s, |o, i| out[o] = x[i]);
        let op = Op::Permute { a, perm: perm.to_vec() };
        self.push("permute", Tensor::from_parts(oshape, out), op, &[a], 0)
    }

    /// Broadcast `a` to `shape` (right-aligned rules).
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        if broadcast_shape(&sa, shape).as_deref() != Some(shape) {
            return Err(shape_err("broadcast_to", format!("cannot broadcast {sa:?} to {shape:?}")));
        }
        let s = broadcast_strides(&sa, shape);
        let x = self.value(a).data();
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        for_each_strided(shape, &s, |o, i| out[o] = x[i]);
        self.push("broadcast_to", Tensor::from_parts(shape.to_vec(), out), Op::BroadcastTo { a }, &[a], 0)
    }

    pub fn concat(&mut self, parts: &[Var], axis: isize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| arg_err("concat", "no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        let axis = resolve_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rest = s.len() == base.len() && (0..s.len()).all(|i| i == axis || s[i] == base[i]);
            if !same_rest {
                return Err(shape_err("concat", format!("{s:?} does not match {base:?} off axis {axis}")));
            }
            total += s[axis];
        }
        let mut oshape = base.clone();
        oshape[axis] = total;
        let (outer, _, inner) = split_axis(&oshape, axis);
        let mut out = vec![0.0; oshape.iter().product()];
        let mut offset = 0;
        for &p in parts {
            let e = self.shape(p)[axis];
            let x = self.value(p).data();
            for o in 0..outer {
                let src = &x[o * e * inner..(o + 1) * e * inner];
                let dst = o * total * inner + offset * inner;
                out[dst..dst + e * inner].copy_from_slice(src);
            }
            offset += e;
        }
        let op = Op::Concat { parts: parts.to_vec(), axis };
        self.push("concat", Tensor::from_parts(oshape, out), op, parts, 0)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: isize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let axis = resolve_axis("slice", axis, shape.len())?;
        if len == 0 || start + len > shape[axis] {
            return Err(arg_err("slice", format!("range {start}..{} out of extent {}", start + len, shape[axis])));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        self.push("slice", Tensor::from_parts(oshape, out), Op::Slice { a, axis, start }, &[a], 0)
    }

    // ---- stochastic -----------------------------------------------------

    /// Inverted dropout. Identity (no node recorded) when `train` is false
    /// or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut RngStream, train: bool) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(arg_err("dropout", format!("p must lie in [0, 1), got {p}")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.numel()).map(|_| if rng.next_f64() < p { 0.0 } else { keep }).collect();
        self.dropout_with_mask(a, mask)
    }

    /// Dropout with a caller-supplied multiplicative mask.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var, TensorError> {
        let t = self.value(a);
        if mask.len() != t.numel() {
            return Err(shape_err("dropout", format!("mask has {} entries for {:?}", mask.len(), t.shape())));
        }
        let out: Vec<f64> = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = t.shape().to_vec();
        let flops = out.len() as u64;
        self.push("dropout", Tensor::from_parts(shape, out), Op::Dropout { a, mask }, &[a], flops)
    }

    // ---- loss -----------------------------------------------------------

    /// `-(1/B) Σ_i w[y_i] · log softmax(logits_i)[y_i]` for `logits: [B, K]`.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var, TensorError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || weights.len() != s[1] {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {s:?} with {} labels and {} weights", labels.len(), weights.len()),
            ));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&y) = labels.iter().find(|&&y| y >= k) {
            return Err(arg_err("cross_entropy", format!("label {y} out of range for {k} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &x[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss -= weights[labels[i]] * (row[labels[i]] - lse);
        }
        loss /= b as f64;
        let flops = 5 * (b * k) as u64;
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), weights: weights.to_vec(), probs };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits], flops)
    }

    // ---- reverse pass ---------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad).map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Accumulation buffer for an input, allocated on first touch.
        fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let n = nodes[v.0].value.numel();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
        }
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb, m, k, n, batch, a_shared, b_shared } => {
                let (av, bv) = (val(a), val(b));
                if let Some(ga) = slot(grads, nodes, a) {
                    for i in 0..batch {
                        let bo = if b_shared { 0 } else { i * k * n };
                        let ao = if a_shared { 0 } else { i * m * k };
                        let gc = &g[i * m * n..(i + 1) * m * n];
                        let bb = &bv[bo..bo + k * n];
                        let dst = &mut ga[ao..ao + m * k];
                        if ta {
                            gemm(dst, bb, gc, k, n, m, tb, true);
                        } else {
                            gemm(dst, gc, bb, m, n, k, false, !tb);
                        }
                    }
                }
                if let Some(gb) = slot(grads, nodes, b) {
                    for i in 0..batch {
                        let ao = if a_shared { 0 } else { i * m * k };
                        let bo = if b_shared { 0 } else { i * k * n };
                        let gc = &g[i * m * n..(i + 1) * m * n];
                        let aa = &av[ao..ao + m * k];
                        let dst = &mut gb[bo..bo + k * n];
                        if tb {
                            gemm(dst, gc, aa, n, m, k, true, ta);
                        } else {
                            gemm(dst, aa, gc, k, m, n, !ta, false);
                        }
                    }
                }
            }
            &Op::Binary { kind, a, b } => {
                let out_shape = node.value.shape();
                let (sa, sb) = (shp(a).to_vec(), shp(b).to_vec());
                let (av, bv) = (val(a), val(b));
                let (ta, tb) = (broadcast_strides(&sa, out_shape), broadcast_strides(&sb, out_shape));
                if let Some(ga) = slot(grads, nodes, a) {
                    match kind {
                        Binary::Add | Binary::Sub => for_each_strided2(out_shape, &ta, &tb, |o, i, _| ga[i] += g[o]),
                        Binary::Mul => for_each_strided2(out_shape, &ta, &tb, |o, i, j| ga[i] += g[o] * bv[j]),
                    }
                }
                if let Some(gb) = slot(grads, nodes, b) {
                    match kind {
                        Binary::Add => for_each_strided2(out_shape, &ta, &tb, |o, _, j| gb[j] += g[o]),
                        Binary::Sub => for_each_strided2(out_shape, &ta, &tb, |o, _, j| gb[j] -= g[o]),
                        Binary::Mul => for_each_strided2(out_shape, &ta, &tb, |o, i, j| gb[j] += g[o] * av[i]),
                    }
                }
            }
            &Op::Scale { a, s } => {
                if let Some(ga) = slot(grads, nodes, a) {
                    ga.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * s);
                }
            }
            &Op::Unary { kind, a } => {
                let x = val(a);
                if let Some(ga) = slot(grads, nodes, a) {
                    let d: fn(f64) -> f64 = match kind {
                        Unary::Gelu => gelu_grad,
                        Unary::Relu => |x| if x > 0.0 { 1.0 } else { 0.0 },
                        Unary::Cos => |x| -x.sin(),
                    };
                    for i in 0..g.len() {
                        ga[i] += g[i] * d(x[i]);
                    }
                }
            }
            &Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), axis);
                if let Some(ga) = slot(grads, nodes, a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *node.value.shape().last().unwrap();
                let rows = xhat.len() / d;
                let gv = val(*gain);
                if let Some(gx) = slot(grads, nodes, *x) {
                    for r in 0..rows {
                        let span = r * d..(r + 1) * d;
                        let gh: Vec<f64> = g[span.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
                        let xh = &xhat[span.clone()];
                        let m1 = gh.iter().sum::<f64>() / d as f64;
                        let m2 = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (gh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
                if let Some(gg) = slot(grads, nodes, *gain) {
                    for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[i % d] += gi * h;
                    }
                }
                if let Some(gb) = slot(grads, nodes, *bias) {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % d] += gi;
                    }
                }
            }
            Op::BatchNorm { x, gain, bias, xhat, rstd, train } => {
                let s = node.value.shape();
                let (n, f) = (s[0], s[1]);
                let l: usize = s[2..].iter().product();
                let gv = val(*gain);
                let feat = |idx: usize| (idx / l) % f;
                if let Some(gx) = slot(grads, nodes, *x) {
                    if *train {
                        let count = (n * l) as f64;
                        let mut m1 = vec![0.0; f];
                        let mut m2 = vec![0.0; f];
                        for idx in 0..g.len() {
                            let c = feat(idx);
                            let gh = g[idx] * gv[c];
                            m1[c] += gh;
                            m2[c] += gh * xhat[idx];
                        }
                        for idx in 0..g.len() {
                            let c = feat(idx);
                            let gh = g[idx] * gv[c];
                            gx[idx] += rstd[c] * (gh - m1[c] / count - xhat[idx] * m2[c] / count);
                        }
                    } else {
                        for idx in 0..g.len() {
                            let c = feat(idx);
                            gx[idx] += g[idx] * gv[c] * rstd[c];
                        }
                    }
                }
                if let Some(gg) = slot(grads, nodes, *gain) {
                    for idx in 0..g.len() {
                        gg[feat(idx)] += g[idx] * xhat[idx];
                    }
                }
                if let Some(gb) = slot(grads, nodes, *bias) {
                    for idx in 0..g.len() {
                        gb[feat(idx)] += g[idx];
                    }
                }
            }
            &Op::Conv1d { x, w, b, dims } => {
                let (xv, wv) = (val(x), val(w));
                let len = dims.len;
                if let Some(gx) = slot(grads, nodes, x) {
                    conv_visit(dims, |nn, co, ci, _, wi, off| {
                        let t0 = (-off).max(0) as usize;
                        let t1 = (len as isize - off.max(0)) as usize;
                        let xo = (nn * dims.cin + ci) * len;
                        let oo = (nn * dims.cout + co) * len;
                        for t in t0..t1 {
                            gx[xo + (t as isize + off) as usize] += wv[wi] * g[oo + t];
                        }
                    });
                }
                if let Some(gw) = slot(grads, nodes, w) {
                    conv_visit(dims, |nn, co, ci, _, wi, off| {
                        let t0 = (-off).max(0) as usize;
                        let t1 = (len as isize - off.max(0)) as usize;
                        let xo = (nn * dims.cin + ci) * len;
                        let oo = (nn * dims.cout + co) * len;
                        let mut s = 0.0;
                        for t in t0..t1 {
                            s += g[oo + t] * xv[xo + (t as isize + off) as usize];
                        }
                        gw[wi] += s;
                    });
                }
                if let Some(b) = b {
                    if let Some(gb) = slot(grads, nodes, b) {
                        for nn in 0..dims.batch {
                            for co in 0..dims.cout {
                                gb[co] += g[(nn * dims.cout + co) * len..(nn * dims.cout + co + 1) * len].iter().sum::<f64>();
                            }
                        }
                    }
                }
            }
            &Op::AvgPool { a, window, stride } => {
                let len = *shp(a).last().unwrap();
                let lout = *node.value.shape().last().unwrap();
                let rows = g.len() / lout;
                let inv = 1.0 / window as f64;
                if let Some(ga) = slot(grads, nodes, a) {
                    for r in 0..rows {
                        for p in 0..lout {
                            let gv = g[r * lout + p] * inv;
                            for t in 0..window {
                                ga[r * len + p * stride + t] += gv;
                            }
                        }
                    }
                }
            }
            &Op::L2Norm { a, axis } => {
                let (outer, n, inner) = split_axis(shp(a), axis);
                let x = val(a);
                let y = node.value.data();
                if let Some(ga) = slot(grads, nodes, a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let yo = y[o * inner + i];
                            if yo == 0.0 {
                                // subgradient at the origin
                                continue;
                            }
                            let s = g[o * inner + i] / yo;
                            for j in 0..n {
                                let idx = o * n * inner + j * inner + i;
                                ga[idx] += s * x[idx];
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let oshape = node.value.shape();
                let total = oshape[*axis];
                let (outer, _, inner) = split_axis(oshape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let e = shp(p)[*axis];
                    if let Some(gp) = slot(grads, nodes, p) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            for (d, s) in gp[o * e * inner..(o + 1) * e * inner].iter_mut().zip(&g[src..src + e * inner]) {
                                *d += s;
                            }
                        }
                    }
                    offset += e;
                }
            }
            &Op::Slice { a, axis, start } => {
                let (outer, n, inner) = split_axis(shp(a), axis);
                let len = node.value.shape()[axis];
                if let Some(ga) = slot(grads, nodes, a) {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for (d, s) in ga[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                            *d += s;
                        }
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(ga) = slot(grads, nodes, a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Permute { a, perm } => {
                let own = strides(shp(*a));
                let s: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for_each_strided(node.value.shape(), &s, |o, i| ga[i] += g[o]);
                }
            }
            &Op::BroadcastTo { a } => {
                let s = broadcast_strides(shp(a), node.value.shape());
                if let Some(ga) = slot(grads, nodes, a) {
                    for_each_strided(node.value.shape(), &s, |o, i| ga[i] += g[o]);
                }
            }
            &Op::SumAxis { a, axis } => {
                let (outer, n, inner) = split_axis(shp(a), axis);
                if let Some(ga) = slot(grads, nodes, a) {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                ga[o * n * inner + j * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            &Op::SumAll { a } => {
                if let Some(ga) = slot(grads, nodes, a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * mask[i];
                    }
                }
            }
            Op::CrossEntropy { logits, labels, weights, probs } => {
                let k = weights.len();
                let b = labels.len();
                if let Some(gl) = slot(grads, nodes, *logits) {
                    for i in 0..b {
                        let s = g[0] * weights[labels[i]] / b as f64;
                        for j in 0..k {
                            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                            gl[i * k + j] += s * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

/// Calls `f(n, co, ci, k, weight_index, offset)` for every kernel tap.
fn conv_visit(d: ConvDims, mut f: impl FnMut(usize, usize, usize, usize, usize, isize)) {
    let cin_g = d.cin / d.groups;
    let cout_g = d.cout / d.groups;
    let pad = (d.k / 2) as isize;
    for n in 0..d.batch {
        for co in 0..d.cout {
            let grp = co / cout_g;
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                for kk in 0..d.k {
                    let wi = (co * cin_g + cl) * d.k + kk;
                    let off = kk as isize - pad;
                    if off.unsigned_abs() >= d.len {
                        continue;
                    }
                    f(n, co, ci, kk, wi, off);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut RngStream) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform(-1.5, 1.5))
    }

    /// Contracts `y` against a fixed random tensor so every output
    /// coordinate contributes a distinct weight to the scalar.
    fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, TensorError> {
        let mut rng = RngStream::new(seed, 99);
        let shape = tape.shape(y).to_vec();
        let w = tape.constant(Tensor::from_fn(&shape, |_| rng.uniform(-1.0, 1.0)));
        let p = tape.mul(y, w)?;
        tape.sum(p)
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let s = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let col = tape.constant(t(&[2, 1], &[7.0, -3.0]));
        let r = tape.matmul(s, col).unwrap();
        assert_eq!(tape.value(r).data(), &[7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(a, -1).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = tape.constant(t(&[2], &[0.0, 2f64.ln()]));
        let s = tape.softmax(b, 0).unwrap();
        assert!((tape.value(s).data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((tape.value(s).data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let c = tape.constant(t(&[2], &[1000.0, 0.0]));
        let s = tape.softmax(c, 0).unwrap();
        assert!((tape.value(s).data()[0] - 1.0).abs() < 1e-12);
        assert!(tape.value(s).data()[1] < 1e-12);
    }

    #[test]
    fn softmax_rejects_infinity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[f64::INFINITY, 0.0]));
        assert!(tape.softmax(a, 0).is_err());
    }

    #[test]
    fn layernorm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2, 2], &[3.0, 3.0, 1.0, -1.0]));
        let y = tape.layernorm(x, g, b, 1e-5).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[..2], &[0.0, 0.0]);
        let expect = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert!((d[2] - expect).abs() < 1e-15 && (d[3] + expect).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2, 2], &[-1.0, 5.0, 1.0, 7.0]));
        let y = tape.batchnorm_eval(x, g, b, &[0.0, 0.0], &[1.0, 1.0], 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 5.0, 1.0, 7.0]);
        let x2 = tape.constant(t(&[2, 1], &[-1.0, 1.0]));
        let g1 = tape.constant(Tensor::ones(&[1]));
        let b1 = tape.constant(Tensor::zeros(&[1]));
        let (y, stats) = tape.batchnorm_train(x2, g1, b1, 1e-5).unwrap();
        let e = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert!((tape.value(y).data()[0] + e).abs() < 1e-15);
        assert_eq!(stats.mean, vec![0.0]);
        assert_eq!(stats.var, vec![1.0]);
        let one = tape.constant(t(&[1, 1], &[1.0]));
        assert!(tape.batchnorm_train(one, g1, b1, 1e-5).is_err());
    }

    #[test]
    fn catalog_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3]));
        let c = tape.cos(z).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 1.0, 1.0]);
        let x = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.avgpool1d(x, 2, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[1.5, 3.5]);
        assert!(tape.avgpool1d(x, 0, 1).is_err());
        assert!(tape.avgpool1d(x, 5, 1).is_err());
        assert!(tape.avgpool1d(x, 2, 0).is_err());
        let mut rng = RngStream::new(1, 1);
        let same = tape.dropout(x, 0.5, &mut rng, false).unwrap();
        assert_eq!(same, x);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.3, -2.0, 5.0]), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn fan_out_doubles_gradient() {
        let x0 = t(&[3], &[0.5, -1.0, 2.0]);
        let grad_of = |twice: bool| {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), true);
            let f = |tape: &mut Tape| {
                let g = tape.gelu(x).unwrap();
                let m = tape.mul(g, x).unwrap();
                tape.sum(m).unwrap()
            };
            let a = f(&mut tape);
            let out = if twice {
                let b = f(&mut tape);
                tape.add(a, b).unwrap()
            } else {
                a
            };
            tape.backward(out).unwrap().take(x).unwrap()
        };
        let once = grad_of(false);
        let twice = grad_of(true);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = RngStream::new(3, 3);
        let x = random(&[2, 4, 7], &mut rng);
        let w = random(&[6, 2, 3], &mut rng);
        let b = random(&[6], &mut rng);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv1d(xv, wv, Some(bv), 2).unwrap();
        for n in 0..2 {
            for co in 0..6 {
                let grp = co / 3;
                for l in 0..7 {
                    let mut s = b.data()[co];
                    for cl in 0..2 {
                        for k in 0..3 {
                            let src = l as isize + k as isize - 1;
                            if (0..7).contains(&src) {
                                s += w.at(&[co, cl, k]) * x.at(&[n, grp * 2 + cl, src as usize]);
                            }
                        }
                    }
                    assert!((tape.value(y).at(&[n, co, l]) - s).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        type Case = (&'static str, Vec<Vec<usize>>, fn(&mut Tape, &[Var]) -> Result<Var, TensorError>);
        let cases: Vec<Case> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
            ("matmul_ta", vec![vec![4, 3], vec![4, 2]], |t, v| t.matmul_t(v[0], v[1], true, false)),
            ("matmul_tb", vec![vec![3, 4], vec![2, 4]], |t, v| t.matmul_t(v[0], v[1], false, true)),
            ("matmul_tt", vec![vec![4, 3], vec![2, 4]], |t, v| t.matmul_t(v[0], v[1], true, true)),
            ("matmul_batched_shared", vec![vec![2, 3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
            ("matmul_batched", vec![vec![2, 3, 4], vec![2, 3, 2]], |t, v| t.matmul_t(v[0], v[1], true, false)),
            ("add_broadcast", vec![vec![2, 3], vec![3]], |t, v| t.add(v[0], v[1])),
            ("sub_broadcast", vec![vec![2, 1], vec![2, 3]], |t, v| t.sub(v[0], v[1])),
            ("mul_broadcast", vec![vec![2, 3, 2], vec![3, 1]], |t, v| t.mul(v[0], v[1])),
            ("scale", vec![vec![5]], |t, v| t.scale(v[0], -0.7)),
            ("gelu", vec![vec![6]], |t, v| t.gelu(v[0])),
            ("relu", vec![vec![6]], |t, v| t.relu(v[0])),
            ("cos", vec![vec![6]], |t, v| t.cos(v[0])),
            ("softmax_last", vec![vec![3, 4]], |t, v| t.softmax(v[0], -1)),
            ("softmax_mid", vec![vec![2, 3, 2]], |t, v| t.softmax(v[0], 1)),
            ("layernorm", vec![vec![3, 4], vec![4], vec![4]], |t, v| t.layernorm(v[0], v[1], v[2], 1e-5)),
            ("batchnorm_train", vec![vec![3, 2, 4], vec![2], vec![2]], |t, v| {
                Ok(t.batchnorm_train(v[0], v[1], v[2], 1e-5)?.0)
            }),
            ("batchnorm_eval", vec![vec![3, 2, 4], vec![2], vec![2]], |t, v| {
                t.batchnorm_eval(v[0], v[1], v[2], &[0.3, -0.2], &[1.5, 0.7], 1e-5)
            }),
            ("conv1d_pointwise", vec![vec![2, 3, 5], vec![4, 3], vec![4]], |t, v| {
                t.conv1d_pointwise(v[0], v[1], Some(v[2]))
            }),
            ("conv1d_depthwise", vec![vec![2, 3, 6], vec![3, 5], vec![3]], |t, v| {
                t.conv1d_depthwise(v[0], v[1], Some(v[2]))
            }),
            ("avgpool1d", vec![vec![2, 7]], |t, v| t.avgpool1d(v[0], 3, 2)),
            ("l2norm", vec![vec![3, 4]], |t, v| t.l2norm(v[0], -1)),
            ("concat", vec![vec![2, 3], vec![2, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
            ("slice", vec![vec![3, 5]], |t, v| t.slice(v[0], 1, 1, 3)),
            ("permute", vec![vec![2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
            ("reshape", vec![vec![2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
            ("broadcast_to", vec![vec![3, 1]], |t, v| t.broadcast_to(v[0], &[2, 3, 4])),
            ("sum_axis", vec![vec![2, 3, 4]], |t, v| t.sum_axis(v[0], 1)),
            ("mean_axis", vec![vec![2, 3]], |t, v| t.mean_axis(v[0], 0)),
            ("dropout_frozen", vec![vec![6]], |t, v| t.dropout_with_mask(v[0], vec![2.0, 0.0, 2.0, 2.0, 0.0, 2.0])),
        ];
        for (name, shapes, op) in cases {
            for draw in 0..20u64 {
                let mut rng = RngStream::new(draw, RngStream::stream_id(name));
                let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
                let r = grad_check(|t, v| { let y = op(t, v)?; probe(t, y, draw) }, &inputs).unwrap();
                assert!(r.max_rel_err < 1e-5, "{name} draw {draw}: {r:?}");
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let loss = tape.weighted_cross_entropy(l, &[0], &[1.0, 1.0]).unwrap();
        assert!((tape.value(loss).item() - 2f64.ln()).abs() < 1e-15);
        let l = tape.constant(t(&[1, 2], &[60.0, -60.0]));
        let loss = tape.weighted_cross_entropy(l, &[0], &[1.0, 1.0]).unwrap();
        assert!(tape.value(loss).item() < 1e-40);
        assert!(tape.weighted_cross_entropy(l, &[2], &[1.0, 1.0]).is_err());

        for draw in 0..20u64 {
            let mut rng = RngStream::new(draw, 5);
            let logits = random(&[4, 3], &mut rng);
            let r = grad_check(|t, v| t.weighted_cross_entropy(v[0], &[0, 2, 1, 2], &[0.5, 2.0, 1.3]), &[logits]).unwrap();
            assert!(r.max_rel_err < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn flops_are_recorded() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[3, 4]));
        let b = tape.constant(Tensor::ones(&[4, 5]));
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.flops(), 2 * 3 * 4 * 5);
    }
}
