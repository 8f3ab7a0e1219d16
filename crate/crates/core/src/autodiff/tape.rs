//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every forward op appends a node holding its output value and enough
//! bookkeeping to run its backward rule. [`Tape::backward`] walks the nodes
//! in exact reverse order of creation, which is a valid topological order
//! because an op can only reference nodes that already exist.
//!
//! Sequence tensors use the layout `[batch, time, channels]`; the time-axis
//! ops (`conv1d`, pooling, `reverse_time`, `downsample`) require rank 3.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Reshape(usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Select {
        x: usize,
        axis: usize,
        index: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    ReverseTime(usize),
    Downsample {
        x: usize,
        stride: usize,
    },
    Conv1d {
        x: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Shared by fixed-window and adaptive max pooling; `argmax[o]` is the
    /// flat input index that produced output `o`.
    Pool {
        x: usize,
        argmax: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    Bce(usize, usize),
    L1(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Lower clamp applied to BCE predictions; the upper clamp is `1 - BCE_EPS`.
pub const BCE_EPS: f64 = 1e-7;

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when `var` does
    /// not influence the loss through a differentiable path.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Reads a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node layout is valid")
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::Mse(a, b) => self.nodes[*a].requires_grad || self.nodes[*b].requires_grad,
            Op::Bce(p, _) => self.nodes[*p].requires_grad,
            Op::Conv1d { x, kernel, .. } => {
                self.nodes[*x].requires_grad || self.nodes[*kernel].requires_grad
            }
            Op::Scale(x, _)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Reshape(x)
            | Op::Slice { x, .. }
            | Op::Select { x, .. }
            | Op::ReverseTime(x)
            | Op::Downsample { x, .. }
            | Op::Pool { x, .. }
            | Op::Sum(x)
            | Op::Mean(x) => self.nodes[*x].requires_grad,
            Op::Concat { xs, .. } | Op::L1(xs) => xs.iter().any(|&x| self.nodes[x].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf holding a copy of `tensor`. Gradients are tracked when
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            op: Op::Leaf,
            requires_grad: tensor.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("constant"));
        }
        Ok(self.leaf(&t))
    }

    // ----- linear algebra and elementwise -----

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * m..(p + 1) * m];
                for (o, &bpj) in row.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        self.push("matmul", vec![n, m], out, Op::MatMul(a.0, b.0))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape != nb.shape {
            return Err(Error::shape(name, &na.shape, &nb.shape));
        }
        let out = na
            .value
            .iter()
            .zip(&nb.value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = na.shape.clone();
        self.push(name, shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Adds a rank-1 `bias` of length `C` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (nx, nb) = (&self.nodes[x.0], &self.nodes[bias.0]);
        let c = *nx.shape.last().expect("tensors have rank >= 1");
        if nb.shape != [c] {
            return Err(Error::shape("add_bias", &nx.shape, &nb.shape));
        }
        let out = nx
            .value
            .chunks(c)
            .flat_map(|row| row.iter().zip(&nb.value).map(|(v, b)| v + b))
            .collect();
        let shape = nx.shape.clone();
        self.push("add_bias", shape, out, Op::AddBias(x.0, bias.0))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let n = &self.nodes[x.0];
        let out = n.value.iter().map(|v| v * factor).collect();
        let shape = n.shape.clone();
        self.push("scale", shape, out, Op::Scale(x.0, factor))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let n = &self.nodes[x.0];
        let out = n.value.iter().map(|&v| f(v)).collect();
        let shape = n.shape.clone();
        self.push(name, shape, out, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x.0))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[x.0];
        if numel(shape) != n.value.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &n.shape, shape));
        }
        let value = n.value.clone();
        self.push("reshape", shape.to_vec(), value, Op::Reshape(x.0))
    }

    // ----- structural -----

    /// Keeps `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let n = &self.nodes[x.0];
        if axis >= n.shape.len() || len == 0 || start + len > n.shape[axis] {
            return Err(Error::shape("slice", &n.shape, &[axis, start, len]));
        }
        let (outer, dim, inner) = split_axis(&n.shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&n.value[base..base + len * inner]);
        }
        let mut shape = n.shape.clone();
        shape[axis] = len;
        self.push(
            "slice",
            shape,
            out,
            Op::Slice {
                x: x.0,
                axis,
                start,
            },
        )
    }

    /// Picks one index of `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let n = &self.nodes[x.0];
        if axis >= n.shape.len() || n.shape.len() < 2 || index >= n.shape[axis] {
            return Err(Error::shape("select", &n.shape, &[axis, index]));
        }
        let (outer, dim, inner) = split_axis(&n.shape, axis);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * dim + index) * inner;
            out.extend_from_slice(&n.value[base..base + inner]);
        }
        let mut shape = n.shape.clone();
        shape.remove(axis);
        self.push(
            "select",
            shape,
            out,
            Op::Select {
                x: x.0,
                axis,
                index,
            },
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::EmptyInput("concat of zero tensors".into()))?;
        let base_shape = self.nodes[first.0].shape.clone();
        if axis >= base_shape.len() {
            return Err(Error::shape("concat", &base_shape, &[axis]));
        }
        let mut total = 0;
        for x in xs {
            let s = &self.nodes[x.0].shape;
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in xs {
                let n = &self.nodes[x.0];
                let chunk = n.shape[axis] * inner;
                out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let op = Op::Concat {
            xs: xs.iter().map(|x| x.0).collect(),
            axis,
        };
        self.push("concat", shape, out, op)
    }

    /// Stacks equally shaped tensors along a new `axis`.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(xs.len());
        for &x in xs {
            let mut shape = self.nodes[x.0].shape.clone();
            if axis > shape.len() {
                return Err(Error::shape("stack", &shape, &[axis]));
            }
            shape.insert(axis, 1);
            expanded.push(self.reshape(x, &shape)?);
        }
        self.concat(&expanded, axis)
    }

    fn require_seq(&self, name: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 3 {
            return Err(Error::shape(name, s, &[0, 0, 0]));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Reverses the time axis of a `[B, L, C]` sequence.
    pub fn reverse_time(&mut self, x: Var) -> Result<Var> {
        let (b, l, c) = self.require_seq("reverse_time", x)?;
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(v.len());
        for bi in 0..b {
            for t in (0..l).rev() {
                let base = (bi * l + t) * c;
                out.extend_from_slice(&v[base..base + c]);
            }
        }
        self.push("reverse_time", vec![b, l, c], out, Op::ReverseTime(x.0))
    }

    /// Keeps time steps `0, stride, 2*stride, ...`.
    pub fn downsample(&mut self, x: Var, stride: usize) -> Result<Var> {
        let (b, l, c) = self.require_seq("downsample", x)?;
        if stride == 0 {
            return Err(Error::Parameter("downsample stride must be >= 1".into()));
        }
        let lo = l.div_ceil(stride);
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(b * lo * c);
        for bi in 0..b {
            for t in (0..l).step_by(stride) {
                let base = (bi * l + t) * c;
                out.extend_from_slice(&v[base..base + c]);
            }
        }
        self.push(
            "downsample",
            vec![b, lo, c],
            out,
            Op::Downsample { x: x.0, stride },
        )
    }

    /// 1-D convolution over time with zero padding.
    ///
    /// `x` is `[B, L, C_in]`, `kernel` is `[K, C_in, C_out]`; the output is
    /// `[B, (L + 2*padding - K) / stride + 1, C_out]`. No bias is applied.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (b, l, cin) = self.require_seq("conv1d", x)?;
        let ks = &self.nodes[kernel.0].shape;
        if ks.len() != 3 || ks[1] != cin {
            return Err(Error::shape("conv1d", &self.nodes[x.0].shape, ks));
        }
        let (k, cout) = (ks[0], ks[2]);
        if stride == 0 {
            return Err(Error::Parameter("conv1d stride must be >= 1".into()));
        }
        if l + 2 * padding < k {
            return Err(Error::shape("conv1d", &self.nodes[x.0].shape, ks));
        }
        let lo = (l + 2 * padding - k) / stride + 1;
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
        let mut out = vec![0.0; b * lo * cout];
        for bi in 0..b {
            for t in 0..lo {
                let orow = &mut out[(bi * lo + t) * cout..(bi * lo + t + 1) * cout];
                for kk in 0..k {
                    let src = (t * stride + kk) as isize - padding as isize;
                    if src < 0 || src as usize >= l {
                        continue;
                    }
                    let xrow =
                        &xv[(bi * l + src as usize) * cin..(bi * l + src as usize + 1) * cin];
                    for (ci, &xval) in xrow.iter().enumerate() {
                        let wrow = &wv[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                        for (o, &w) in orow.iter_mut().zip(wrow) {
                            *o += xval * w;
                        }
                    }
                }
            }
        }
        let op = Op::Conv1d {
            x: x.0,
            kernel: kernel.0,
            stride,
            padding,
        };
        self.push("conv1d", vec![b, lo, cout], out, op)
    }

    fn pool_windows(
        &mut self,
        name: &'static str,
        x: Var,
        windows: &[(usize, usize)],
    ) -> Result<Var> {
        let (b, l, c) = self.require_seq(name, x)?;
        let lo = windows.len();
        let v = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(b * lo * c);
        let mut argmax = Vec::with_capacity(b * lo * c);
        for bi in 0..b {
            for &(start, end) in windows {
                for ci in 0..c {
                    let mut best = (bi * l + start) * c + ci;
                    for t in start + 1..end {
                        let idx = (bi * l + t) * c + ci;
                        // strict comparison keeps the lowest index on ties
                        if v[idx] > v[best] {
                            best = idx;
                        }
                    }
                    out.push(v[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(name, vec![b, lo, c], out, Op::Pool { x: x.0, argmax })
    }

    /// Max pooling over time with a fixed window and stride.
    pub fn maxpool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (_, l, _) = self.require_seq("maxpool1d", x)?;
        if window == 0 || stride == 0 {
            return Err(Error::Parameter(
                "maxpool1d window and stride must be >= 1".into(),
            ));
        }
        if window > l {
            return Err(Error::shape("maxpool1d", self.shape(x), &[window]));
        }
        let lo = (l - window) / stride + 1;
        let windows: Vec<_> = (0..lo).map(|i| (i * stride, i * stride + window)).collect();
        self.pool_windows("maxpool1d", x, &windows)
    }

    /// Max pooling over time to exactly `out_len` steps. Window `i` covers
    /// `[floor(i*L/out_len), ceil((i+1)*L/out_len))`.
    pub fn adaptive_maxpool1d(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let (_, l, _) = self.require_seq("adaptive_maxpool1d", x)?;
        if out_len == 0 || out_len > l {
            return Err(Error::shape(
                "adaptive_maxpool1d",
                self.shape(x),
                &[out_len],
            ));
        }
        let windows: Vec<_> = (0..out_len)
            .map(|i| (i * l / out_len, ((i + 1) * l).div_ceil(out_len)))
            .collect();
        self.pool_windows("adaptive_maxpool1d", x, &windows)
    }

    // ----- reductions and losses -----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![1], vec![m], Op::Mean(x.0))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (np, nt) = (&self.nodes[pred.0], &self.nodes[target.0]);
        if np.shape != nt.shape {
            return Err(Error::shape("mse", &np.shape, &nt.shape));
        }
        let n = np.value.len() as f64;
        let loss = np
            .value
            .iter()
            .zip(&nt.value)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        self.push("mse", vec![1], vec![loss], Op::Mse(pred.0, target.0))
    }

    /// Binary cross entropy, `-mean[y ln p + (1-y) ln(1-p)]`, with `p` clamped
    /// to `[BCE_EPS, 1 - BCE_EPS]`. The target is treated as a constant.
    pub fn bce(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (np, nt) = (&self.nodes[pred.0], &self.nodes[target.0]);
        if np.shape != nt.shape {
            return Err(Error::shape("bce", &np.shape, &nt.shape));
        }
        if nt.value.iter().any(|y| !(0.0..=1.0).contains(y)) {
            return Err(Error::Domain("bce targets must lie in [0, 1]".into()));
        }
        let n = np.value.len() as f64;
        let loss = -np
            .value
            .iter()
            .zip(&nt.value)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                y * p.ln() + (1.0 - y) * (1.0 - p).ln()
            })
            .sum::<f64>()
            / n;
        self.push("bce", vec![1], vec![loss], Op::Bce(pred.0, target.0))
    }

    /// Sum of absolute values across all of `xs`.
    pub fn l1_norm(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Domain("l1_norm of an empty parameter list".into()));
        }
        let total = xs
            .iter()
            .map(|x| self.nodes[x.0].value.iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        self.push(
            "l1_norm",
            vec![1],
            vec![total],
            Op::L1(xs.iter().map(|x| x.0).collect()),
        )
    }

    // ----- backward -----

    /// Back-propagates from the scalar `loss`. A tape can be differentiated
    /// only once; record a fresh forward pass for the next gradient.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape; re-run the forward pass".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Drop grads of nodes that do not require them (e.g. constants).
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], idx: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[idx].requires_grad {
            return None;
        }
        let len = self.nodes[idx].value.len();
        Some(grads[idx].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    let bv = &self.nodes[*b].value;
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let brow = &bv[p * m..(p + 1) * m];
                            ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let av = &self.nodes[*a].value;
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let arp = av[r * k + p];
                            if arp == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += arp * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (idx, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(ga) = self.acc(grads, idx) {
                        ga.iter_mut().zip(g).for_each(|(o, v)| *o += sign * v);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (idx, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(ga) = self.acc(grads, idx) {
                        ga.iter_mut().zip(g).for_each(|(o, v)| *o += sign * v);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let bv = &self.nodes[*b].value;
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * bv;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let av = &self.nodes[*a].value;
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * av;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += f * v);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gv), y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *o += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gv), y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *o += gv * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gv), y) in gx.iter_mut().zip(g).zip(&node.value) {
                        if *y > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, dim, inner) = split_axis(&self.nodes[*x].shape, *axis);
                let len = node.shape[*axis];
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        gx[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Select { x, axis, index } => {
                let (outer, dim, inner) = split_axis(&self.nodes[*x].shape, *axis);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let base = (o * dim + index) * inner;
                        gx[base..base + inner]
                            .iter_mut()
                            .zip(&g[o * inner..(o + 1) * inner])
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.nodes[x].shape[*axis];
                    if let Some(gx) = self.acc(grads, x) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            gx[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                                .for_each(|(d, v)| *d += v);
                        }
                    }
                    offset += len;
                }
            }
            Op::ReverseTime(x) => {
                let (b, l, c) = (node.shape[0], node.shape[1], node.shape[2]);
                if let Some(gx) = self.acc(grads, *x) {
                    for bi in 0..b {
                        for t in 0..l {
                            let dst = (bi * l + (l - 1 - t)) * c;
                            let src = (bi * l + t) * c;
                            gx[dst..dst + c]
                                .iter_mut()
                                .zip(&g[src..src + c])
                                .for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
            Op::Downsample { x, stride } => {
                let l = self.nodes[*x].shape[1];
                let (b, lo, c) = (node.shape[0], node.shape[1], node.shape[2]);
                if let Some(gx) = self.acc(grads, *x) {
                    for bi in 0..b {
                        for t in 0..lo {
                            let dst = (bi * l + t * stride) * c;
                            let src = (bi * lo + t) * c;
                            gx[dst..dst + c]
                                .iter_mut()
                                .zip(&g[src..src + c])
                                .for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                kernel,
                stride,
                padding,
            } => {
                let xs = &self.nodes[*x].shape;
                let ks = &self.nodes[*kernel].shape;
                let (b, l, cin) = (xs[0], xs[1], xs[2]);
                let (k, cout) = (ks[0], ks[2]);
                let lo = node.shape[1];
                let taps = |t: usize, kk: usize| -> Option<usize> {
                    let src = (t * stride + kk) as isize - *padding as isize;
                    (src >= 0 && (src as usize) < l).then_some(src as usize)
                };
                if let Some(gx) = self.acc(grads, *x) {
                    let wv = &self.nodes[*kernel].value;
                    for bi in 0..b {
                        for t in 0..lo {
                            let grow = &g[(bi * lo + t) * cout..(bi * lo + t + 1) * cout];
                            for kk in 0..k {
                                let Some(src) = taps(t, kk) else { continue };
                                for ci in 0..cin {
                                    let wrow =
                                        &wv[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                                    gx[(bi * l + src) * cin + ci] +=
                                        grow.iter().zip(wrow).map(|(a, w)| a * w).sum::<f64>();
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *kernel) {
                    let xv = &self.nodes[*x].value;
                    for bi in 0..b {
                        for t in 0..lo {
                            let grow = &g[(bi * lo + t) * cout..(bi * lo + t + 1) * cout];
                            for kk in 0..k {
                                let Some(src) = taps(t, kk) else { continue };
                                for ci in 0..cin {
                                    let xval = xv[(bi * l + src) * cin + ci];
                                    if xval == 0.0 {
                                        continue;
                                    }
                                    let wrow =
                                        &mut gw[(kk * cin + ci) * cout..(kk * cin + ci + 1) * cout];
                                    wrow.iter_mut()
                                        .zip(grow)
                                        .for_each(|(d, gv)| *d += xval * gv);
                                }
                            }
                        }
                    }
                }
            }
            Op::Pool { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (&src, gv) in argmax.iter().zip(g) {
                        gx[src] += gv;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.len() as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0] / n);
                }
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (&self.nodes[*p].value, &self.nodes[*t].value);
                let scale = 2.0 * g[0] / pv.len() as f64;
                if let Some(gp) = self.acc(grads, *p) {
                    for ((o, a), b) in gp.iter_mut().zip(pv).zip(tv) {
                        *o += scale * (a - b);
                    }
                }
                if let Some(gt) = self.acc(grads, *t) {
                    for ((o, a), b) in gt.iter_mut().zip(pv).zip(tv) {
                        *o -= scale * (a - b);
                    }
                }
            }
            Op::Bce(p, t) => {
                let (pv, tv) = (&self.nodes[*p].value, &self.nodes[*t].value);
                let n = pv.len() as f64;
                if let Some(gp) = self.acc(grads, *p) {
                    for ((o, &pr), &y) in gp.iter_mut().zip(pv).zip(tv) {
                        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&pr) {
                            continue;
                        }
                        *o += g[0] * (-y / pr + (1.0 - y) / (1.0 - pr)) / n;
                    }
                }
            }
            Op::L1(xs) => {
                for &x in xs {
                    if let Some(gx) = self.acc(grads, x) {
                        for (o, v) in gx.iter_mut().zip(&self.nodes[x].value) {
                            if *v > 0.0 {
                                *o += g[0];
                            } else if *v < 0.0 {
                                *o -= g[0];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(tape: &mut Tape, values: &[f64]) -> Var {
        tape.constant(&[1, values.len(), 1], values.to_vec())
            .unwrap()
    }

    #[test]
    fn downsample_by_two_halves_length() {
        let mut tape = Tape::new();
        let x = seq(&mut tape, &[0., 1., 2., 3., 4., 5., 6., 7.]);
        let y = tape.downsample(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 1]);
        assert_eq!(tape.value(y), &[0., 2., 4., 6.]);
    }

    #[test]
    fn maxpool_picks_window_maxima() {
        let mut tape = Tape::new();
        let x = seq(&mut tape, &[1., 3., 2., 5.]);
        let y = tape.maxpool1d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y), &[3., 5.]);
    }

    #[test]
    fn conv1d_valid_length() {
        let mut tape = Tape::new();
        let x = seq(&mut tape, &[1.0; 10]);
        let k = tape.constant(&[3, 1, 1], vec![1.0; 3]).unwrap();
        let y = tape.conv1d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 8, 1]);
        assert!(tape.value(y).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn conv1d_with_padding_and_stride() {
        let mut tape = Tape::new();
        let x = seq(&mut tape, &[1., 2., 3., 4., 5.]);
        let k = tape.constant(&[3, 1, 1], vec![1., 0., -1.]).unwrap();
        let y = tape.conv1d(x, k, 2, 1).unwrap();
        // positions -1..1, 1..3, 3..5 with zero padding
        assert_eq!(tape.shape(y), &[1, 3, 1]);
        assert_eq!(tape.value(y), &[0. - 2., 2. - 4., 4. - 0.]);
    }

    #[test]
    fn maxpool_ties_route_to_lowest_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            &Tensor::new(vec![1, 4, 1], vec![2., 2., 7., 7.])
                .unwrap()
                .with_grad(),
        );
        let y = tape.maxpool1d(x, 2, 2).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1., 0., 1., 0.]);
    }

    #[test]
    fn adaptive_pool_covers_all_steps() {
        let mut tape = Tape::new();
        let x = seq(&mut tape, &[1., 9., 2., 3., 8., 4., 0.]);
        let y = tape.adaptive_maxpool1d(x, 3).unwrap();
        // windows [0,3), [2,5), [4,7)
        assert_eq!(tape.value(y), &[9., 8., 8.]);
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let data = vec![0.5, -1.5, 2.0];
        let x = tape.leaf(&Tensor::new(vec![3], data.clone()).unwrap().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let grads = tape.backward(s).unwrap();
        let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(x).unwrap(), expected.as_slice());
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let zero = tape.scale(x, 0.0).unwrap();
        let s = tape.sum(zero).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn second_backward_is_a_tape_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Tape(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Tape(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        match tape.matmul(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(&[1], vec![f64::MAX]).unwrap();
        assert!(matches!(
            tape.scale(a, 10.0),
            Err(Error::NonFinite("scale"))
        ));
    }

    #[test]
    fn losses_match_definitions() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let m = tape.mse(x, x).unwrap();
        assert_eq!(tape.scalar(m), 0.0);

        for y in [0.0, 0.3, 1.0] {
            let p = tape.constant(&[1], vec![0.5]).unwrap();
            let t = tape.constant(&[1], vec![y]).unwrap();
            let l = tape.bce(p, t).unwrap();
            assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
        }

        let z = tape.constant(&[4], vec![0.0; 4]).unwrap();
        let l1 = tape.l1_norm(&[z]).unwrap();
        assert_eq!(tape.scalar(l1), 0.0);
        assert!(matches!(tape.l1_norm(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn bce_clamps_extreme_predictions() {
        let mut tape = Tape::new();
        let p = tape.constant(&[2], vec![0.0, 1.0]).unwrap();
        let t = tape.constant(&[2], vec![1.0, 0.0]).unwrap();
        let l = tape.bce(p, t).unwrap();
        assert!((tape.scalar(l) + BCE_EPS.ln()).abs() < 1e-9);
    }
}
