//! Reverse-mode automatic differentiation on an arena tape.
//!
//! A [`Graph`] owns every intermediate value produced during one forward
//! pass. Nodes are appended in execution order, so the arena is already a
//! topological order and [`Graph::backward`] simply walks it in reverse.
//! Gradients accumulate into per-node buffers; parameters pull their
//! gradients out with [`Graph::grad`] after the pass.
//!
//! Any operation that produces a NaN or infinity poisons the graph: the value
//! is kept for inspection but `backward` and [`Graph::status`] return
//! [`Error::NonFinite`].

mod backward;

use crate::error::{Error, Result};
use crate::flops;
use crate::kernels::{self, ConvGeom};
use crate::linalg::gemm;
use crate::par;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics for batch normalisation.
#[derive(Debug)]
pub struct BnStats<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
    pub momentum: f64,
    pub eps: f64,
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, rows: usize, inner: usize, cols: usize },
    Bmm { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { a: Var, bias: Var },
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax { a: Var, cols: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    PixelPack { a: Var, batch: usize, h: usize, w: usize, d: usize, s: usize },
    Upsample { a: Var, h: usize, w: usize, d: usize, s: usize },
    BroadcastRows { a: Var, count: usize },
    DyConv { x: Var, w: Var, geom: ConvGeom },
    MaxPool { a: Var, argmax: Vec<u32> },
    Embedding { table: Var, ids: Vec<usize> },
    Stack { parts: Vec<Var> },
    MaskedMean { a: Var, mask: Vec<bool>, counts: Vec<usize> },
    MaskRows { a: Var, mask: Vec<bool> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::PixelPack { .. } => "pixel_pack",
            Op::Upsample { .. } => "upsample",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::DyConv { .. } => "dyconv",
            Op::MaxPool { .. } => "maxpool",
            Op::Embedding { .. } => "embedding",
            Op::Stack { .. } => "stack",
            Op::MaskedMean { .. } => "masked_mean",
            Op::MaskRows { .. } => "mask_rows",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBias { a, bias } => vec![*a, *bias],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Reshape(a)
            | Op::Sum(a) => vec![*a],
            Op::Softmax { a, .. }
            | Op::Permute { a, .. }
            | Op::PixelPack { a, .. }
            | Op::Upsample { a, .. }
            | Op::BroadcastRows { a, .. }
            | Op::MaxPool { a, .. }
            | Op::MaskedMean { a, .. }
            | Op::MaskRows { a, .. } => vec![*a],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::DyConv { x, w, .. } => vec![*x, *w],
            Op::Embedding { table, .. } => vec![*table],
            Op::Stack { parts } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

pub(crate) struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// The tape. Single-threaded; kernels inside an op may still fan out.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    poisoned: Option<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            poisoned: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), true, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node invariant")
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let n = &self.nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.shape.clone(), g.clone()).expect("node invariant"))
    }

    pub fn grad_slice(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Active branch of every piecewise op on the tape: relu input signs and
    /// maxpool winners. Two evaluations with equal patterns lie on the same
    /// smooth piece.
    pub fn branch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.value(*a).iter().map(|&v| u32::from(v > T::zero()))),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Err if any recorded value is NaN/inf.
    pub fn status(&self) -> Result<()> {
        match &self.poisoned {
            Some(op) => Err(Error::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, needs_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.poisoned.is_none() && !T::all_finite(&value) {
            self.poisoned = Some(format!("{} (node {})", op.name(), self.nodes.len()));
        }
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        let needs = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(shape, value, needs, op)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// `[..., p] x [p, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let inner = sb[0];
        let cols = sb[1];
        let rows = self.nodes[a.0].value.len() / inner.max(1);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = cols;
        let mut out = vec![T::zero(); rows * cols];
        gemm(false, false, rows, cols, inner, self.value(a), self.value(b), false, &mut out);
        flops::record(rows * inner * cols);
        Ok(self.derived(shape, out, Op::MatMul { a, b, rows, inner, cols }))
    }

    /// Batched product of rank-3 operands, optionally transposing the last two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::shape(format!("bmm inner dims: {sa:?} x {sb:?} (ta={ta}, tb={tb})")));
        }
        let batch = sa[0];
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            par::for_each_chunk(&mut out, m * n, |i, c| {
                gemm(ta, tb, m, n, k, &av[i * m * k..][..m * k], &bv[i * k * n..][..k * n], false, c);
            });
        }
        flops::record(batch * m * k * n);
        Ok(self.derived(vec![batch, m, n], out, Op::Bmm { a, b, ta, tb, batch, m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = vec![T::zero(); self.value(a).len()];
        par::zip_into(self.value(a), self.value(b), &mut out, |&x, &y| x + y);
        Ok(self.derived(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let mut out = vec![T::zero(); self.value(a).len()];
        par::zip_into(self.value(a), self.value(b), &mut out, |&x, &y| x - y);
        Ok(self.derived(self.shape(a).to_vec(), out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = vec![T::zero(); self.value(a).len()];
        par::zip_into(self.value(a), self.value(b), &mut out, |&x, &y| x * y);
        Ok(self.derived(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    /// Adds a `[n]` vector to every row of a `[..., n]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(Error::shape(format!(
                "add_bias: {:?} + {:?}",
                self.shape(a),
                self.shape(bias)
            )));
        }
        let bv = self.value(bias).to_vec();
        let mut out = self.value(a).to_vec();
        par::for_each_chunk(&mut out, n, |_, row| {
            row.iter_mut().zip(&bv).for_each(|(o, &b)| *o += b);
        });
        Ok(self.derived(self.shape(a).to_vec(), out, Op::AddBias { a, bias }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let mut out = vec![T::zero(); self.value(a).len()];
        par::map_into(self.value(a), &mut out, |&x| x * c);
        self.derived(self.shape(a).to_vec(), out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = vec![T::zero(); self.value(a).len()];
        par::map_into(self.value(a), &mut out, |&x| if x > T::zero() { x } else { T::zero() });
        self.derived(self.shape(a).to_vec(), out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut out = vec![T::zero(); self.value(a).len()];
        par::map_into(self.value(a), &mut out, |&x| T::one() / (T::one() + (-x).exp()));
        self.derived(self.shape(a).to_vec(), out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = vec![T::zero(); self.value(a).len()];
        par::map_into(self.value(a), &mut out, |&x| x.tanh());
        self.derived(self.shape(a).to_vec(), out, Op::Tanh(a))
    }

    /// Softmax over the last axis. `mask`, when given, is `[groups, n]`
    /// (row-major); consecutive blocks of rows share one mask row and masked
    /// entries are excluded (logit treated as -inf).
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("softmax of a scalar"))?;
        if n == 0 {
            return Err(Error::shape("softmax over an empty axis"));
        }
        let rows = self.value(a).len() / n;
        let mask = match mask {
            None => None,
            Some(m) => {
                if m.len() % n != 0 || m.is_empty() || rows % (m.len() / n) != 0 {
                    return Err(Error::shape(format!(
                        "softmax mask of length {} does not tile {rows} rows of width {n}",
                        m.len()
                    )));
                }
                if m.chunks(n).any(|row| !row.iter().any(|&k| k)) {
                    return Err(Error::Input("softmax row with every entry masked".into()));
                }
                Some((m, rows / (m.len() / n)))
            }
        };
        let mut out = vec![T::zero(); rows * n];
        kernels::softmax_rows(n, self.value(a), mask, &mut out);
        Ok(self.derived(shape, out, Op::Softmax { a, cols: n }))
    }

    /// Batch normalisation over all leading axes of a `[..., d]` tensor.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_, T>,
        train: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("batch_norm of a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] || stats.mean.len() != d || stats.var.len() != d {
            return Err(Error::shape(format!("batch_norm: channel count mismatch for {shape:?}")));
        }
        let rows = self.value(x).len() / d;
        if rows == 0 {
            return Err(Error::shape("batch_norm over zero rows"));
        }
        let (mean, inv_std): (Vec<f64>, Vec<f64>) = if train {
            let (mean, var) = kernels::channel_stats(rows, d, self.value(x));
            let m = stats.momentum;
            let unbias = if rows > 1 { rows as f64 / (rows as f64 - 1.0) } else { 1.0 };
            for c in 0..d {
                stats.mean[c] = T::from_f64_lossy((1.0 - m) * stats.mean[c].as_f64() + m * mean[c]);
                stats.var[c] =
                    T::from_f64_lossy((1.0 - m) * stats.var[c].as_f64() + m * var[c] * unbias);
            }
            let inv = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
            (mean, inv)
        } else {
            let mean = stats.mean.iter().map(|v| v.as_f64()).collect();
            let inv = stats.var.iter().map(|v| 1.0 / (v.as_f64() + stats.eps).sqrt()).collect();
            (mean, inv)
        };
        let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64_lossy(v)).collect();
        let inv_t: Vec<T> = inv_std.iter().map(|&v| T::from_f64_lossy(v)).collect();
        let g = self.value(gamma).to_vec();
        let b = self.value(beta).to_vec();
        let mut xhat = vec![T::zero(); rows * d];
        let mut out = vec![T::zero(); rows * d];
        {
            let xv = self.value(x);
            par::for_each_chunk(&mut xhat, d, |r, row| {
                let xr = &xv[r * d..][..d];
                for c in 0..d {
                    row[c] = (xr[c] - mean_t[c]) * inv_t[c];
                }
            });
            par::for_each_chunk(&mut out, d, |r, row| {
                let xr = &xhat[r * d..][..d];
                for c in 0..d {
                    row[c] = g[c] * xr[c] + b[c];
                }
            });
        }
        Ok(self.derived(shape, out, Op::BatchNorm { x, gamma, beta, xhat, inv_std: inv_t, train }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape(format!("reshape {:?} -> {shape:?}", self.shape(a))));
        }
        let v = self.value(a).to_vec();
        Ok(self.derived(shape.to_vec(), v, Op::Reshape(a)))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.value(a), &shape, perm);
        Ok(self.derived(out_shape, out, Op::Permute { a, perm: perm.to_vec() }))
    }

    /// `[B, h, w, d] -> [B, (h/s)(w/s), s*s*d]`.
    pub fn pixel_pack(&mut self, a: Var, s: usize) -> Result<Var> {
        let [batch, h, w, d] = rank4(self.shape(a), "pixel_pack")?;
        let out = kernels::pixel_pack(batch, h, w, d, s, self.value(a))?;
        let n = (h / s) * (w / s);
        Ok(self.derived(vec![batch, n, s * s * d], out, Op::PixelPack { a, batch, h, w, d, s }))
    }

    /// `[B, (h/s)(w/s), d] -> [B, h*w, d]` by replicating each row over its cell.
    pub fn upsample_cells(&mut self, a: Var, s: usize, h: usize, w: usize) -> Result<Var> {
        kernels::check_packing(h, w, s)?;
        let shape = self.shape(a).to_vec();
        let n = (h / s) * (w / s);
        if shape.len() != 3 || shape[1] != n {
            return Err(Error::shape(format!(
                "upsample_cells: {shape:?} is not [B, {n}, d] for {h}x{w} with s={s}"
            )));
        }
        let (batch, d) = (shape[0], shape[2]);
        let mut out = vec![T::zero(); batch * h * w * d];
        kernels::upsample_cells(h, w, d, s, self.value(a), &mut out);
        Ok(self.derived(vec![batch, h * w, d], out, Op::Upsample { a, h, w, d, s }))
    }

    /// `[B, d] -> [B, count, d]`.
    pub fn broadcast_rows(&mut self, a: Var, count: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(format!("broadcast_rows expects [B, d], got {shape:?}")));
        }
        let d = shape[1];
        let src = self.value(a).to_vec();
        let mut out = vec![T::zero(); shape[0] * count * d];
        par::for_each_chunk(&mut out, d, |r, row| {
            let b = r / count;
            row.copy_from_slice(&src[b * d..(b + 1) * d]);
        });
        Ok(self.derived(vec![shape[0], count, d], out, Op::BroadcastRows { a, count }))
    }

    /// Dynamic depth-wise convolution of `x: [B,h,w,d]` with per-position
    /// kernels `w: [B,h,w,k,k,g]`.
    pub fn dyconv(&mut self, x: Var, w: Var) -> Result<Var> {
        let [batch, h, wd, d] = rank4(self.shape(x), "dyconv input")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 6 || ws[0] != batch || ws[1] != h || ws[2] != wd || ws[3] != ws[4] {
            return Err(Error::shape(format!(
                "dyconv kernels {ws:?} do not match input {:?}",
                self.shape(x)
            )));
        }
        let geom = ConvGeom { batch, height: h, width: wd, channels: d, kernel: ws[3], groups: ws[5] };
        geom.validate()?;
        let mut out = vec![T::zero(); geom.feature_len()];
        kernels::dyconv_forward(geom, self.value(x), self.value(w), &mut out);
        flops::record(geom.macs());
        Ok(self.derived(vec![batch, h, wd, d], out, Op::DyConv { x, w, geom }))
    }

    pub fn maxpool2(&mut self, a: Var) -> Result<Var> {
        let [batch, h, w, d] = rank4(self.shape(a), "maxpool2")?;
        let (out, argmax) = kernels::maxpool2(batch, h, w, d, self.value(a))?;
        Ok(self.derived(vec![batch, h / 2, w / 2, d], out, Op::MaxPool { a, argmax }))
    }

    /// Gathers rows of a `[V, e]` table: output `[ids.len(), e]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape(format!("embedding table must be [V, e], got {ts:?}")));
        }
        let (v, e) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {v}")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&tv[i * e..(i + 1) * e]);
        }
        Ok(self.derived(vec![ids.len(), e], out, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Stacks `l` tensors of shape `[B, d]` into `[B, l, d]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("stack of nothing"))?;
        let s = self.shape(*first).to_vec();
        if s.len() != 2 || parts.iter().any(|p| self.shape(*p) != s.as_slice()) {
            return Err(Error::shape("stack expects equal [B, d] parts"));
        }
        let (b, d, l) = (s[0], s[1], parts.len());
        let mut out = vec![T::zero(); b * l * d];
        for (t, p) in parts.iter().enumerate() {
            let pv = self.value(*p);
            for bi in 0..b {
                out[(bi * l + t) * d..][..d].copy_from_slice(&pv[bi * d..(bi + 1) * d]);
            }
        }
        Ok(self.derived(vec![b, l, d], out, Op::Stack { parts: parts.to_vec() }))
    }

    fn check_row_mask(&self, a: Var, mask: &[bool], what: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape(a);
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return Err(Error::shape(format!(
                "{what}: mask of {} does not match {s:?}",
                mask.len()
            )));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Mean over the unmasked rows of each `[l, d]` slab: `[B, l, d] -> [B, d]`.
    pub fn masked_mean(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (b, l, d) = self.check_row_mask(a, mask, "masked_mean")?;
        let counts: Vec<usize> = mask.chunks(l).map(|m| m.iter().filter(|&&k| k).count()).collect();
        if counts.contains(&0) {
            return Err(Error::Input("masked_mean over a fully padded sequence".into()));
        }
        let av = self.value(a);
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for t in 0..l {
                if mask[bi * l + t] {
                    for (ov, &v) in o.iter_mut().zip(&av[(bi * l + t) * d..][..d]) {
                        *ov += v;
                    }
                }
            }
            let c = T::from_usize_lossy(counts[bi]);
            o.iter_mut().for_each(|v| *v /= c);
        }
        Ok(self.derived(vec![b, d], out, Op::MaskedMean { a, mask: mask.to_vec(), counts }))
    }

    /// Zeroes the masked-out rows of a `[B, l, d]` tensor.
    pub fn mask_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (_, _, d) = self.check_row_mask(a, mask, "mask_rows")?;
        let mut out = self.value(a).to_vec();
        for (row, &keep) in out.chunks_mut(d).zip(mask) {
            if !keep {
                row.iter_mut().for_each(|v| *v = T::zero());
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, out, Op::MaskRows { a, mask: mask.to_vec() }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().copied().sum();
        self.derived(vec![], vec![s], Op::Sum(a))
    }

    /// Mean softmax cross-entropy of `[B, n]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(Error::shape(format!(
                "cross_entropy: logits {s:?} vs {} targets",
                targets.len()
            )));
        }
        let (b, n) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Input(format!("target class {t} outside {n} classes")));
        }
        let mut probs = vec![T::zero(); b * n];
        kernels::softmax_rows(n, self.value(logits), None, &mut probs);
        // log-sum-exp form for the loss itself
        let lv = self.value(logits);
        let mut loss = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * n..(r + 1) * n];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse = mx + row.iter().map(|v| (v.as_f64() - mx).exp()).sum::<f64>().ln();
            loss += lse - row[t].as_f64();
        }
        let loss = T::from_f64_lossy(loss / b as f64);
        Ok(self.derived(vec![], vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }
}

fn rank4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(format!("{what} expects [B, h, w, d], got {shape:?}"))),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut rank = out_shape.len();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return out;
    }
    // keep the innermost axis as a contiguous run when it does not move
    let run = if rank > 0 && perm[rank - 1] == rank - 1 {
        rank -= 1;
        shape[rank]
    } else {
        1
    };
    let mut idx = vec![0usize; rank];
    loop {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.extend_from_slice(&src[off..off + run]);
        let mut ax = rank;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
