//! Reverse-mode autodiff over an append-only node list.
//!
//! Every op evaluates eagerly and records enough to produce its
//! vector-Jacobian product. When a [`Profiler`] is attached, each op also
//! charges its counters and updates the activation ledger according to the
//! accounting model described in [`crate::profile`]:
//!
//! | op | accesses | sums | mults |
//! |----|----------|------|-------|
//! | `matmul`, `matmul_t` (m×p·p×n) | 2mpn | mpn | mpn |
//! | `matmul_add` (acc + m×p·p×n) | 2mpn | mpn + mn | mpn |
//! | `add`, `sub` (m×n) | mn | mn | 0 |
//! | `add_fused` (m×n) | 0 | mn | 0 |
//! | `scale` (m×n) | 0 | 0 | mn |
//! | `softmax` (m×n) | 2mn | mn | 2mn |
//! | `layer_norm` (m×n) | 2mn + 2n | mn | mn |
//! | `gather` (n ids, width w) | n + nw | 0 | 0 |
//! | `take_rows` (n rows, width w) | nw | 0 | 0 |
//! | `segment_add` (n rows, table t×w) | n + tw + nw | nw | 0 |
//! | `depthwise_conv` (ℓ, c·mult out, kernel k) | ℓ·c·mult·k | same | same |
//! | `conv1d` (ℓ, kernel k×cᵢ×cₒ) | 2ℓkcᵢcₒ | ℓkcᵢcₒ | ℓkcᵢcₒ |
//!
//! Activation functions, λ arithmetic, pooling, heads and losses are free.

use crate::error::{Error, Result};
use crate::ops::{self, NormStats};
use crate::profile::{OpCounters, Profiler};
use crate::tensor::{Precision, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var, f32),
    MatMulAdd(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    ScaleBy(Var, Var),
    Softmax(Var),
    Silu(Var),
    Gelu(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    TakeRows {
        table: Var,
    },
    SegmentAdd {
        x: Var,
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SelectRow {
        x: Var,
        row: usize,
    },
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    AddBias(Var, Var),
    Dot(Var, Var),
    WeightedDifference {
        a: Var,
        la: Var,
        b: Var,
        lb: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f32>,
    },
    Mse {
        pred: Var,
        targets: Vec<f32>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f32>,
    },
    Opaque {
        name: &'static str,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Opaque { name, .. } => name,
            _ => "op",
        }
    }
}

enum Mem {
    Alloc,
    InPlace(Var),
    Merge(Vec<Var>),
    None,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    profiler: Option<Profiler>,
}

fn dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [m, n] => Ok((*m, *n)),
        s => Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, delta: &[f32]) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that charges counters and tracks activations.
    pub fn profiled() -> Self {
        Self {
            nodes: Vec::new(),
            profiler: Some(Profiler::new()),
        }
    }

    pub fn is_profiled(&self) -> bool {
        self.profiler.is_some()
    }

    pub fn profiler(&self) -> Option<&Profiler> {
        self.profiler.as_ref()
    }

    pub fn take_profiler(&mut self) -> Option<Profiler> {
        self.profiler.take()
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

    fn leaf(&mut self, t: Tensor, needs_grad: bool, activation: bool) -> Result<Var> {
        t.require_fp32("graph leaf")?;
        let v = Var(self.nodes.len());
        let elems = t.numel() as u64;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        if activation {
            if let Some(p) = self.profiler.as_mut() {
                p.ledger_mut().alloc(v.0, elems);
            }
        }
        Ok(v)
    }

    /// Trainable weight. Weights never count as activations.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, true, false)
    }

    /// Frozen weight: no gradient, not an activation.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false, false)
    }

    /// Input activation (counted by the ledger), no gradient.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false, true)
    }

    /// Input activation that also receives a gradient.
    pub fn input_with_grad(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, true, true)
    }

    pub fn release(&mut self, v: Var) {
        if let Some(p) = self.profiler.as_mut() {
            p.ledger_mut().release(v.0);
        }
    }

    pub fn begin_section(&mut self, name: impl Into<String>) {
        if let Some(p) = self.profiler.as_mut() {
            p.begin_section(name);
        }
    }

    pub fn end_section(&mut self) {
        if let Some(p) = self.profiler.as_mut() {
            p.end_section();
        }
    }

    /// Extra counter charge for block-level terms the per-op rules do not produce.
    pub fn charge_extra(&mut self, c: OpCounters) {
        if let Some(p) = self.profiler.as_mut() {
            p.charge(c);
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], mem: Mem, cost: OpCounters) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let v = Var(self.nodes.len());
        let elems = value.numel() as u64;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        if let Some(p) = self.profiler.as_mut() {
            p.charge(cost);
            let ledger = p.ledger_mut();
            match mem {
                Mem::Alloc => ledger.alloc(v.0, elems),
                Mem::InPlace(src) => ledger.transfer(src.0, v.0),
                Mem::Merge(parts) => {
                    let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
                    ledger.merge(&ids, v.0)
                }
                Mem::None => {}
            }
        }
        v
    }

    fn t(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.t(a), self.t(b));
        let (m, p) = dims("matmul", ta)?;
        let (p2, n) = dims("matmul", tb)?;
        if p != p2 || ta.shape().len() != 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = Tensor::new(vec![m, n], ops::matmul_raw(ta.data(), tb.data(), m, p, n))?;
        let c = (m * p * n) as u64;
        Ok(self.push(
            out,
            Op::MatMul(a, b),
            &[a, b],
            Mem::Alloc,
            OpCounters::new(2 * c, c, c),
        ))
    }

    /// `scale · a · bᵀ`; the scale is folded into the product.
    pub fn matmul_t(&mut self, a: Var, b: Var, scale: f32) -> Result<Var> {
        let (ta, tb) = (self.t(a), self.t(b));
        let (m, p) = dims("matmul_t", ta)?;
        let (n, p2) = dims("matmul_t", tb)?;
        if p != p2 {
            return Err(shape_err("matmul_t", ta, tb));
        }
        let mut raw = ops::matmul_t_raw(ta.data(), tb.data(), m, p, n);
        if scale != 1.0 {
            raw.iter_mut().for_each(|v| *v *= scale);
        }
        let out = Tensor::new(vec![m, n], raw)?;
        let c = (m * p * n) as u64;
        Ok(self.push(
            out,
            Op::MatMulT(a, b, scale),
            &[a, b],
            Mem::Alloc,
            OpCounters::new(2 * c, c, c),
        ))
    }

    /// `acc + a · b`, written into `acc`'s buffer.
    pub fn matmul_add(&mut self, acc: Var, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.t(a), self.t(b));
        let (m, p) = dims("matmul_add", ta)?;
        let (p2, n) = dims("matmul_add", tb)?;
        if p != p2 {
            return Err(shape_err("matmul_add", ta, tb));
        }
        let tacc = self.t(acc);
        if tacc.shape() != [m, n] {
            return Err(Error::ShapeMismatch {
                op: "matmul_add",
                lhs: tacc.shape().to_vec(),
                rhs: vec![m, n],
            });
        }
        let mut raw = ops::matmul_raw(ta.data(), tb.data(), m, p, n);
        raw.iter_mut().zip(tacc.data()).for_each(|(o, a)| *o += a);
        let out = Tensor::new(vec![m, n], raw)?;
        let c = (m * p * n) as u64;
        Ok(self.push(
            out,
            Op::MatMulAdd(acc, a, b),
            &[acc, a, b],
            Mem::InPlace(acc),
            OpCounters::new(2 * c, c + (m * n) as u64, c),
        ))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.t(a), self.t(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let n = out.numel() as u64;
        Ok(self.push(out, Op::Add(a, b), &[a, b], Mem::InPlace(a), OpCounters::new(n, n, 0)))
    }

    /// `a + b` where `b` is a fresh product output: the sum is folded into the
    /// product's write-back, so only the additions are charged.
    pub fn add_fused(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add_fused", a, b, |x, y| x + y)?;
        let n = out.numel() as u64;
        Ok(self.push(out, Op::Add(a, b), &[a, b], Mem::InPlace(a), OpCounters::new(0, n, 0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let n = out.numel() as u64;
        Ok(self.push(out, Op::Sub(a, b), &[a, b], Mem::InPlace(a), OpCounters::new(n, n, 0)))
    }

    fn map(&self, x: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let t = self.t(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("shape preserved")
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.map(x, |v| v * s);
        let n = out.numel() as u64;
        self.push(out, Op::Scale(x, s), &[x], Mem::InPlace(x), OpCounters::new(0, 0, n))
    }

    /// Multiplies by a learned scalar (a `[1]` node).
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.t(s);
        if ts.numel() != 1 {
            return Err(shape_err("scale_by", self.t(x), ts));
        }
        let k = ts.data()[0];
        let out = self.map(x, |v| v * k);
        Ok(self.push(out, Op::ScaleBy(x, s), &[x, s], Mem::InPlace(x), OpCounters::ZERO))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.t(x))?;
        let n = out.numel() as u64;
        Ok(self.push(out, Op::Softmax(x), &[x], Mem::InPlace(x), OpCounters::new(2 * n, n, 2 * n)))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.map(x, ops::silu_scalar);
        self.push(out, Op::Silu(x), &[x], Mem::InPlace(x), OpCounters::ZERO)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, ops::gelu_scalar);
        self.push(out, Op::Gelu(x), &[x], Mem::InPlace(x), OpCounters::ZERO)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.map(x, f32::exp);
        self.push(out, Op::Exp(x), &[x], Mem::InPlace(x), OpCounters::ZERO)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let tx = self.t(x);
        let (m, n) = dims("layer_norm", tx)?;
        let (tg, tb) = (self.t(gamma), self.t(beta));
        if tg.numel() != n || tb.numel() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let (raw, stats) = ops::layer_norm_raw(tx.data(), tg.data(), tb.data(), n, eps);
        let out = Tensor::new(tx.shape().to_vec(), raw)?;
        let (mn, n64) = ((m * n) as u64, n as u64);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
            Mem::Alloc,
            OpCounters::new(2 * mn + 2 * n64, mn, mn),
        ))
    }

    /// Dense same-padded convolution, `kernel[k × c_in × c_out]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let tx = self.t(x);
        let (len, c_in) = dims("conv1d", tx)?;
        let tk = self.t(kernel);
        let [k, kc, c_out] = *tk.shape() else {
            return Err(shape_err("conv1d", tx, tk));
        };
        if k % 2 == 0 {
            return Err(Error::EvenKernel(k));
        }
        if kc != c_in {
            return Err(Error::ChannelMismatch { input: c_in, kernel: kc });
        }
        let b = match bias {
            Some(b) => {
                let tb = self.t(b);
                if tb.numel() != c_out {
                    return Err(shape_err("conv1d", tk, tb));
                }
                Some(tb.data())
            }
            None => None,
        };
        let raw = ops::conv1d_raw(tx.data(), tk.data(), b, len, c_in, c_out, k, (k - 1) / 2);
        let out = Tensor::new(vec![len, c_out], raw)?;
        let c = (len * k * c_in * c_out) as u64;
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        Ok(self.push(
            out,
            Op::Conv1d { x, kernel, bias },
            &parents,
            Mem::Alloc,
            OpCounters::new(2 * c, c, c),
        ))
    }

    /// Depthwise same-padded convolution, `kernel[k × c × mult]`. Even `k`
    /// pads `⌊(k−1)/2⌋` on the left and the remainder on the right.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let tx = self.t(x);
        let (len, c) = dims("depthwise_conv", tx)?;
        let tk = self.t(kernel);
        let [k, kc, mult] = *tk.shape() else {
            return Err(shape_err("depthwise_conv", tx, tk));
        };
        if kc != c {
            return Err(Error::ChannelMismatch { input: c, kernel: kc });
        }
        let raw = ops::depthwise_raw(tx.data(), tk.data(), len, c, mult, k, (k - 1) / 2);
        let out = Tensor::new(vec![len, c * mult], raw)?;
        let cost = (len * c * mult * k) as u64;
        Ok(self.push(
            out,
            Op::DepthwiseConv { x, kernel },
            &[x, kernel],
            Mem::Alloc,
            OpCounters::new(cost, cost, cost),
        ))
    }

    /// Row lookup `table[ids[t]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.t(table);
        let (rows, w) = dims("gather", tt)?;
        let mut data = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            if id >= rows {
                return Err(Error::TokenOutOfRange { id, vocab: rows });
            }
            data.extend_from_slice(tt.row(id));
        }
        let n = ids.len();
        let out = Tensor::new(vec![n, w], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            Mem::Alloc,
            OpCounters::new((n + n * w) as u64, 0, 0),
        ))
    }

    /// The first `n` rows of a table, e.g. positions `0..n`.
    pub fn take_rows(&mut self, table: Var, n: usize) -> Result<Var> {
        let tt = self.t(table);
        let (rows, w) = dims("take_rows", tt)?;
        if n == 0 || n > rows {
            return Err(Error::SequenceLength {
                expected: rows,
                found: n,
            });
        }
        let out = Tensor::new(vec![n, w], tt.data()[..n * w].to_vec())?;
        Ok(self.push(
            out,
            Op::TakeRows { table },
            &[table],
            Mem::Alloc,
            OpCounters::new((n * w) as u64, 0, 0),
        ))
    }

    /// `x[t] += table[ids[t]]`, in place.
    pub fn segment_add(&mut self, x: Var, table: Var, ids: &[usize]) -> Result<Var> {
        let (tx, tt) = (self.t(x), self.t(table));
        let (n, w) = dims("segment_add", tx)?;
        let (rows, tw) = dims("segment_add", tt)?;
        if tw != w || ids.len() != n {
            return Err(shape_err("segment_add", tx, tt));
        }
        let mut data = tx.data().to_vec();
        for (t, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::SegmentOutOfRange(id));
            }
            data[t * w..(t + 1) * w]
                .iter_mut()
                .zip(tt.row(id))
                .for_each(|(o, s)| *o += s);
        }
        let out = Tensor::new(vec![n, w], data)?;
        let cost = OpCounters::new((n + rows * w + n * w) as u64, (n * w) as u64, 0);
        Ok(self.push(
            out,
            Op::SegmentAdd {
                x,
                table,
                ids: ids.to_vec(),
            },
            &[x, table],
            Mem::InPlace(x),
            cost,
        ))
    }

    /// Column window `[start, start + len)` as a view (no activation).
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.t(x);
        let (m, n) = dims("slice_cols", tx)?;
        if len == 0 || start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let data = (0..m)
            .flat_map(|i| tx.row(i)[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x], Mem::None, OpCounters::ZERO))
    }

    /// Side-by-side concatenation; the parts' buffers become the output.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.t(parts[0]);
        let (m, _) = dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims("concat_cols", self.t(p))?;
            if pm != m {
                return Err(shape_err("concat_cols", first, self.t(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.t(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        Ok(self.push(
            out,
            Op::ConcatCols(parts.to_vec()),
            parts,
            Mem::Merge(parts.to_vec()),
            OpCounters::ZERO,
        ))
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let tx = self.t(x);
        let (m, n) = dims("select_row", tx)?;
        if row >= m {
            return Err(Error::InvalidArgument(format!("row {row} out of {m}")));
        }
        let out = Tensor::new(vec![1, n], tx.row(row).to_vec())?;
        Ok(self.push(out, Op::SelectRow { x, row }, &[x], Mem::Alloc, OpCounters::ZERO))
    }

    /// Column-wise maximum over rows, `[m×n] → [1×n]`.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.t(x);
        let (m, n) = dims("max_pool_rows", tx)?;
        let mut argmax = vec![0usize; n];
        let mut best = tx.row(0).to_vec();
        for i in 1..m {
            for (j, &v) in tx.row(i).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let out = Tensor::new(vec![1, n], best)?;
        Ok(self.push(out, Op::MaxPoolRows { x, argmax }, &[x], Mem::Alloc, OpCounters::ZERO))
    }

    /// Broadcast row bias `x[m×n] + b[n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.t(x), self.t(b));
        let (m, n) = dims("add_bias", tx)?;
        if tb.numel() != n {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for i in 0..m {
            data[i * n..(i + 1) * n]
                .iter_mut()
                .zip(tb.data())
                .for_each(|(o, b)| *o += b);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x, b), &[x, b], Mem::InPlace(x), OpCounters::ZERO))
    }

    /// Inner product of two same-size tensors, as a `[1]` node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.t(a), self.t(b));
        if ta.numel() != tb.numel() {
            return Err(shape_err("dot", ta, tb));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b], Mem::None, OpCounters::ZERO))
    }

    /// `la · a − lb · b` with `[1]` scalar weights, written into `a`'s buffer.
    pub fn weighted_difference(&mut self, a: Var, la: Var, b: Var, lb: Var) -> Result<Var> {
        let (sa, sb) = (self.t(la).data()[0], self.t(lb).data()[0]);
        let out = self.zip_same("weighted_difference", a, b, |x, y| sa * x - sb * y)?;
        Ok(self.push(
            out,
            Op::WeightedDifference { a, la, b, lb },
            &[a, la, b, lb],
            Mem::InPlace(a),
            OpCounters::ZERO,
        ))
    }

    /// Mean cross-entropy over rows that carry a target; `[1]` output.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.t(logits);
        let (m, c) = dims("cross_entropy", tl)?;
        if targets.len() != m {
            return Err(Error::LengthMismatch(m, targets.len()));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0f32;
        let mut count = 0usize;
        for (i, t) in targets.iter().enumerate() {
            let row = &mut probs[i * c..(i + 1) * c];
            ops::softmax_in_place(row);
            if let Some(t) = *t {
                if t >= c {
                    return Err(Error::InvalidArgument(format!("target {t} >= {c} classes")));
                }
                loss -= row[t].max(f32::MIN_POSITIVE).ln();
                count += 1;
            }
        }
        let value = if count == 0 { 0.0 } else { loss / count as f32 };
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
            Mem::None,
            OpCounters::ZERO,
        ))
    }

    pub fn mse(&mut self, pred: Var, targets: &[f32]) -> Result<Var> {
        let tp = self.t(pred);
        if tp.numel() != targets.len() {
            return Err(Error::LengthMismatch(tp.numel(), targets.len()));
        }
        let n = targets.len() as f32;
        let v = tp
            .data()
            .iter()
            .zip(targets)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f32>()
            / n;
        Ok(self.push(
            Tensor::scalar(v),
            Op::Mse {
                pred,
                targets: targets.to_vec(),
            },
            &[pred],
            Mem::None,
            OpCounters::ZERO,
        ))
    }

    /// `Σ xᵢ·wᵢ` as a `[1]` node.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f32]) -> Result<Var> {
        let tx = self.t(x);
        if tx.numel() != weights.len() {
            return Err(Error::LengthMismatch(tx.numel(), weights.len()));
        }
        let s = tx.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            &[x],
            Mem::None,
            OpCounters::ZERO,
        ))
    }

    /// Rounds values onto a storage grid (FP16/FP8). No gradient is registered.
    pub fn round_to_precision(&mut self, x: Var, precision: Precision) -> Result<Var> {
        let out = self.t(x).to_precision(precision)?.widen();
        Ok(self.push(
            out,
            Op::Opaque {
                name: "round_to_precision",
            },
            &[x],
            Mem::InPlace(x),
            OpCounters::ZERO,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.t(loss);
        if root.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.t(*a), self.t(*b));
                let (m, p) = ta.dims2();
                let n = tb.dims2().1;
                if self.needs(*a) {
                    accumulate(grads, *a, &ops::matmul_t_raw(g, tb.data(), m, n, p));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, &ops::t_matmul_raw(ta.data(), g, m, p, n));
                }
            }
            Op::MatMulT(a, b, s) => {
                let (ta, tb) = (self.t(*a), self.t(*b));
                let (m, p) = ta.dims2();
                let n = tb.dims2().0;
                let gs: Vec<f32> = g.iter().map(|v| v * s).collect();
                if self.needs(*a) {
                    accumulate(grads, *a, &ops::matmul_raw(&gs, tb.data(), m, n, p));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, &ops::t_matmul_raw(&gs, ta.data(), m, n, p));
                }
            }
            Op::MatMulAdd(acc, a, b) => {
                if self.needs(*acc) {
                    accumulate(grads, *acc, g);
                }
                let (ta, tb) = (self.t(*a), self.t(*b));
                let (m, p) = ta.dims2();
                let n = tb.dims2().1;
                if self.needs(*a) {
                    accumulate(grads, *a, &ops::matmul_t_raw(g, tb.data(), m, n, p));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, &ops::t_matmul_raw(ta.data(), g, m, p, n));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g);
                }
                if self.needs(*b) {
                    let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Scale(x, s) => {
                let d: Vec<f32> = g.iter().map(|v| v * s).collect();
                accumulate(grads, *x, &d);
            }
            Op::ScaleBy(x, s) => {
                let k = self.t(*s).data()[0];
                if self.needs(*x) {
                    let d: Vec<f32> = g.iter().map(|v| v * k).collect();
                    accumulate(grads, *x, &d);
                }
                if self.needs(*s) {
                    let ds: f32 = g.iter().zip(self.t(*x).data()).map(|(a, b)| a * b).sum();
                    accumulate(grads, *s, &[ds]);
                }
            }
            Op::Softmax(x) => {
                let n = out.dims2().1;
                accumulate(grads, *x, &ops::softmax_backward(out.data(), g, n));
            }
            Op::Silu(x) => {
                let d: Vec<f32> = self
                    .t(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| gv * ops::silu_grad(v))
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::Gelu(x) => {
                let d: Vec<f32> = self
                    .t(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| gv * ops::gelu_grad(v))
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::Exp(x) => {
                let d: Vec<f32> = out.data().iter().zip(g).map(|(y, gv)| y * gv).collect();
                accumulate(grads, *x, &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let n = out.dims2().1;
                let (dx, dg, db) = ops::layer_norm_backward(stats, self.t(*gamma).data(), g, n);
                if self.needs(*x) {
                    accumulate(grads, *x, &dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, &dg);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, &db);
                }
            }
            Op::Conv1d { x, kernel, bias } => {
                let (tx, tk) = (self.t(*x), self.t(*kernel));
                let (len, c_in) = tx.dims2();
                let [k, _, c_out] = *tk.shape() else {
                    unreachable!("validated in forward")
                };
                let (dx, dk, db) =
                    ops::conv1d_backward(tx.data(), tk.data(), g, len, c_in, c_out, k, (k - 1) / 2);
                if self.needs(*x) {
                    accumulate(grads, *x, &dx);
                }
                if self.needs(*kernel) {
                    accumulate(grads, *kernel, &dk);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        accumulate(grads, *b, &db);
                    }
                }
            }
            Op::DepthwiseConv { x, kernel } => {
                let (tx, tk) = (self.t(*x), self.t(*kernel));
                let (len, c) = tx.dims2();
                let [k, _, mult] = *tk.shape() else {
                    unreachable!("validated in forward")
                };
                let (dx, dk) =
                    ops::depthwise_backward(tx.data(), tk.data(), g, len, c, mult, k, (k - 1) / 2);
                if self.needs(*x) {
                    accumulate(grads, *x, &dx);
                }
                if self.needs(*kernel) {
                    accumulate(grads, *kernel, &dk);
                }
            }
            Op::Gather { table, ids } => {
                let tt = self.t(*table);
                let w = tt.dims2().1;
                let mut d = vec![0.0; tt.numel()];
                for (t, &id) in ids.iter().enumerate() {
                    d[id * w..(id + 1) * w]
                        .iter_mut()
                        .zip(&g[t * w..(t + 1) * w])
                        .for_each(|(o, v)| *o += v);
                }
                accumulate(grads, *table, &d);
            }
            Op::TakeRows { table } => {
                let mut d = vec![0.0; self.t(*table).numel()];
                d[..g.len()].copy_from_slice(g);
                accumulate(grads, *table, &d);
            }
            Op::SegmentAdd { x, table, ids } => {
                if self.needs(*x) {
                    accumulate(grads, *x, g);
                }
                if self.needs(*table) {
                    let tt = self.t(*table);
                    let w = tt.dims2().1;
                    let mut d = vec![0.0; tt.numel()];
                    for (t, &id) in ids.iter().enumerate() {
                        d[id * w..(id + 1) * w]
                            .iter_mut()
                            .zip(&g[t * w..(t + 1) * w])
                            .for_each(|(o, v)| *o += v);
                    }
                    accumulate(grads, *table, &d);
                }
            }
            Op::SliceCols { x, start } => {
                let tx = self.t(*x);
                let (m, n) = tx.dims2();
                let len = out.dims2().1;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                accumulate(grads, *x, &d);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.t(p).dims2().1;
                    if self.needs(p) {
                        let d: Vec<f32> = (0..m)
                            .flat_map(|i| g[i * total + offset..i * total + offset + w].iter().copied())
                            .collect();
                        accumulate(grads, p, &d);
                    }
                    offset += w;
                }
            }
            Op::SelectRow { x, row } => {
                let tx = self.t(*x);
                let n = tx.dims2().1;
                let mut d = vec![0.0; tx.numel()];
                d[row * n..(row + 1) * n].copy_from_slice(g);
                accumulate(grads, *x, &d);
            }
            Op::MaxPoolRows { x, argmax } => {
                let tx = self.t(*x);
                let n = tx.dims2().1;
                let mut d = vec![0.0; tx.numel()];
                for (j, &i) in argmax.iter().enumerate() {
                    d[i * n + j] += g[j];
                }
                accumulate(grads, *x, &d);
            }
            Op::AddBias(x, b) => {
                if self.needs(*x) {
                    accumulate(grads, *x, g);
                }
                if self.needs(*b) {
                    let n = self.t(*b).numel();
                    let mut d = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        d.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    accumulate(grads, *b, &d);
                }
            }
            Op::Dot(a, b) => {
                let s = g[0];
                if self.needs(*a) {
                    let d: Vec<f32> = self.t(*b).data().iter().map(|v| v * s).collect();
                    accumulate(grads, *a, &d);
                }
                if self.needs(*b) {
                    let d: Vec<f32> = self.t(*a).data().iter().map(|v| v * s).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::WeightedDifference { a, la, b, lb } => {
                let (sa, sb) = (self.t(*la).data()[0], self.t(*lb).data()[0]);
                if self.needs(*a) {
                    let d: Vec<f32> = g.iter().map(|v| v * sa).collect();
                    accumulate(grads, *a, &d);
                }
                if self.needs(*b) {
                    let d: Vec<f32> = g.iter().map(|v| -v * sb).collect();
                    accumulate(grads, *b, &d);
                }
                if self.needs(*la) {
                    let d: f32 = g.iter().zip(self.t(*a).data()).map(|(x, y)| x * y).sum();
                    accumulate(grads, *la, &[d]);
                }
                if self.needs(*lb) {
                    let d: f32 = g.iter().zip(self.t(*b).data()).map(|(x, y)| -x * y).sum();
                    accumulate(grads, *lb, &[d]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.t(*logits).dims2().1;
                let count = targets.iter().filter(|t| t.is_some()).count();
                let mut d = vec![0.0; probs.len()];
                if count > 0 {
                    let k = g[0] / count as f32;
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..c {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                d[i * c + j] = k * (probs[i * c + j] - onehot);
                            }
                        }
                    }
                }
                accumulate(grads, *logits, &d);
            }
            Op::Mse { pred, targets } => {
                let n = targets.len() as f32;
                let d: Vec<f32> = self
                    .t(*pred)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(p, t)| g[0] * 2.0 * (p - t) / n)
                    .collect();
                accumulate(grads, *pred, &d);
            }
            Op::WeightedSum { x, weights } => {
                let d: Vec<f32> = weights.iter().map(|w| w * g[0]).collect();
                accumulate(grads, *x, &d);
            }
            Op::Opaque { .. } => return Err(Error::NoGradient(op.name())),
        }
        Ok(())
    }
}

/// Maximum over input coordinates of `|analytic − central difference| / max(1, |analytic|)`.
///
/// `build` maps input nodes to an output node; non-scalar outputs are reduced
/// with fixed pseudo-random weights so every output coordinate contributes.
pub fn grad_check<F>(build: F, inputs: &[Tensor], h: f32) -> Result<f32>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&h) {
        return Err(Error::InvalidArgument(format!("step {h} outside [1e-4, 1e-2]")));
    }
    for t in inputs {
        t.require_fp32("grad_check")?;
    }
    let eval = |ins: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = ins
            .iter()
            .map(|t| g.input_with_grad(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        let n = g.value(out).numel();
        let loss = if n == 1 {
            out
        } else {
            let w = probe_weights(n);
            g.weighted_sum(out, &w)?
        };
        Ok((g, vars, loss))
    };
    let (g, vars, loss) = eval(inputs)?;
    let grads = g.backward(loss)?;
    let mut worst = 0.0f32;
    let mut perturbed = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let n = inputs[k].numel();
        let zeros = vec![0.0; n];
        let analytic = grads.get(*v).unwrap_or(&zeros).to_vec();
        for i in 0..n {
            let orig = inputs[k].data()[i];
            perturbed[k].data_mut()[i] = orig + h;
            let (gp, _, lp) = eval(&perturbed)?;
            perturbed[k].data_mut()[i] = orig - h;
            let (gm, _, lm) = eval(&perturbed)?;
            perturbed[k].data_mut()[i] = orig;
            let fp = gp.value(lp).data()[0] as f64;
            let fm = gm.value(lm).data()[0] as f64;
            let numeric = ((fp - fm) / (2.0 * h as f64)) as f32;
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn probe_weights(n: usize) -> Vec<f32> {
    // Deterministic values in [-1, 1] from a 32-bit LCG.
    let mut s: u32 = 0x9E37_79B9;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
            (s >> 8) as f32 / (1u32 << 24) as f32 * 2.0 - 1.0
        })
        .collect()
}
