//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built per forward pass. Every op appends a node holding its
//! value and the ids of its inputs, so node order is a topological order and
//! `backward` is a single reverse sweep over the tape.

use crate::error::{Error, Result};
use crate::ssm::scan;
use crate::tensor::{default_precision, matmul_acc, matmul_at_acc, matmul_bt_acc, Precision, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Silu(Var),
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Conv1dCausal { x: Var, w: Var, b: Var },
    Gather(Var, Vec<Option<usize>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Scan(Box<ScanOp>),
}

#[derive(Clone, Debug)]
struct ScanOp {
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
    states: Vec<f64>,
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::with_precision(default_precision())
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        if self.precision == Precision::F32 {
            value.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node that receives a gradient on `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, &[]);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Leaf node excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
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

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor shaped like the node's value.
    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op, &[a])
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise max; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "maximum", Op::Maximum(a, b), f64::max)
    }

    /// Elementwise min; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "minimum", Op::Minimum(a, b), f64::min)
    }

    fn row_broadcast(&mut self, a: Var, b: Var, name: &'static str) -> Result<(usize, usize)> {
        let (r, c) = self.dims2(a, name)?;
        if self.shape(b) != [c] {
            return Err(Error::Shape {
                op: name,
                lhs: vec![r, c],
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok((r, c))
    }

    /// `a[R,C] + b[C]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast(a, b, "add_row")?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data = (0..r * c).map(|i| va[i] + vb[i % c]).collect();
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::AddRow(a, b), &[a, b]))
    }

    /// `a[R,C] ⊙ b[C]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast(a, b, "mul_row")?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data = (0..r * c).map(|i| va[i] * vb[i % c]).collect();
        Ok(self.push(Tensor::new(vec![r, c], data)?, Op::MulRow(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "softmax_rows")?;
        let x = self.value(a).data();
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * c..(i + 1) * c];
            let mut s = 0.0;
            for (ov, &xv) in o.iter_mut().zip(row) {
                *ov = (xv - m).exp();
                s += *ov;
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::SoftmaxRows(a), &[a]))
    }

    /// Per-row layer normalization with affine `gamma`, `beta` of length C.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.row_broadcast(x, gamma, "layer_norm")?;
        self.row_broadcast(x, beta, "layer_norm")?;
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let (mean, inv) = ln_stats(row, eps);
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm { x, gamma, beta, eps },
            &[x, gamma, beta],
        ))
    }

    /// Causal depthwise 1-D convolution over the sequence axis.
    ///
    /// `x[L,C]`, `w[C,K]`, `b[C]`: `y[t,c] = b[c] + Σ_j w[c,j]·x[t-K+1+j, c]`,
    /// with out-of-range positions reading zero.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (l, c) = self.dims2(x, "conv1d_causal")?;
        let (wc, k) = self.dims2(w, "conv1d_causal")?;
        if wc != c || self.shape(b) != [c] {
            return Err(Error::Shape {
                op: "conv1d_causal",
                lhs: vec![l, c],
                rhs: vec![wc, k],
            });
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; l * c];
        for t in 0..l {
            for ch in 0..c {
                let mut s = bv[ch];
                for j in 0..k {
                    if let Some(src) = (t + j + 1).checked_sub(k) {
                        s += wv[ch * k + j] * xv[src * c + ch];
                    }
                }
                out[t * c + ch] = s;
            }
        }
        Ok(self.push(Tensor::new(vec![l, c], out)?, Op::Conv1dCausal { x, w, b }, &[x, w, b]))
    }

    /// Flat gather: `out[i] = a[index[i]]`, or zero for `None`.
    pub fn gather(&mut self, a: Var, index: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::InvalidShape(format!(
                "gather: {} indices for shape {shape:?}",
                index.len()
            )));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= n) {
            return Err(Error::InvalidShape(format!("gather: index {bad} out of range {n}")));
        }
        let src = self.value(a).data();
        let data = index.iter().map(|i| i.map_or(0.0, |i| src[i])).collect();
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::Gather(a, index), &[a]))
    }

    /// Rows `[start, end)` of a 2-D node.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice_rows")?;
        if start > end || end > r {
            return Err(Error::InvalidShape(format!("slice_rows {start}..{end} of {r} rows")));
        }
        let index = (start * c..end * c).map(Some).collect();
        self.gather(a, index, &[end - start, c])
    }

    /// Columns `[start, end)` of a 2-D node.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice_cols")?;
        if start > end || end > c {
            return Err(Error::InvalidShape(format!("slice_cols {start}..{end} of {c} columns")));
        }
        let index = (0..r)
            .flat_map(|i| (start..end).map(move |j| Some(i * c + j)))
            .collect();
        self.gather(a, index, &[r, end - start])
    }

    /// Row `i` of a 2-D node as a 1-D vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (_, c) = self.dims2(a, "row")?;
        let s = self.slice_rows(a, i, i + 1)?;
        self.reshape(s, &[c])
    }

    /// Rows in reverse order.
    pub fn reverse_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "reverse_rows")?;
        let index = (0..r)
            .rev()
            .flat_map(|i| (0..c).map(move |j| Some(i * c + j)))
            .collect();
        self.gather(a, index, &[r, c])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims2(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: vec![r, pc],
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![r],
                    rhs: vec![pr, pc],
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Selective state-space scan with diagonal `a`.
    ///
    /// Shapes: `u[L,D]`, `delta[L,D]`, `a[D,N]`, `b[L,N]`, `c[L,N]`, `d[D]`.
    /// `h_k = exp(δ_k a)⊙h_{k-1} + B̄_k u_k`, `y_k = Σ_n c_k h_k + d⊙u_k`, with
    /// `B̄` the zero-order-hold input matrix.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let (l, dim) = self.dims2(u, "selective_scan")?;
        if l == 0 {
            return Err(Error::EmptySequence("selective_scan"));
        }
        let (da, n) = self.dims2(a, "selective_scan")?;
        let checks: [(Var, Vec<usize>); 4] = [(delta, vec![l, dim]), (b, vec![l, n]), (c, vec![l, n]), (d, vec![dim])];
        if da != dim {
            return Err(Error::Shape {
                op: "selective_scan",
                lhs: vec![l, dim],
                rhs: vec![da, n],
            });
        }
        for (v, want) in checks {
            if self.shape(v) != want.as_slice() {
                return Err(Error::Shape {
                    op: "selective_scan",
                    lhs: want,
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        let dims = scan::ScanDims { len: l, dim, state: n };
        let inputs = scan::ScanInputs {
            u: self.value(u).data(),
            delta: self.value(delta).data(),
            a: self.value(a).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            d: self.value(d).data(),
        };
        let (y, states) = scan::forward(&inputs, dims)?;
        let op = Op::Scan(Box::new(ScanOp {
            u,
            delta,
            a,
            b,
            c,
            d,
            states,
        }));
        Ok(self.push(Tensor::new(vec![l, dim], y)?, op, &[u, delta, a, b, c, d]))
    }

    /// Reverse sweep from a scalar `loss`, seeding its gradient with 1.
    ///
    /// Every node that depends on a parameter ends with a populated gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidShape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(id, &g)?;
            self.nodes[id].grad = Some(g);
            for (v, cg) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(cg),
                }
            }
        }
        for node in &mut self.nodes[..=loss.0] {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn local_grads(&self, id: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[id];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let map1 = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<(Var, Vec<f64>)> {
            let x = val(a);
            vec![(a, (0..g.len()).map(|i| f(g[i], x[i], out[i])).collect())]
        };
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2()?;
                let n = self.nodes[b.0].value.dims2()?.1;
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                if self.requires_grad(*a) {
                    matmul_bt_acc(g, val(*b), &mut ga, m, n, k);
                }
                if self.requires_grad(*b) {
                    matmul_at_acc(val(*a), g, &mut gb, m, k, n);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[a.0].value.dims2()?;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*a, ga)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(y).map(|(g, y)| g * y).collect()),
                    (*b, g.iter().zip(x).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(y).map(|(g, y)| g / y).collect()),
                    (*b, (0..g.len()).map(|i| -g[i] * x[i] / (y[i] * y[i])).collect()),
                ]
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let pick_a: Vec<bool> = match node.op {
                    Op::Maximum(..) => x.iter().zip(y).map(|(x, y)| x >= y).collect(),
                    _ => x.iter().zip(y).map(|(x, y)| x <= y).collect(),
                };
                vec![
                    (*a, (0..g.len()).map(|i| if pick_a[i] { g[i] } else { 0.0 }).collect()),
                    (*b, (0..g.len()).map(|i| if pick_a[i] { 0.0 } else { g[i] }).collect()),
                ]
            }
            Op::AddRow(a, b) => {
                let c = self.nodes[b.0].value.numel();
                let mut gb = vec![0.0; c];
                for (i, gv) in g.iter().enumerate() {
                    gb[i % c] += gv;
                }
                vec![(*a, g.to_vec()), (*b, gb)]
            }
            Op::MulRow(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let c = y.len();
                let mut gb = vec![0.0; c];
                let mut ga = vec![0.0; g.len()];
                for i in 0..g.len() {
                    ga[i] = g[i] * y[i % c];
                    gb[i % c] += g[i] * x[i];
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|x| x * s).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Exp(a) => map1(*a, &|g, _, y| g * y),
            Op::Log(a) => map1(*a, &|g, x, _| g / x),
            Op::Sigmoid(a) => map1(*a, &|g, _, y| g * y * (1.0 - y)),
            Op::Softplus(a) => map1(*a, &|g, x, _| g * sigmoid(x)),
            Op::Silu(a) => map1(*a, &|g, x, _| {
                let s = sigmoid(x);
                g * (s + x * s * (1.0 - s))
            }),
            Op::Gelu(a) => map1(*a, &|g, x, _| g * gelu_grad(x)),
            Op::Relu(a) => map1(*a, &|g, x, _| if x > 0.0 { g } else { 0.0 }),
            Op::Abs(a) => map1(*a, &|g, x, _| g * x.signum() * (x != 0.0) as u8 as f64),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                map1(*a, &move |g, x, _| if x > lo && x < hi { g } else { 0.0 })
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.nodes[a.0].value.numel()])],
            Op::SoftmaxRows(a) => {
                let (r, c) = node.value.dims2()?;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out[i * c..(i + 1) * c];
                    let gy = &g[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[i * c + j] = y[j] * (gy[j] - dot);
                    }
                }
                vec![(*a, ga)]
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, c) = node.value.dims2()?;
                let xv = val(*x);
                let gm = val(*gamma);
                let mut gx = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let (mean, inv) = ln_stats(row, *eps);
                    let gy = &g[i * c..(i + 1) * c];
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * inv;
                        dxhat[j] = gy[j] * gm[j];
                        gg[j] += gy[j] * xhat[j];
                        gbeta[j] += gy[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[i * c + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
            }
            Op::Conv1dCausal { x, w, b } => {
                let (l, c) = self.nodes[x.0].value.dims2()?;
                let k = self.nodes[w.0].value.dims2()?.1;
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = vec![0.0; l * c];
                let mut gw = vec![0.0; c * k];
                let mut gb = vec![0.0; c];
                for t in 0..l {
                    for ch in 0..c {
                        let gy = g[t * c + ch];
                        gb[ch] += gy;
                        for j in 0..k {
                            if let Some(src) = (t + j + 1).checked_sub(k) {
                                gw[ch * k + j] += gy * xv[src * c + ch];
                                gx[src * c + ch] += gy * wv[ch * k + j];
                            }
                        }
                    }
                }
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Gather(a, index) => {
                let mut ga = vec![0.0; self.nodes[a.0].value.numel()];
                for (gv, i) in g.iter().zip(index) {
                    if let Some(i) = i {
                        ga[*i] += gv;
                    }
                }
                vec![(*a, ga)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let n = self.nodes[p.0].value.numel();
                        let chunk = g[offset..offset + n].to_vec();
                        offset += n;
                        (*p, chunk)
                    })
                    .collect()
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2()?;
                let mut result = Vec::with_capacity(parts.len());
                let mut col = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.dims2()?.1;
                    let mut gp = vec![0.0; r * w];
                    for i in 0..r {
                        gp[i * w..(i + 1) * w].copy_from_slice(&g[i * total + col..i * total + col + w]);
                    }
                    col += w;
                    result.push((*p, gp));
                }
                result
            }
            Op::Scan(s) => {
                let (l, dim) = self.nodes[s.u.0].value.dims2()?;
                let n = self.nodes[s.a.0].value.dims2()?.1;
                let inputs = scan::ScanInputs {
                    u: val(s.u),
                    delta: val(s.delta),
                    a: val(s.a),
                    b: val(s.b),
                    c: val(s.c),
                    d: val(s.d),
                };
                let gr = scan::backward(&inputs, &s.states, g, scan::ScanDims { len: l, dim, state: n });
                vec![
                    (s.u, gr.u),
                    (s.delta, gr.delta),
                    (s.a, gr.a),
                    (s.b, gr.b),
                    (s.c, gr.c),
                    (s.d, gr.d),
                ]
            }
        })
    }
}

fn ln_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Central finite-difference gradient of a scalar function.
///
/// Entry `i` is `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)`.
pub fn fd_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("fd step must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("non-finite objective at coordinate {i}")));
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

/// Largest `|a−b| / max(1, |a|, |b|)` over two gradient arrays.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let n = b.dims2().unwrap().1;
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|p| a.at2(i, p) * b.at2(p, j)).sum()
        })
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let i = g.constant(Tensor::eye(2));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        let m = g.constant(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let y = g.matmul(p, m).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng();
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 2], 1.0, &mut r);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = g.matmul(va, vb).unwrap();
        assert!(g.value(y).max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] >= 0.0 && d[1] < 1e-300 + 1e-12);

        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (k, &v) in g.value(y).data().iter().enumerate() {
            assert!((v - ((k + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap());
        assert!(matches!(g.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn fd_examples() {
        let x = Tensor::from_vec(vec![1.0, 2.0, -0.5]);
        let g = fd_gradient(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let g = fd_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6 && (g.data()[1] - 4.0).abs() < 1e-6);
        assert!(fd_gradient(|_| Ok(f64::NAN), &x, 1e-5).is_err());
        assert!(fd_gradient(|_| Ok(0.0), &x, 0.0).is_err());
    }

    /// Build `sum(w ⊙ op(x))` for a fixed random `w` and compare tape vs FD.
    fn check_unary(op: impl Fn(&mut Graph, Var) -> Result<Var>, x: Tensor) {
        let w = Tensor::randn(x.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let eval = |t: &Tensor, grad: bool| -> Result<(f64, Option<Tensor>)> {
            let mut g = Graph::new();
            let xv = if grad {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            let y = op(&mut g, xv)?;
            let wv = g.constant(w.reshape_like(g.value(y)));
            let p = g.mul(y, wv)?;
            let s = g.sum(p);
            let val = g.value(s).data()[0];
            if grad {
                g.backward(s)?;
                return Ok((val, g.grad_tensor(xv)));
            }
            Ok((val, None))
        };
        let (_, tape) = eval(&x, true).unwrap();
        let fd = fd_gradient(|t| Ok(eval(t, false)?.0), &x, 1e-6).unwrap();
        let err = max_rel_error(tape.unwrap().data(), fd.data());
        assert!(err < 1e-4, "rel error {err}");
    }

    impl Tensor {
        fn reshape_like(&self, other: &Tensor) -> Tensor {
            if self.numel() == other.numel() {
                self.clone().reshape(other.shape()).unwrap()
            } else {
                Tensor::from_fn(other.shape(), |i| self.data()[i % self.numel()])
            }
        }
    }

    #[test]
    fn elementwise_gradients_match_fd() {
        let mut r = rng();
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        let pos = x.map(|v| v.abs() + 0.5);
        check_unary(|g, a| Ok(g.exp(a)), x.clone());
        check_unary(|g, a| g.log(a), pos.clone());
        check_unary(|g, a| Ok(g.sigmoid(a)), x.clone());
        check_unary(|g, a| Ok(g.softplus(a)), x.clone());
        check_unary(|g, a| Ok(g.silu(a)), x.clone());
        check_unary(|g, a| Ok(g.gelu(a)), x.clone());
        check_unary(|g, a| Ok(g.relu(a)), x.clone());
        check_unary(|g, a| Ok(g.abs(a)), x.clone());
        check_unary(|g, a| Ok(g.clamp(a, -0.3, 0.4)), x.clone());
        check_unary(|g, a| g.softmax_rows(a), x.clone());
        check_unary(|g, a| g.transpose(a), x.clone());
        check_unary(|g, a| g.reverse_rows(a), x.clone());
        check_unary(|g, a| g.mul(a, a), x.clone());
        check_unary(|g, a| g.div(a, a).and_then(|q| g.add(q, a)), pos.clone());
        check_unary(
            |g, a| {
                let b = g.scale(a, -0.5);
                let b = g.add_scalar(b, 0.1);
                let m = g.maximum(a, b)?;
                g.minimum(m, b)
            },
            x.clone(),
        );
    }

    #[test]
    fn structured_gradients_match_fd() {
        let mut r = rng();
        let x = Tensor::randn(&[4, 3], 1.0, &mut r);
        let w = Tensor::randn(&[3, 5], 1.0, &mut r);
        let gamma = Tensor::randn(&[3], 1.0, &mut r);
        let beta = Tensor::randn(&[3], 1.0, &mut r);
        let cw = Tensor::randn(&[3, 4], 1.0, &mut r);
        check_unary(
            |g, a| {
                let wv = g.constant(w.clone());
                g.matmul(a, wv)
            },
            x.clone(),
        );
        check_unary(
            |g, a| {
                let wv = g.constant(x.clone());
                g.matmul(wv, a)
            },
            w.clone(),
        );
        check_unary(
            |g, a| {
                let (gm, bt) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                g.layer_norm(a, gm, bt, 1e-5)
            },
            x.clone(),
        );
        check_unary(
            |g, a| {
                let xv = g.constant(x.clone());
                let bt = g.constant(beta.clone());
                let ln = g.layer_norm(xv, a, bt, 1e-5)?;
                g.mul_row(ln, a)
            },
            gamma.clone(),
        );
        check_unary(
            |g, a| {
                let (wv, bv) = (g.constant(cw.clone()), g.constant(beta.clone()));
                g.conv1d_causal(a, wv, bv)
            },
            x.clone(),
        );
        check_unary(
            |g, a| {
                let xv = g.constant(x.clone());
                let bv = g.constant(beta.clone());
                g.conv1d_causal(xv, a, bv)
            },
            cw.clone(),
        );
        check_unary(
            |g, a| {
                let b = g.slice_rows(a, 1, 3)?;
                let c = g.concat_rows(&[a, b])?;
                let t = g.transpose(c)?;
                let t2 = g.transpose(a)?;
                let cc = g.concat_cols(&[t, t2])?;
                let r = g_row_const(g, 10);
                g.add_row(cc, r)
            },
            x.clone(),
        );
    }

    fn g_row_const(g: &mut Graph, n: usize) -> Var {
        g.constant(Tensor::from_fn(&[n], |i| i as f64))
    }

    #[test]
    fn precision_switch_rounds_results() {
        let mut g = Graph::with_precision(Precision::F32);
        let x = g.constant(Tensor::from_vec(vec![0.1]));
        let y = g.scale(x, 3.0);
        assert_eq!(g.value(y).data()[0], (0.1f64 * 3.0) as f32 as f64);
    }

    #[test]
    fn backward_populates_every_dependent_node() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        let unused = g.param(Tensor::from_vec(vec![3.0]));
        let b = g.exp(a);
        let s = g.sum(b);
        g.backward(s).unwrap();
        assert!(g.grad(a).is_some() && g.grad(b).is_some() && g.grad(unused).is_some());
        assert_eq!(g.grad(unused).unwrap(), &[0.0]);
        assert!(g.backward(b).is_err());
    }
}
