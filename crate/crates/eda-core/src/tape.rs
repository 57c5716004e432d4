//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! A [`Tape`] records every operation of one forward pass in creation order;
//! [`Tape::backward`] replays the records in reverse, accumulating adjoints by
//! the chain rule. Nodes only ever reference earlier nodes, so a single reverse
//! sweep visits every node after all of its consumers.
//!
//! Gradients accumulate additively: a tensor feeding two consumers receives the
//! sum of both path adjoints, and running `backward` twice without zeroing
//! doubles every gradient exactly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Matvec { m: Var, v: Var },
    Transpose { x: Var },
    Conv1d { input: Var, kernels: Var, bias: Var, stride: usize },
    Softmax { x: Var, temperature: f64 },
    Add { a: Var, b: Var },
    AddBias { m: Var, v: Var },
    AddScalar { x: Var },
    Scale { x: Var, c: f64 },
    Neg { x: Var },
    Mul { a: Var, b: Var },
    Log { x: Var },
    Exp { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Prelu { x: Var, slope: Var },
    Dropout { x: Var, mask: Vec<f64> },
    Concat { parts: Vec<Var> },
    StackRows { parts: Vec<Var> },
    Row { x: Var, index: usize },
    Sum { x: Var },
    Mean { x: Var },
    Reshape { x: Var },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
}

/// Operation tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(String, Var)>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node { op, shape, data, grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant/input leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec())
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, vec![1], vec![value])
    }

    /// Records a named parameter leaf; its gradient can be harvested by name
    /// after `backward`.
    pub fn bind_param(&mut self, name: &str, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.bindings.push((name.to_string(), v));
        v
    }

    /// Parameter bindings recorded via [`Tape::bind_param`].
    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node shape is consistent")
    }

    /// Value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        if self.nodes[v.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar node, got shape {:?}",
                self.nodes[v.0].shape
            )));
        }
        Ok(self.nodes[v.0].data[0])
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    fn require_rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_rank2(a, "matmul")?;
        let (k2, n) = self.require_rank2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        Ok(self.push(Op::Matmul { a, b }, vec![m, n], out))
    }

    /// `[m×k] · [k] -> [m]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.require_rank2(m, "matvec")?;
        if self.nodes[v.0].shape != [cols] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: self.nodes[m.0].shape.clone(),
                rhs: self.nodes[v.0].shape.clone(),
            });
        }
        let md = &self.nodes[m.0].data;
        let vd = &self.nodes[v.0].data;
        let out: Vec<f64> = (0..rows)
            .map(|i| {
                md[i * cols..(i + 1) * cols]
                    .iter()
                    .zip(vd)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        Ok(self.push(Op::Matvec { m, v }, vec![rows], out))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.require_rank2(x, "transpose")?;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose { x }, vec![c, r], out))
    }

    /// Valid (no padding) 1-D cross-correlation.
    ///
    /// `input [C_in×T]`, `kernels [C_out×C_in×K]`, `bias [C_out]`, giving
    /// `[C_out×T_out]` with `T_out = (T−K)/stride + 1`.
    pub fn conv1d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidParameter {
                name: "stride",
                reason: "must be >= 1".into(),
            });
        }
        let (c_in, t) = self.require_rank2(input, "conv1d")?;
        let ks = self.nodes[kernels.0].shape.clone();
        if ks.len() != 3 || ks[1] != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: self.nodes[input.0].shape.clone(),
                rhs: ks,
            });
        }
        let (c_out, k) = (ks[0], ks[2]);
        if self.nodes[bias.0].shape != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: vec![c_out],
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        if t < k {
            return Err(Error::SequenceTooShort { got: t, required: k });
        }
        let t_out = (t - k) / stride + 1;
        let xd = &self.nodes[input.0].data;
        let wd = &self.nodes[kernels.0].data;
        let bd = &self.nodes[bias.0].data;
        let mut out = vec![0.0; c_out * t_out];
        for o in 0..c_out {
            for ti in 0..t_out {
                let start = ti * stride;
                let mut acc = bd[o];
                for c in 0..c_in {
                    let xrow = &xd[c * t + start..c * t + start + k];
                    let wrow = &wd[o * c_in * k + c * k..o * c_in * k + (c + 1) * k];
                    for j in 0..k {
                        acc += wrow[j] * xrow[j];
                    }
                }
                out[o * t_out + ti] = acc;
            }
        }
        Ok(self.push(
            Op::Conv1d { input, kernels, bias, stride },
            vec![c_out, t_out],
            out,
        ))
    }

    // ── Pointwise and structural ops ────────────────────────────────

    /// Temperature softmax over the last axis (rank 1 or 2), max-subtracted.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidParameter {
                name: "temperature",
                reason: format!("must be > 0, got {temperature}"),
            });
        }
        let shape = self.nodes[x.0].shape.clone();
        let cols = *shape.last().ok_or_else(|| Error::Contract("softmax on rank-0 tensor".into()))?;
        if shape.len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: shape,
                rhs: vec![],
            });
        }
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; xd.len()];
        for (orow, xrow) in out.chunks_mut(cols).zip(xd.chunks(cols)) {
            let max = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &z) in orow.iter_mut().zip(xrow) {
                *o = ((z - max) / temperature).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        Ok(self.push(Op::Softmax { x, temperature }, shape, out))
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op_name: &'static str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Add { a, b }, shape, data))
    }

    /// Adds a `[cols]` vector to every row of an `[rows×cols]` matrix.
    pub fn add_bias(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.require_rank2(m, "add_bias")?;
        if self.nodes[v.0].shape != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[m.0].shape.clone(),
                rhs: self.nodes[v.0].shape.clone(),
            });
        }
        let vd = &self.nodes[v.0].data;
        let data: Vec<f64> = self.nodes[m.0]
            .data
            .chunks(cols)
            .flat_map(|row| row.iter().zip(vd).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(Op::AddBias { m, v }, vec![rows, cols], data))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Mul { a, b }, shape, data))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(op, shape, data)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg { x }, |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale { x, c }, |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar { x }, |v| v + c)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.nodes[x.0].data.iter().find(|&&v| v <= 0.0) {
            return Err(Error::NumericDomain {
                op: "log",
                reason: format!("nonpositive input {bad}"),
            });
        }
        Ok(self.unary(x, Op::Log { x }, f64::ln))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp { x }, f64::exp)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid { x }, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh { x }, f64::tanh)
    }

    /// Parametric ReLU with a learned scalar slope (shape `[1]`).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.numel(slope) != 1 {
            return Err(Error::ShapeMismatch {
                op: "prelu",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[slope.0].shape.clone(),
            });
        }
        let s = self.nodes[slope.0].data[0];
        Ok(self.unary(x, Op::Prelu { x, slope }, |v| if v > 0.0 { v } else { s * v }))
    }

    /// Inverted dropout: zeroes with probability `rate` and scales survivors by
    /// `1/(1−rate)` when `train` is set; the identity otherwise.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidParameter {
                name: "dropout_rate",
                reason: format!("must be in [0, 1), got {rate}"),
            });
        }
        if !train {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.numel(x))
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Dropout { x, mask }, shape, data))
    }

    /// Concatenates along the last axis. Rank-1 parts join end to end; rank-2
    /// parts must share a row count and join column blocks.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
        let rank = self.nodes[first.0].shape.len();
        match rank {
            1 => {
                let mut data = Vec::new();
                for &p in parts {
                    if self.nodes[p.0].shape.len() != 1 {
                        return Err(Error::ShapeMismatch {
                            op: "concat",
                            lhs: self.nodes[first.0].shape.clone(),
                            rhs: self.nodes[p.0].shape.clone(),
                        });
                    }
                    data.extend_from_slice(&self.nodes[p.0].data);
                }
                let len = data.len();
                Ok(self.push(Op::Concat { parts: parts.to_vec() }, vec![len], data))
            }
            2 => {
                let rows = self.nodes[first.0].shape[0];
                let mut total_cols = 0;
                for &p in parts {
                    let (r, c) = self.require_rank2(p, "concat")?;
                    if r != rows {
                        return Err(Error::ShapeMismatch {
                            op: "concat",
                            lhs: self.nodes[first.0].shape.clone(),
                            rhs: self.nodes[p.0].shape.clone(),
                        });
                    }
                    total_cols += c;
                }
                let mut data = vec![0.0; rows * total_cols];
                let mut col_off = 0;
                for &p in parts {
                    let c = self.nodes[p.0].shape[1];
                    for r in 0..rows {
                        data[r * total_cols + col_off..r * total_cols + col_off + c]
                            .copy_from_slice(&self.nodes[p.0].data[r * c..(r + 1) * c]);
                    }
                    col_off += c;
                }
                Ok(self.push(Op::Concat { parts: parts.to_vec() }, vec![rows, total_cols], data))
            }
            _ => Err(Error::ShapeMismatch {
                op: "concat",
                lhs: self.nodes[first.0].shape.clone(),
                rhs: vec![],
            }),
        }
    }

    /// Stacks equal-length rank-1 tensors into a `[n×len]` matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("stack_rows of zero parts".into()))?;
        let len = self.numel(first);
        let mut data = Vec::with_capacity(parts.len() * len);
        for &p in parts {
            if self.nodes[p.0].shape.len() != 1 || self.numel(p) != len {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![len],
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push(Op::StackRows { parts: parts.to_vec() }, vec![parts.len(), len], data))
    }

    /// Extracts row `index` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (rows, cols) = self.require_rank2(x, "row")?;
        if index >= rows {
            return Err(Error::Contract(format!(
                "row index {index} out of bounds for {rows} rows"
            )));
        }
        let data = self.nodes[x.0].data[index * cols..(index + 1) * cols].to_vec();
        Ok(self.push(Op::Row { x, index }, vec![cols], data))
    }

    /// Full reduction to a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(Op::Sum { x }, vec![1], vec![s])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.numel(x) as f64;
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(Op::Mean { x }, vec![1], vec![s / n])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(x) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(Op::Reshape { x }, shape, data))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Adjoints are computed in a scratch
    /// buffer seeded with 1 at the loss and added into each node's persistent
    /// gradient at the end.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|nd| vec![0.0; nd.data.len()]).collect();
        let mut reached = vec![false; n];
        adj[loss.0][0] = 1.0;
        reached[loss.0] = true;

        for i in (0..n).rev() {
            if !reached[i] {
                continue;
            }
            // Split off this node's adjoint so parents can be written.
            let g = std::mem::take(&mut adj[i]);
            match self.nodes[i].op.clone() {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let nn = self.nodes[b.0].shape[1];
                    // dA = dC · Bᵀ
                    {
                        let bd = &self.nodes[b.0].data;
                        let da = &mut adj[a.0];
                        for r in 0..m {
                            for j in 0..nn {
                                let gv = g[r * nn + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    da[r * k + p] += gv * bd[p * nn + j];
                                }
                            }
                        }
                    }
                    // dB = Aᵀ · dC
                    {
                        let ad = &self.nodes[a.0].data;
                        let db = &mut adj[b.0];
                        for r in 0..m {
                            for p in 0..k {
                                let av = ad[r * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..nn {
                                    db[p * nn + j] += av * g[r * nn + j];
                                }
                            }
                        }
                    }
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::Matvec { m, v } => {
                    let (rows, cols) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                    {
                        let vd = &self.nodes[v.0].data;
                        let dm = &mut adj[m.0];
                        for i2 in 0..rows {
                            let gv = g[i2];
                            if gv == 0.0 {
                                continue;
                            }
                            for j in 0..cols {
                                dm[i2 * cols + j] += gv * vd[j];
                            }
                        }
                    }
                    {
                        let md = &self.nodes[m.0].data;
                        let dv = &mut adj[v.0];
                        for i2 in 0..rows {
                            let gv = g[i2];
                            if gv == 0.0 {
                                continue;
                            }
                            for j in 0..cols {
                                dv[j] += gv * md[i2 * cols + j];
                            }
                        }
                    }
                    reached[m.0] = true;
                    reached[v.0] = true;
                }
                Op::Transpose { x } => {
                    let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let dx = &mut adj[x.0];
                    for i2 in 0..r {
                        for j in 0..c {
                            dx[i2 * c + j] += g[j * r + i2];
                        }
                    }
                    reached[x.0] = true;
                }
                Op::Conv1d { input, kernels, bias, stride } => {
                    let (c_in, t) = (self.nodes[input.0].shape[0], self.nodes[input.0].shape[1]);
                    let (c_out, k) = (self.nodes[kernels.0].shape[0], self.nodes[kernels.0].shape[2]);
                    let t_out = (t - k) / stride + 1;
                    {
                        let wd = &self.nodes[kernels.0].data;
                        let dx = &mut adj[input.0];
                        for o in 0..c_out {
                            for ti in 0..t_out {
                                let gv = g[o * t_out + ti];
                                if gv == 0.0 {
                                    continue;
                                }
                                let start = ti * stride;
                                for c in 0..c_in {
                                    for j in 0..k {
                                        dx[c * t + start + j] += gv * wd[o * c_in * k + c * k + j];
                                    }
                                }
                            }
                        }
                    }
                    {
                        let xd = &self.nodes[input.0].data;
                        let dw = &mut adj[kernels.0];
                        let db = &mut adj[bias.0];
                        for o in 0..c_out {
                            for ti in 0..t_out {
                                let gv = g[o * t_out + ti];
                                if gv == 0.0 {
                                    continue;
                                }
                                db[o] += gv;
                                let start = ti * stride;
                                for c in 0..c_in {
                                    for j in 0..k {
                                        dw[o * c_in * k + c * k + j] += gv * xd[c * t + start + j];
                                    }
                                }
                            }
                        }
                    }
                    reached[input.0] = true;
                    reached[kernels.0] = true;
                    reached[bias.0] = true;
                }
                Op::Softmax { x, temperature } => {
                    let cols = *self.nodes[i].shape.last().unwrap();
                    let y = &self.nodes[i].data;
                    let dx = &mut adj[x.0];
                    for (row, (yrow, grow)) in y.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dx[row * cols + j] += yrow[j] * (grow[j] - dot) / temperature;
                        }
                    }
                    reached[x.0] = true;
                }
                Op::Add { a, b } => {
                    for (d, gv) in adj[a.0].iter_mut().zip(&g) {
                        *d += gv;
                    }
                    for (d, gv) in adj[b.0].iter_mut().zip(&g) {
                        *d += gv;
                    }
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::AddBias { m, v } => {
                    let cols = self.nodes[v.0].data.len();
                    for (d, gv) in adj[m.0].iter_mut().zip(&g) {
                        *d += gv;
                    }
                    let dv = &mut adj[v.0];
                    for row in g.chunks(cols) {
                        for (d, gv) in dv.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    reached[m.0] = true;
                    reached[v.0] = true;
                }
                Op::AddScalar { x } | Op::Reshape { x } => {
                    for (d, gv) in adj[x.0].iter_mut().zip(&g) {
                        *d += gv;
                    }
                    reached[x.0] = true;
                }
                Op::Scale { x, c } => {
                    for (d, gv) in adj[x.0].iter_mut().zip(&g) {
                        *d += c * gv;
                    }
                    reached[x.0] = true;
                }
                Op::Neg { x } => {
                    for (d, gv) in adj[x.0].iter_mut().zip(&g) {
                        *d -= gv;
                    }
                    reached[x.0] = true;
                }
                Op::Mul { a, b } => {
                    {
                        let bd = &self.nodes[b.0].data;
                        for ((d, gv), bv) in adj[a.0].iter_mut().zip(&g).zip(bd) {
                            *d += gv * bv;
                        }
                    }
                    {
                        let ad = &self.nodes[a.0].data;
                        for ((d, gv), av) in adj[b.0].iter_mut().zip(&g).zip(ad) {
                            *d += gv * av;
                        }
                    }
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::Log { x } => {
                    let xd = &self.nodes[x.0].data;
                    for ((d, gv), xv) in adj[x.0].iter_mut().zip(&g).zip(xd) {
                        *d += gv / xv;
                    }
                    reached[x.0] = true;
                }
                Op::Exp { x } => {
                    let y = &self.nodes[i].data;
                    for ((d, gv), yv) in adj[x.0].iter_mut().zip(&g).zip(y) {
                        *d += gv * yv;
                    }
                    reached[x.0] = true;
                }
                Op::Sigmoid { x } => {
                    let y = &self.nodes[i].data;
                    for ((d, gv), yv) in adj[x.0].iter_mut().zip(&g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                    reached[x.0] = true;
                }
                Op::Tanh { x } => {
                    let y = &self.nodes[i].data;
                    for ((d, gv), yv) in adj[x.0].iter_mut().zip(&g).zip(y) {
                        *d += gv * (1.0 - yv * yv);
                    }
                    reached[x.0] = true;
                }
                Op::Prelu { x, slope } => {
                    let s = self.nodes[slope.0].data[0];
                    let xd = &self.nodes[x.0].data;
                    let mut dslope = 0.0;
                    for ((d, gv), &xv) in adj[x.0].iter_mut().zip(&g).zip(xd) {
                        if xv > 0.0 {
                            *d += gv;
                        } else {
                            *d += gv * s;
                            dslope += gv * xv;
                        }
                    }
                    adj[slope.0][0] += dslope;
                    reached[x.0] = true;
                    reached[slope.0] = true;
                }
                Op::Dropout { x, mask } => {
                    for ((d, gv), mv) in adj[x.0].iter_mut().zip(&g).zip(&mask) {
                        *d += gv * mv;
                    }
                    reached[x.0] = true;
                }
                Op::Concat { parts } => {
                    let rank = self.nodes[i].shape.len();
                    if rank == 1 {
                        let mut off = 0;
                        for p in parts {
                            let len = self.nodes[p.0].data.len();
                            for (d, gv) in adj[p.0].iter_mut().zip(&g[off..off + len]) {
                                *d += gv;
                            }
                            off += len;
                            reached[p.0] = true;
                        }
                    } else {
                        let rows = self.nodes[i].shape[0];
                        let total_cols = self.nodes[i].shape[1];
                        let mut col_off = 0;
                        for p in parts {
                            let c = self.nodes[p.0].shape[1];
                            {
                                let dp = &mut adj[p.0];
                                for r in 0..rows {
                                    for j in 0..c {
                                        dp[r * c + j] += g[r * total_cols + col_off + j];
                                    }
                                }
                            }
                            col_off += c;
                            reached[p.0] = true;
                        }
                    }
                }
                Op::StackRows { parts } => {
                    let len = self.nodes[i].shape[1];
                    for (r, p) in parts.iter().enumerate() {
                        for (d, gv) in adj[p.0].iter_mut().zip(&g[r * len..(r + 1) * len]) {
                            *d += gv;
                        }
                        reached[p.0] = true;
                    }
                }
                Op::Row { x, index } => {
                    let cols = self.nodes[i].data.len();
                    for (d, gv) in adj[x.0][index * cols..(index + 1) * cols]
                        .iter_mut()
                        .zip(&g)
                    {
                        *d += gv;
                    }
                    reached[x.0] = true;
                }
                Op::Sum { x } => {
                    let gv = g[0];
                    for d in adj[x.0].iter_mut() {
                        *d += gv;
                    }
                    reached[x.0] = true;
                }
                Op::Mean { x } => {
                    let scale = g[0] / self.nodes[x.0].data.len() as f64;
                    for d in adj[x.0].iter_mut() {
                        *d += scale;
                    }
                    reached[x.0] = true;
                }
            }
            adj[i] = g;
        }

        for (node, a) in self.nodes.iter_mut().zip(&adj) {
            for (gd, av) in node.grad.iter_mut().zip(a) {
                *gd += av;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_gradient, max_rel_err};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(&t(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.leaf(&t(vec![1, 2], vec![1.0, 2.0]));
        let v = tape.leaf(&t(vec![2, 1], vec![3.0, 4.0]));
        let c2 = tape.matmul(a, v).unwrap();
        assert_eq!(tape.value(c2), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2, 3], vec![0.0; 6]));
        let b = tape.leaf(&t(vec![2, 2], vec![0.0; 4]));
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn conv1d_identity_kernel_and_hand_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(&t(vec![1, 1, 1], vec![1.0]));
        let b = tape.leaf(&t(vec![1], vec![0.0]));
        let y = tape.conv1d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0]);

        let w2 = tape.leaf(&t(vec![1, 1, 2], vec![1.0, 1.0]));
        let y2 = tape.conv1d(x, w2, b, 2).unwrap();
        assert_eq!(tape.value(y2), &[3.0, 7.0]);
    }

    #[test]
    fn conv1d_too_short_names_required_length() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 3], vec![0.0; 3]));
        let w = tape.leaf(&t(vec![1, 1, 5], vec![0.0; 5]));
        let b = tape.leaf(&t(vec![1], vec![0.0]));
        match tape.conv1d(x, w, b, 1) {
            Err(Error::SequenceTooShort { got: 3, required: 5 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_and_hand_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![4], vec![0.0; 4]));
        let y = tape.softmax(x, 1.0).unwrap();
        for &v in tape.value(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let z = tape.leaf(&t(vec![2], vec![2.0, 0.0]));
        let s = tape.softmax(z, 2.0).unwrap();
        let e = std::f64::consts::E;
        assert!((tape.value(s)[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((tape.value(s)[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!(matches!(
            tape.softmax(z, 0.0),
            Err(Error::InvalidParameter { .. })
        ));
    }

    #[test]
    fn prelu_and_dropout_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1], vec![-2.0]));
        let s = tape.leaf(&t(vec![1], vec![0.25]));
        let y = tape.prelu(x, s).unwrap();
        assert_eq!(tape.value(y), &[-0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = tape.leaf(&t(vec![3], vec![1.0, 2.0, 3.0]));
        let kept = tape.dropout(v, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(kept), &[1.0, 2.0, 3.0]);
        let eval = tape.dropout(v, 0.9, false, &mut rng).unwrap();
        assert_eq!(eval, v);
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::NumericDomain { .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fanout_gradient_is_sum_of_paths() {
        // f(x) = sum(x*x + 3x) through two consumers of x; df/dx = 2x + 3.
        let x0 = vec![0.5, -1.5, 2.0];
        let build = |xv: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.leaf(&t(vec![3], xv.to_vec()));
            let sq = tape.mul(x, x).unwrap();
            let tr = tape.scale(x, 3.0);
            let s = tape.add(sq, tr).unwrap();
            let loss = tape.sum(s);
            (tape, x, loss)
        };
        let (mut tape, x, loss) = build(&x0);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).to_vec();
        let fd = fd_gradient(
            &mut |xv: &[f64]| {
                let (tape, _, loss) = build(xv);
                tape.value(loss)[0]
            },
            &x0,
            1e-5,
        );
        assert!(max_rel_err(&analytic, &fd) < 1e-9);
        for (a, xv) in analytic.iter().zip(&x0) {
            assert!((a - (2.0 * xv + 3.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_twice_doubles_exactly() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1.5, -0.5]));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let once = tape.grad(x).to_vec();
        tape.backward(loss).unwrap();
        let twice = tape.grad(x).to_vec();
        for (o, tw) in once.iter().zip(&twice) {
            assert_eq!(*tw, 2.0 * o);
        }
    }

    #[test]
    fn bound_params_are_harvestable() {
        let mut tape = Tape::new();
        let w = tape.bind_param("w", &t(vec![2], vec![2.0, 3.0]));
        let y = tape.mul(w, w).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let (name, var) = &tape.bindings()[0];
        assert_eq!(name, "w");
        assert_eq!(tape.grad(*var), &[4.0, 6.0]);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic_and_positive(
            logits in proptest::collection::vec(-30.0f64..30.0, 8),
            tau in 0.5f64..4.0,
        ) {
            let mut tape = Tape::new();
            let x = tape.leaf(&t(vec![2, 4], logits));
            let y = tape.softmax(x, tau).unwrap();
            for row in tape.value(y).chunks(4) {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|&v| v > 0.0));
            }
        }

        #[test]
        fn concat_roundtrips_rows(av in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let mut tape = Tape::new();
            let a = tape.leaf(&t(vec![2], av[..2].to_vec()));
            let b = tape.leaf(&t(vec![4], av[2..].to_vec()));
            let c = tape.concat(&[a, b]).unwrap();
            prop_assert_eq!(tape.value(c), &av[..]);
        }
    }
}
