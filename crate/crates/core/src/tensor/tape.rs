use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// tanh approximation
    Gelu,
    Exp,
    Log1p,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// How the smaller operand of a binary op is expanded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    ScalarLhs,
    ScalarRhs,
    /// lhs is a `[d]` vector repeated over the rows of rhs
    RowLhs,
    RowRhs,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: NodeId,
        rows: usize,
        cols: usize,
    },
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
        bcast: Broadcast,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    Unary {
        kind: Activation,
        a: NodeId,
    },
    Softmax {
        a: NodeId,
        width: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        width: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum {
        a: NodeId,
    },
    Mean {
        a: NodeId,
    },
    SliceCols {
        a: NodeId,
        cols: usize,
        start: usize,
    },
    ConcatCols {
        parts: Vec<(NodeId, usize)>,
    },
    SliceRows {
        a: NodeId,
        start: usize,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of a forward pass. Nodes are appended in evaluation order,
/// so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `id` into `tensor.grad`.
    pub fn accumulate_into(&self, id: NodeId, tensor: &mut Tensor) -> Result<()> {
        match self.get(id) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn row_width(shape: &[usize]) -> usize {
    *shape.last().expect("validated shapes are non-empty")
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        Tensor::new(node.shape.clone(), node.data.clone()).expect("tape nodes have valid shapes")
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Result<NodeId> {
        check_finite(op_name, &data)?;
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Registers a tensor as a leaf; its `requires_grad` flag is honoured.
    pub fn leaf(&mut self, t: &Tensor) -> Result<NodeId> {
        self.push(
            "leaf",
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Registers a constant (never differentiated).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?;
        self.push("constant", t.shape, t.data, false, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", vec![m, n], data, rg, Op::MatMul { a, b, m, k, n })
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                shape: s,
                reason: "transpose expects a matrix".into(),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let data = transpose_raw(self.value(a), rows, cols);
        let rg = self.rg(a);
        self.push(
            "transpose",
            vec![cols, rows],
            data,
            rg,
            Op::Transpose { a, rows, cols },
        )
    }

    fn broadcast_of(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(Broadcast, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok((Broadcast::Same, sa.to_vec()));
        }
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        if na == 1 {
            return Ok((Broadcast::ScalarLhs, sb.to_vec()));
        }
        if nb == 1 {
            return Ok((Broadcast::ScalarRhs, sa.to_vec()));
        }
        if sa.len() == 1 && sb.len() >= 2 && row_width(sb) == sa[0] {
            return Ok((Broadcast::RowLhs, sb.to_vec()));
        }
        if sb.len() == 1 && sa.len() >= 2 && row_width(sa) == sb[0] {
            return Ok((Broadcast::RowRhs, sa.to_vec()));
        }
        Err(TensorError::Broadcast {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    fn binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let (bcast, shape) = self.broadcast_of(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let n: usize = shape.iter().product();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let data: Vec<f64> = match bcast {
            Broadcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::ScalarLhs => vb.iter().map(|&y| f(va[0], y)).collect(),
            Broadcast::ScalarRhs => va.iter().map(|&x| f(x, vb[0])).collect(),
            Broadcast::RowLhs => (0..n).map(|i| f(va[i % va.len()], vb[i])).collect(),
            Broadcast::RowRhs => (0..n).map(|i| f(va[i], vb[i % vb.len()])).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(name, shape, data, rg, Op::Binary { kind, a, b, bcast })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data = self.value(a).iter().map(|x| x * c).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push("scale", shape, data, rg, Op::Scale { a, c })
    }

    pub fn activation(&mut self, kind: Activation, a: NodeId) -> Result<NodeId> {
        let (name, f): (&'static str, fn(f64) -> f64) = match kind {
            Activation::Relu => ("relu", |x| x.max(0.0)),
            Activation::Gelu => ("gelu", gelu),
            Activation::Exp => ("exp", f64::exp),
            Activation::Log1p => ("log1p", f64::ln_1p),
            Activation::Tanh => ("tanh", f64::tanh),
        };
        let data = self.value(a).iter().map(|&x| f(x)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(name, shape, data, rg, Op::Unary { kind, a })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(Activation::Relu, a)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(Activation::Gelu, a)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(Activation::Exp, a)
    }

    pub fn log1p(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(Activation::Log1p, a)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let width = row_width(&shape);
        let mut data = self.value(a).to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(a);
        self.push("softmax", shape, data, rg, Op::Softmax { a, width })
    }

    /// Normalizes each last-axis slice to zero mean and unit (population)
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let width = row_width(&shape);
        if width < 2 {
            return Err(TensorError::InvalidShape {
                shape,
                reason: "layer_norm needs at least 2 features".into(),
            });
        }
        for p in [gain, bias] {
            if self.shape(p) != [width] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let xs = self.value(x);
        let rows = xs.len() / width;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..width {
                let h = (row[j] - mean) * s;
                xhat[r * width + j] = h;
                data[r * width + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            "layer_norm",
            shape,
            data,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                width,
                xhat,
                rstd,
            },
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push("sum", vec![1], vec![s], rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push("mean", vec![1], vec![s], rg, Op::Mean { a })
    }

    fn matrix_dims(&self, op: &'static str, a: NodeId) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                shape: s.to_vec(),
                reason: format!("{op} expects a matrix"),
            });
        }
        Ok((s[0], s[1]))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.matrix_dims("slice_cols", a)?;
        if len == 0 || start + len > cols {
            return Err(TensorError::InvalidShape {
                shape: vec![rows, cols],
                reason: format!("column slice {start}+{len} out of range"),
            });
        }
        let v = self.value(a);
        let data = (0..rows)
            .flat_map(|r| v[r * cols + start..r * cols + start + len].iter().copied())
            .collect();
        let rg = self.rg(a);
        self.push(
            "slice_cols",
            vec![rows, len],
            data,
            rg,
            Op::SliceCols { a, cols, start },
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| TensorError::InvalidShape {
            shape: vec![],
            reason: "nothing to concatenate".into(),
        })?;
        let (rows, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &widths {
                data.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat_cols",
            vec![rows, total],
            data,
            rg,
            Op::ConcatCols { parts: widths },
        )
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.matrix_dims("slice_rows", a)?;
        if len == 0 || start + len > rows {
            return Err(TensorError::InvalidShape {
                shape: vec![rows, cols],
                reason: format!("row slice {start}+{len} out of range"),
            });
        }
        let data = self.value(a)[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(a);
        self.push(
            "slice_rows",
            vec![len, cols],
            data,
            rg,
            Op::SliceRows { a, start },
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| TensorError::InvalidShape {
            shape: vec![],
            reason: "nothing to concatenate".into(),
        })?;
        let (_, cols) = self.matrix_dims("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_rows", p)?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat_rows",
            vec![rows, cols],
            data,
            rg,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar `loss`. Each node is visited once, newest
    /// first; gradients of shared inputs are summed.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |id: NodeId, delta: Vec<f64>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(buf) => buf.iter_mut().zip(&delta).for_each(|(b, d)| *b += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let bt = transpose_raw(self.value(*b), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.rg(*b) {
                    let at = transpose_raw(self.value(*a), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose { a, rows, cols } => acc(*a, transpose_raw(g, *cols, *rows)),
            Op::Binary { kind, a, b, bcast } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = g.len();
                let ia = |i: usize| match bcast {
                    Broadcast::Same | Broadcast::RowRhs | Broadcast::ScalarRhs => i,
                    Broadcast::ScalarLhs => 0,
                    Broadcast::RowLhs => i % va.len(),
                };
                let ib = |i: usize| match bcast {
                    Broadcast::Same | Broadcast::RowLhs | Broadcast::ScalarLhs => i,
                    Broadcast::ScalarRhs => 0,
                    Broadcast::RowRhs => i % vb.len(),
                };
                if self.rg(*a) {
                    let mut da = vec![0.0; va.len()];
                    for i in 0..n {
                        da[ia(i)] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[i],
                            BinaryKind::Mul => g[i] * vb[ib(i)],
                        };
                    }
                    acc(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; vb.len()];
                    for i in 0..n {
                        db[ib(i)] += match kind {
                            BinaryKind::Add => g[i],
                            BinaryKind::Sub => -g[i],
                            BinaryKind::Mul => g[i] * va[ia(i)],
                        };
                    }
                    acc(*b, db);
                }
            }
            Op::Scale { a, c } => acc(*a, g.iter().map(|v| v * c).collect()),
            Op::Unary { kind, a } => {
                let x = self.value(*a);
                let y = &node.data;
                let d: Vec<f64> = match kind {
                    Activation::Relu => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                    Activation::Gelu => x.iter().zip(g).map(|(&x, &g)| g * gelu_grad(x)).collect(),
                    Activation::Exp => y.iter().zip(g).map(|(&y, &g)| g * y).collect(),
                    Activation::Log1p => x.iter().zip(g).map(|(&x, &g)| g / (1.0 + x)).collect(),
                    Activation::Tanh => y.iter().zip(g).map(|(&y, &g)| g * (1.0 - y * y)).collect(),
                };
                acc(*a, d);
            }
            Op::Softmax { a, width } => {
                let y = &node.data;
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(*width)
                    .zip(y.chunks(*width))
                    .zip(g.chunks(*width))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..*width {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                width,
                xhat,
                rstd,
            } => {
                let w = *width;
                let gv = self.value(*gain);
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, s) in rstd.iter().enumerate() {
                        let range = r * w..(r + 1) * w;
                        let (gr, hr) = (&g[range.clone()], &xhat[range.clone()]);
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(g, k)| g * k).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(d, h)| d * h).sum();
                        for j in 0..w {
                            dx[r * w + j] =
                                s / w as f64 * (w as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    acc(*x, dx);
                }
                if self.rg(*gain) {
                    let mut dg = vec![0.0; w];
                    for (i, (gi, hi)) in g.iter().zip(xhat).enumerate() {
                        dg[i % w] += gi * hi;
                    }
                    acc(*gain, dg);
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; w];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % w] += gi;
                    }
                    acc(*bias, db);
                }
            }
            Op::Sum { a } => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean { a } => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::SliceCols { a, cols, start } => {
                let len = node.shape[1];
                let rows = node.shape[0];
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(*a, d);
            }
            Op::ConcatCols { parts } => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &(p, c) in parts {
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    acc(p, d);
                    offset += c;
                }
            }
            Op::SliceRows { a, start } => {
                let cols = node.shape[1];
                let mut d = vec![0.0; self.value(*a).len()];
                d[start * cols..start * cols + g.len()].copy_from_slice(g);
                acc(*a, d);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let i = tape.leaf(&t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let b = tape.leaf(&t(&[2, 2], &[5., 6., 7., 8.])).unwrap();
        let ai = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(ai), &[1., 2., 3., 4.]);
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]).unwrap()).unwrap();
        let b = tape.leaf(&Tensor::zeros(vec![2, 3]).unwrap()).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let c = tape.leaf(&t(&[4], &[7.5; 4])).unwrap();
        let s = tape.softmax(c).unwrap();
        assert_eq!(tape.value(s), &[0.25; 4]);
        let x = tape.leaf(&t(&[2], &[0.0, 2f64.ln()])).unwrap();
        let s = tape.softmax(x).unwrap();
        assert!((tape.value(s)[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((tape.value(s)[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let ones = tape.leaf(&t(&[4], &[1.0; 4])).unwrap();
        let zeros = tape.leaf(&t(&[4], &[0.0; 4])).unwrap();
        let x = tape.leaf(&t(&[4], &[5.0; 4])).unwrap();
        let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.0; 4]);

        let g2 = tape.leaf(&t(&[2], &[1.0, 1.0])).unwrap();
        let b2 = tape.leaf(&t(&[2], &[0.0, 0.0])).unwrap();
        let x = tape.leaf(&t(&[2], &[1.0, 3.0])).unwrap();
        let y = tape.layer_norm(x, g2, b2, 1e-12).unwrap();
        assert!((tape.value(y)[0] + 1.0).abs() < 1e-9 && (tape.value(y)[1] - 1.0).abs() < 1e-9);

        let g0 = tape.leaf(&t(&[3], &[0.0; 3])).unwrap();
        let bias = tape.leaf(&t(&[3], &[0.5, -1.0, 2.0])).unwrap();
        let x = tape
            .leaf(&t(&[2, 3], &[1., -4., 9., 0.3, 0.2, 7.]))
            .unwrap();
        let y = tape.layer_norm(x, g0, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.5, -2.0, 0.25])).unwrap();
        let zero = tape.constant(vec![1], vec![0.0]).unwrap();
        let y = tape.add(x, zero).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let z = tape.constant(vec![1], vec![0.0]).unwrap();
        let l = tape.log1p(z).unwrap();
        assert_eq!(tape.value(l), &[0.0]);
        let r = tape.constant(vec![2], vec![-2.0, 3.0]).unwrap();
        let r = tape.relu(r).unwrap();
        assert_eq!(tape.value(r), &[0.0, 3.0]);
    }

    #[test]
    fn incompatible_broadcast_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2], vec![0.0; 2]).unwrap();
        assert!(matches!(tape.add(a, b), Err(TensorError::Broadcast { .. })));
    }

    #[test]
    fn overflow_surfaces_as_error() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1], vec![1000.0]).unwrap();
        assert_eq!(tape.exp(a), Err(TensorError::NonFinite { op: "exp" }));
        let b = tape.constant(vec![1], vec![-1.0]).unwrap();
        assert!(tape.log1p(b).is_err());
    }

    #[test]
    fn backward_square_sum_and_fan_out() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1., 2., 3.]).with_grad()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2., 4., 6.]);

        let mut tape = Tape::new();
        let y = tape
            .leaf(&t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]).with_grad())
            .unwrap();
        let s1 = tape.sum(y).unwrap();
        let s2 = tape.sum(y).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(y).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1., 2.]).with_grad()).unwrap();
        assert_eq!(
            tape.backward(x).unwrap_err(),
            TensorError::NonScalarLoss(vec![2])
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1., 2.]).with_grad()).unwrap();
        let c = tape.constant(vec![2], vec![3., 4.]).unwrap();
        let p = tape.mul(x, c).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3., 4.]);
        assert!(g.get(c).is_none());
    }
}
