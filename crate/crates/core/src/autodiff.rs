//! Dense `f64` tensors and tape-based reverse-mode differentiation.
//!
//! Operations are recorded on a [`Tape`]; [`Tape::backward`] walks the
//! records in reverse and accumulates gradients into every participating
//! tensor. Shapes are validated eagerly and mismatches panic with both
//! shapes in the message; data-dependent failures (non-scalar loss, double
//! backward) are typed errors. [`grad_check`] compares analytic gradients
//! against central finite differences.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; build a fresh tape per step")]
    BackwardAlreadyRun,
}

/// Dense row-major tensor of rank 1..=3.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(
            !shape.is_empty() && shape.len() <= 3,
            "tensor rank must be 1..=3, got shape {shape:?}"
        );
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got shape {shape:?}"
        );
        let len: usize = shape.iter().product();
        assert_eq!(
            len,
            data.len(),
            "shape {shape:?} needs {len} values, got {}",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor::new(shape, vec![0.0; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() requires a scalar, shape {:?}", self.shape);
        self.data[0]
    }

    fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "expected a matrix, got shape {:?}", self.shape);
        self.shape[0]
    }

    fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "expected a matrix, got shape {:?}", self.shape);
        self.shape[1]
    }
}

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    AddRowBroadcast(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    SoftmaxRows(TensorId),
    CrossEntropy {
        probs: TensorId,
        labels: Vec<usize>,
    },
    SoftCrossEntropy {
        probs: TensorId,
        targets: Vec<f64>,
    },
    L2Normalize(TensorId),
    Concat(TensorId, TensorId),
    MeanRows(TensorId),
    SelectRow(TensorId, usize),
    GatherRows(TensorId, Vec<usize>),
    ScaleRows(TensorId, TensorId),
    Scale(TensorId, f64),
    SumAll(TensorId),
    MeanAll(TensorId),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
}

/// Records operations as they execute; owns every value and gradient.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

const PROB_FLOOR: f64 = 1e-12;

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    match (a.rank(), b.rank()) {
        (2, 2) => {
            let (m, k) = (a.rows(), a.cols());
            let (k2, n) = (b.rows(), b.cols());
            assert_eq!(
                k, k2,
                "matmul: inner dimensions differ, {:?} x {:?}",
                a.shape, b.shape
            );
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let a_row = &a.data[i * k..(i + 1) * k];
                let c_row = &mut out[i * n..(i + 1) * n];
                for (kk, &av) in a_row.iter().enumerate() {
                    let b_row = &b.data[kk * n..(kk + 1) * n];
                    for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                        *cv += av * bv;
                    }
                }
            }
            Tensor::matrix(m, n, out)
        }
        (1, 2) => {
            let k = a.len();
            let (k2, n) = (b.rows(), b.cols());
            assert_eq!(
                k, k2,
                "matmul: inner dimensions differ, {:?} x {:?}",
                a.shape, b.shape
            );
            let mut out = vec![0.0; n];
            for (kk, &av) in a.data.iter().enumerate() {
                let b_row = &b.data[kk * n..(kk + 1) * n];
                for (cv, &bv) in out.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
            Tensor::vector(out)
        }
        (2, 1) => {
            let (m, k) = (a.rows(), a.cols());
            assert_eq!(
                k,
                b.len(),
                "matmul: inner dimensions differ, {:?} x {:?}",
                a.shape, b.shape
            );
            let mut out = vec![0.0; m];
            for i in 0..m {
                let a_row = &a.data[i * k..(i + 1) * k];
                out[i] = a_row.iter().zip(&b.data).map(|(x, y)| x * y).sum();
            }
            Tensor::vector(out)
        }
        _ => panic!(
            "matmul: unsupported ranks, {:?} x {:?}",
            a.shape, b.shape
        ),
    }
}

// dA += dC * B^T for the matrix-matrix case, with the rank-1 cases treated
// as single-row/column specializations.
fn matmul_grad_a(grad_out: &Tensor, b: &Tensor, a_shape: &[usize]) -> Tensor {
    match a_shape.len() {
        2 => {
            let (m, k) = (a_shape[0], a_shape[1]);
            let n = b.shape()[b.rank() - 1];
            let g = grad_out.data();
            let mut out = vec![0.0; m * k];
            if b.rank() == 2 {
                for i in 0..m {
                    let g_row = &g[i * n..(i + 1) * n];
                    let o_row = &mut out[i * k..(i + 1) * k];
                    for kk in 0..k {
                        let b_row = &b.data()[kk * n..(kk + 1) * n];
                        o_row[kk] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                    }
                }
            } else {
                // C = A(m x k) . b(k) -> dA[i, kk] = g[i] * b[kk]
                for i in 0..m {
                    for kk in 0..k {
                        out[i * k + kk] = g[i] * b.data()[kk];
                    }
                }
            }
            Tensor::matrix(m, k, out)
        }
        1 => {
            let k = a_shape[0];
            let n = b.shape()[1];
            let mut out = vec![0.0; k];
            for kk in 0..k {
                let b_row = &b.data()[kk * n..(kk + 1) * n];
                out[kk] = grad_out.data().iter().zip(b_row).map(|(x, y)| x * y).sum();
            }
            Tensor::vector(out)
        }
        _ => unreachable!(),
    }
}

// dB += A^T * dC.
fn matmul_grad_b(grad_out: &Tensor, a: &Tensor, b_shape: &[usize]) -> Tensor {
    match b_shape.len() {
        2 => {
            let (k, n) = (b_shape[0], b_shape[1]);
            let mut out = vec![0.0; k * n];
            if a.rank() == 2 {
                let m = a.rows();
                for i in 0..m {
                    let a_row = &a.data()[i * k..(i + 1) * k];
                    let g_row = &grad_out.data()[i * n..(i + 1) * n];
                    for (kk, &av) in a_row.iter().enumerate() {
                        let o_row = &mut out[kk * n..(kk + 1) * n];
                        for (ov, &gv) in o_row.iter_mut().zip(g_row) {
                            *ov += av * gv;
                        }
                    }
                }
            } else {
                for (kk, &av) in a.data().iter().enumerate() {
                    let o_row = &mut out[kk * n..(kk + 1) * n];
                    for (ov, &gv) in o_row.iter_mut().zip(grad_out.data()) {
                        *ov += av * gv;
                    }
                }
            }
            Tensor::matrix(k, n, out)
        }
        1 => {
            let k = b_shape[0];
            let m = a.rows();
            let mut out = vec![0.0; k];
            for i in 0..m {
                let a_row = &a.data()[i * k..(i + 1) * k];
                let g = grad_out.data()[i];
                for (ov, &av) in out.iter_mut().zip(a_row) {
                    *ov += av * g;
                }
            }
            Tensor::vector(out)
        }
        _ => unreachable!(),
    }
}

fn softmax_rows_values(x: &Tensor) -> Tensor {
    let (rows, cols) = match x.rank() {
        1 => (1, x.len()),
        2 => (x.rows(), x.cols()),
        _ => panic!("softmax: expected rank 1 or 2, got shape {:?}", x.shape),
    };
    let mut out = x.data.clone();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass, if this tensor received one.
    pub fn grad(&self, id: TensorId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, op: Op, value: Tensor) -> TensorId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let value = matmul_values(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape, tb.shape,
            "add: shape mismatch {:?} vs {:?}",
            ta.shape, tb.shape
        );
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        self.push(Op::Add(a, b), Tensor { shape, data })
    }

    /// `matrix + row`: adds a length-`cols` vector to every row.
    pub fn add_row_broadcast(&mut self, m: TensorId, row: TensorId) -> TensorId {
        let (tm, tr) = (self.value(m), self.value(row));
        assert!(
            tm.rank() == 2 && tr.rank() == 1 && tm.cols() == tr.len(),
            "add_row_broadcast: shape mismatch {:?} vs {:?}",
            tm.shape,
            tr.shape
        );
        let cols = tm.cols();
        let data = tm
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + tr.data[i % cols])
            .collect();
        let shape = tm.shape.clone();
        self.push(Op::AddRowBroadcast(m, row), Tensor { shape, data })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape, tb.shape,
            "mul: shape mismatch {:?} vs {:?}",
            ta.shape, tb.shape
        );
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        self.push(Op::Mul(a, b), Tensor { shape, data })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let t = self.value(x);
        let data = t.data.iter().map(|v| v.max(0.0)).collect();
        let shape = t.shape.clone();
        self.push(Op::Relu(x), Tensor { shape, data })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let t = self.value(x);
        let data = t.data.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = t.shape.clone();
        self.push(Op::Sigmoid(x), Tensor { shape, data })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let t = self.value(x);
        let data = t.data.iter().map(|v| v.tanh()).collect();
        let shape = t.shape.clone();
        self.push(Op::Tanh(x), Tensor { shape, data })
    }

    /// Row-wise softmax, numerically stabilized by row-max subtraction.
    /// Rank-1 input is treated as a single row.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let value = softmax_rows_values(self.value(x));
        self.push(Op::SoftmaxRows(x), value)
    }

    /// `-ln(p[label])` with probabilities clamped to `[1e-12, 1]`.
    pub fn cross_entropy(&mut self, probs: TensorId, label: usize) -> TensorId {
        let t = self.value(probs);
        assert_eq!(
            t.rank(),
            1,
            "cross_entropy: expected a probability vector, got shape {:?}",
            t.shape
        );
        assert!(
            label < t.len(),
            "cross_entropy: label {label} out of range for {} classes",
            t.len()
        );
        let p = t.data[label].clamp(PROB_FLOOR, 1.0);
        let value = Tensor::scalar(-p.ln());
        self.push(
            Op::CrossEntropy {
                probs,
                labels: vec![label],
            },
            value,
        )
    }

    /// Per-row `-ln(p[label])` over a batch of probability rows.
    pub fn cross_entropy_rows(&mut self, probs: TensorId, labels: &[usize]) -> TensorId {
        let t = self.value(probs);
        assert_eq!(
            t.rank(),
            2,
            "cross_entropy_rows: expected a probability matrix, got shape {:?}",
            t.shape
        );
        let (rows, cols) = (t.rows(), t.cols());
        assert_eq!(
            rows,
            labels.len(),
            "cross_entropy_rows: {rows} rows but {} labels",
            labels.len()
        );
        let mut data = Vec::with_capacity(rows);
        for (r, &label) in labels.iter().enumerate() {
            assert!(
                label < cols,
                "cross_entropy_rows: label {label} out of range for {cols} classes"
            );
            let p = t.data[r * cols + label].clamp(PROB_FLOOR, 1.0);
            data.push(-p.ln());
        }
        self.push(
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            Tensor::vector(data),
        )
    }

    /// `-sum(q * ln(p))` against a fixed target distribution, one scalar
    /// per row. `targets` is row-major with the same shape as `probs`.
    pub fn soft_cross_entropy_rows(&mut self, probs: TensorId, targets: &[f64]) -> TensorId {
        let t = self.value(probs);
        assert_eq!(
            t.rank(),
            2,
            "soft_cross_entropy_rows: expected a probability matrix, got shape {:?}",
            t.shape
        );
        assert_eq!(
            t.len(),
            targets.len(),
            "soft_cross_entropy_rows: {} probabilities vs {} targets",
            t.len(),
            targets.len()
        );
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut loss = 0.0;
            for c in 0..cols {
                let q = targets[r * cols + c];
                if q != 0.0 {
                    let p = t.data[r * cols + c].clamp(PROB_FLOOR, 1.0);
                    loss -= q * p.ln();
                }
            }
            data.push(loss);
        }
        self.push(
            Op::SoftCrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
            Tensor::vector(data),
        )
    }

    /// `x / ||x||`; the zero vector maps to zero.
    pub fn l2_normalize(&mut self, x: TensorId) -> TensorId {
        let t = self.value(x);
        assert_eq!(
            t.rank(),
            1,
            "l2_normalize: expected a vector, got shape {:?}",
            t.shape
        );
        let norm = t.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let data = if norm == 0.0 {
            t.data.clone()
        } else {
            t.data.iter().map(|v| v / norm).collect()
        };
        self.push(Op::L2Normalize(x), Tensor::vector(data))
    }

    pub fn concat(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(
            ta.rank() == 1 && tb.rank() == 1,
            "concat: expected vectors, got shapes {:?} and {:?}",
            ta.shape,
            tb.shape
        );
        let mut data = ta.data.clone();
        data.extend_from_slice(&tb.data);
        self.push(Op::Concat(a, b), Tensor::vector(data))
    }

    /// Column means over a matrix: `[m x n] -> [n]`.
    pub fn mean_rows(&mut self, x: TensorId) -> TensorId {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] += t.data[r * cols + c];
            }
        }
        for v in &mut data {
            *v /= rows as f64;
        }
        self.push(Op::MeanRows(x), Tensor::vector(data))
    }

    pub fn select_row(&mut self, x: TensorId, row: usize) -> TensorId {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        assert!(
            row < rows,
            "select_row: row {row} out of range for {rows} rows"
        );
        let data = t.data[row * cols..(row + 1) * cols].to_vec();
        self.push(Op::SelectRow(x, row), Tensor::vector(data))
    }

    /// Stacks the given rows of a matrix: `[m x n] -> [k x n]`. Repeated
    /// indices are allowed; their gradients accumulate.
    pub fn gather_rows(&mut self, x: TensorId, rows: &[usize]) -> TensorId {
        let t = self.value(x);
        let (m, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            assert!(r < m, "gather_rows: row {r} out of range for {m} rows");
            data.extend_from_slice(&t.data[r * cols..(r + 1) * cols]);
        }
        self.push(
            Op::GatherRows(x, rows.to_vec()),
            Tensor::matrix(rows.len(), cols, data),
        )
    }

    /// Scales row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: TensorId, s: TensorId) -> TensorId {
        let (tx, ts) = (self.value(x), self.value(s));
        assert!(
            tx.rank() == 2 && ts.rank() == 1 && tx.rows() == ts.len(),
            "scale_rows: shape mismatch {:?} vs {:?}",
            tx.shape,
            ts.shape
        );
        let cols = tx.cols();
        let data = tx
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * ts.data[i / cols])
            .collect();
        let shape = tx.shape.clone();
        self.push(Op::ScaleRows(x, s), Tensor { shape, data })
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let t = self.value(x);
        let data = t.data.iter().map(|v| v * factor).collect();
        let shape = t.shape.clone();
        self.push(Op::Scale(x, factor), Tensor { shape, data })
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let value = Tensor::scalar(self.value(x).data.iter().sum());
        self.push(Op::SumAll(x), value)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let t = self.value(x);
        let value = Tensor::scalar(t.data.iter().sum::<f64>() / t.len() as f64);
        self.push(Op::MeanAll(x), value)
    }

    fn accumulate(&mut self, id: TensorId, delta: &Tensor) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gv, dv) in g.data.iter_mut().zip(&delta.data) {
                    *gv += dv;
                }
            }
            None => node.grad = Some(delta.clone()),
        }
    }

    /// Populates `grad` on every tensor the scalar `loss` depends on.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::BackwardAlreadyRun);
        }
        let shape = self.value(loss).shape.clone();
        if shape != [1] {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        // Nodes are recorded in topological order; a reverse scan visits
        // each exactly once with its full downstream gradient.
        for idx in (0..=loss.0).rev() {
            let grad = match &self.nodes[idx].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = matmul_grad_a(&grad, self.value(b), &self.value(a).shape.clone());
                    let db = matmul_grad_b(&grad, self.value(a), &self.value(b).shape.clone());
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::AddRowBroadcast(m, row) => {
                    self.accumulate(m, &grad);
                    let cols = self.value(row).len();
                    let mut db = vec![0.0; cols];
                    for (i, g) in grad.data.iter().enumerate() {
                        db[i % cols] += g;
                    }
                    self.accumulate(row, &Tensor::vector(db));
                }
                Op::Mul(a, b) => {
                    let da = {
                        let tb = self.value(b);
                        Tensor {
                            shape: grad.shape.clone(),
                            data: grad.data.iter().zip(&tb.data).map(|(g, y)| g * y).collect(),
                        }
                    };
                    let db = {
                        let ta = self.value(a);
                        Tensor {
                            shape: grad.shape.clone(),
                            data: grad.data.iter().zip(&ta.data).map(|(g, x)| g * x).collect(),
                        }
                    };
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Relu(x) => {
                    // Subgradient 0 at the kink.
                    let dx = {
                        let tx = self.value(x);
                        Tensor {
                            shape: grad.shape.clone(),
                            data: grad
                                .data
                                .iter()
                                .zip(&tx.data)
                                .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                                .collect(),
                        }
                    };
                    self.accumulate(x, &dx);
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[idx].value;
                    let dx = Tensor {
                        shape: grad.shape.clone(),
                        data: grad
                            .data
                            .iter()
                            .zip(&y.data)
                            .map(|(g, y)| g * y * (1.0 - y))
                            .collect(),
                    };
                    self.accumulate(x, &dx);
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[idx].value;
                    let dx = Tensor {
                        shape: grad.shape.clone(),
                        data: grad
                            .data
                            .iter()
                            .zip(&y.data)
                            .map(|(g, y)| g * (1.0 - y * y))
                            .collect(),
                    };
                    self.accumulate(x, &dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[idx].value;
                    let cols = *y.shape.last().expect("softmax output has a shape");
                    let rows = y.len() / cols;
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..rows {
                        let y_row = &y.data[r * cols..(r + 1) * cols];
                        let g_row = &grad.data[r * cols..(r + 1) * cols];
                        let dot: f64 = y_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = y_row[c] * (g_row[c] - dot);
                        }
                    }
                    let dx = Tensor {
                        shape: self.value(x).shape.clone(),
                        data: dx,
                    };
                    self.accumulate(x, &dx);
                }
                Op::CrossEntropy { probs, labels } => {
                    let tp = self.value(probs);
                    let cols = *tp.shape.last().expect("probs have a shape");
                    let mut dp = vec![0.0; tp.len()];
                    for (r, &label) in labels.iter().enumerate() {
                        let p = tp.data[r * cols + label];
                        if (PROB_FLOOR..=1.0).contains(&p) {
                            dp[r * cols + label] = -grad.data[r] / p;
                        }
                    }
                    let dp = Tensor {
                        shape: tp.shape.clone(),
                        data: dp,
                    };
                    self.accumulate(probs, &dp);
                }
                Op::SoftCrossEntropy { probs, targets } => {
                    let tp = self.value(probs);
                    let cols = tp.cols();
                    let mut dp = vec![0.0; tp.len()];
                    for (i, q) in targets.iter().enumerate() {
                        if *q != 0.0 {
                            let p = tp.data[i];
                            if (PROB_FLOOR..=1.0).contains(&p) {
                                dp[i] = -grad.data[i / cols] * q / p;
                            }
                        }
                    }
                    let dp = Tensor {
                        shape: tp.shape.clone(),
                        data: dp,
                    };
                    self.accumulate(probs, &dp);
                }
                Op::L2Normalize(x) => {
                    let tx = self.value(x);
                    let norm = tx.data.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dx = if norm == 0.0 {
                        Tensor::zeros(tx.shape.clone())
                    } else {
                        let y = &self.nodes[idx].value;
                        let dot: f64 = y.data.iter().zip(&grad.data).map(|(a, b)| a * b).sum();
                        Tensor {
                            shape: tx.shape.clone(),
                            data: grad
                                .data
                                .iter()
                                .zip(&y.data)
                                .map(|(g, y)| (g - y * dot) / norm)
                                .collect(),
                        }
                    };
                    self.accumulate(x, &dx);
                }
                Op::Concat(a, b) => {
                    let na = self.value(a).len();
                    let da = Tensor::vector(grad.data[..na].to_vec());
                    let db = Tensor::vector(grad.data[na..].to_vec());
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::MeanRows(x) => {
                    let tx = self.value(x);
                    let (rows, cols) = (tx.rows(), tx.cols());
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = grad.data[c] / rows as f64;
                        }
                    }
                    self.accumulate(x, &Tensor::matrix(rows, cols, dx));
                }
                Op::SelectRow(x, row) => {
                    let tx = self.value(x);
                    let (rows, cols) = (tx.rows(), tx.cols());
                    let mut dx = vec![0.0; rows * cols];
                    dx[row * cols..(row + 1) * cols].copy_from_slice(&grad.data);
                    self.accumulate(x, &Tensor::matrix(rows, cols, dx));
                }
                Op::GatherRows(x, rows_sel) => {
                    let tx = self.value(x);
                    let (rows, cols) = (tx.rows(), tx.cols());
                    let mut dx = vec![0.0; rows * cols];
                    for (k, &r) in rows_sel.iter().enumerate() {
                        let g_row = &grad.data[k * cols..(k + 1) * cols];
                        let d_row = &mut dx[r * cols..(r + 1) * cols];
                        for (dv, &gv) in d_row.iter_mut().zip(g_row) {
                            *dv += gv;
                        }
                    }
                    self.accumulate(x, &Tensor::matrix(rows, cols, dx));
                }
                Op::ScaleRows(x, s) => {
                    let cols = self.value(x).cols();
                    let dx = {
                        let ts = self.value(s);
                        Tensor {
                            shape: grad.shape.clone(),
                            data: grad
                                .data
                                .iter()
                                .enumerate()
                                .map(|(i, g)| g * ts.data[i / cols])
                                .collect(),
                        }
                    };
                    let ds = {
                        let tx = self.value(x);
                        let rows = tx.rows();
                        let mut ds = vec![0.0; rows];
                        for i in 0..tx.len() {
                            ds[i / cols] += grad.data[i] * tx.data[i];
                        }
                        Tensor::vector(ds)
                    };
                    self.accumulate(x, &dx);
                    self.accumulate(s, &ds);
                }
                Op::Scale(x, factor) => {
                    let dx = Tensor {
                        shape: self.value(x).shape.clone(),
                        data: grad.data.iter().map(|g| g * factor).collect(),
                    };
                    self.accumulate(x, &dx);
                }
                Op::SumAll(x) => {
                    let tx = self.value(x);
                    let dx = Tensor {
                        shape: tx.shape.clone(),
                        data: vec![grad.data[0]; tx.len()],
                    };
                    self.accumulate(x, &dx);
                }
                Op::MeanAll(x) => {
                    let tx = self.value(x);
                    let g = grad.data[0] / tx.len() as f64;
                    let dx = Tensor {
                        shape: tx.shape.clone(),
                        data: vec![g; tx.len()],
                    };
                    self.accumulate(x, &dx);
                }
            }
        }
        Ok(())
    }
}

/// Compares the tape gradient of `f` at `input` against central finite
/// differences `(f(x + eps e) - f(x - eps e)) / 2 eps` and returns the
/// worst relative error over all coordinates (floored at unit scale so
/// near-zero gradients do not inflate the ratio).
pub fn grad_check<F>(f: F, input: &Tensor, epsilon: f64) -> f64
where
    F: Fn(&mut Tape, TensorId) -> TensorId,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let loss = f(&mut tape, x);
    tape.backward(loss).expect("grad_check requires a scalar function");
    let analytic = tape
        .grad(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.shape.clone()));

    let eval = |t: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone());
        let loss = f(&mut tape, x);
        tape.value(loss).item()
    };

    let mut max_rel: f64 = 0.0;
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = input.clone();
        minus.data_mut()[i] -= epsilon;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        max_rel = max_rel.max(rel);
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.softmax_rows(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let row: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let shift = rng.gen_range(-10.0..10.0);
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::vector(row));
            let b = tape.leaf(Tensor::vector(shifted));
            let sa = tape.softmax_rows(a);
            let sb = tape.softmax_rows(b);
            let (va, vb) = (tape.value(sa).data(), tape.value(sb).data());
            let sum: f64 = va.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for (x, y) in va.iter().zip(vb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.l2_normalize(x);
        assert_eq!(tape.value(y).data(), &[0.6, 0.8]);

        // Zero vector maps to zero, no NaN.
        let z = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let yz = tape.l2_normalize(z);
        assert_eq!(tape.value(yz).data(), &[0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0) + 0.1).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(v));
            let y = tape.l2_normalize(x);
            let norm: f64 = tape.value(y).data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_analytic_value() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.5, 0.5]));
        let l = tape.cross_entropy(p, 0);
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn backward_square_and_relu() {
        // f(x) = x^2 at x = 3 -> grad 6.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]));
        let sq = tape.mul(x, x);
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);

        // relu at -1 -> grad 0.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0]));
        let r = tape.relu(x);
        let loss = tape.sum_all(r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reruns() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(AutodiffError::NonScalarLoss(_))
        ));
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]));
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(AutodiffError::BackwardAlreadyRun)
        ));
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn add_panics_with_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        tape.add(a, b);
    }

    #[test]
    fn grad_check_quadratic_is_exact() {
        let x = Tensor::vector(vec![0.7, -1.3, 2.2]);
        let err = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x);
                tape.sum_all(sq)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-10, "relative error {err}");
    }

    #[test]
    fn grad_check_sigmoid_chain() {
        let x = Tensor::vector(vec![0.3, -0.8, 1.4, 0.2]);
        let err = grad_check(
            |tape, x| {
                let s = tape.sigmoid(x);
                let t = tape.tanh(s);
                tape.sum_all(t)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn grad_check_relu_away_from_kink() {
        let x = Tensor::vector(vec![0.5, -0.5, 1.5, -2.0]);
        let err = grad_check(
            |tape, x| {
                let r = tape.relu(x);
                tape.sum_all(r)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn grad_check_three_layer_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w1: Vec<f64> = (0..12).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let w2: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let x = Tensor::vector((0..3).map(|_| rng.gen_range(0.2..1.0)).collect());
        let err = grad_check(
            move |tape, x| {
                let w1 = tape.leaf(Tensor::matrix(3, 4, w1.clone()));
                let w2 = tape.leaf(Tensor::matrix(4, 2, w2.clone()));
                let h = tape.matmul(x, w1);
                let h = tape.tanh(h);
                let h = tape.matmul(h, w2);
                let p = tape.softmax_rows(h);
                tape.cross_entropy(p, 1)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn gather_rows_accumulates_repeated_indices() {
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let g = tape.gather_rows(m, &[0, 0, 1]);
        let s = tape.sum_all(g);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(m).unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn forward_values_are_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(vec![0.31, -0.7, 1.11]));
            let w = tape.leaf(Tensor::matrix(3, 3, (0..9).map(|i| (i as f64).sin()).collect()));
            let h = tape.matmul(x, w);
            let h = tape.sigmoid(h);
            let p = tape.softmax_rows(h);
            tape.value(p).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
