use super::{GradError, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive that produced a node.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    MatVec,
    Linear,
    Add,
    Sub,
    Mul,
    Relu,
    Tanh,
    Exp,
    Log,
    Abs,
    Square,
    L2Norm { eps: f64 },
    RowL2Norm { eps: f64 },
    Mean,
    Sum,
    Scale(f64),
    AddScalar(f64),
    LogMeanExp,
    Rows { start: usize, len: usize },
    Gather { indices: Vec<usize> },
    Concat,
    BroadcastRows { n: usize },
}

/// A value on the tape together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct DiffNode {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
    parents: Vec<usize>,
}

impl DiffNode {
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Gradient of the last backward root with respect to this node. Empty
    /// until [`Graph::backward`] has run.
    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn parents(&self) -> impl Iterator<Item = Var> + '_ {
        self.parents.iter().map(|&p| Var(p))
    }
}

/// Gradients of a scalar root with respect to every leaf of the graph.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, panicking if it is not a leaf of the graph.
    pub fn wrt(&self, var: Var) -> &Tensor {
        self.get(var).expect("gradient requested for a non-leaf node")
    }
}

/// Append-only tape of tensor operations.
///
/// Nodes are stored in creation order, which is already a topological order,
/// so the reverse pass walks the vector backwards and touches each node once.
#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<DiffNode>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> GradError {
    GradError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, var: Var) -> &DiffNode {
        &self.nodes[var.0]
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, parents: Vec<usize>) -> Var {
        self.nodes.push(DiffNode {
            value,
            grad: Vec::new(),
            op,
            parents,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf (a trainable parameter or a constant input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Vec::new())
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, GradError> {
        let (wt, xt) = (self.value(w), self.value(x));
        if wt.shape().len() != 2 || xt.shape().len() != 1 || wt.shape()[1] != xt.len() {
            return Err(mismatch("matvec", wt, xt));
        }
        let m = wt.shape()[0];
        let out = affine_forward(xt.data(), 1, xt.len(), wt.data(), None, m);
        Ok(self.push(Tensor::vector(out), Op::MatVec, vec![w.0, x.0]))
    }

    /// Row-wise affine map `x Wᵀ + b` for `x` of shape `[n]` or `[B, n]`,
    /// `W` of shape `[m, n]` and `b` of shape `[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, GradError> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        if wt.shape().len() != 2 || xt.shape().is_empty() || xt.cols() != wt.shape()[1] {
            return Err(mismatch("linear", xt, wt));
        }
        let m = wt.shape()[0];
        if bt.shape() != [m] {
            return Err(mismatch("linear", wt, bt));
        }
        let rows = xt.rows();
        let out = affine_forward(xt.data(), rows, xt.cols(), wt.data(), Some(bt.data()), m);
        let shape = if xt.shape().len() == 1 { vec![m] } else { vec![rows, m] };
        Ok(self.push(Tensor::new(shape, out), Op::Linear, vec![x.0, w.0, b.0]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, GradError> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(mismatch(name, at, bt));
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(at.shape().to_vec(), data);
        Ok(self.push(value, op, vec![a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("sub", Op::Sub, a, b, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary("mul", Op::Mul, a, b, |x, y| x * y)
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let xt = self.value(x);
        let value = Tensor::new(xt.shape().to_vec(), xt.data().iter().map(|&v| f(v)).collect());
        self.push(value, op, vec![x.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Op::Relu, x, |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Op::Tanh, x, f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Op::Exp, x, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Op::Log, x, f64::ln)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Op::Abs, x, f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Op::Square, x, |v| v * v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Op::Scale(c), x, |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(Op::AddScalar(c), x, |v| v + c)
    }

    /// Smoothed Euclidean norm `sqrt(Σx² + eps)` of all elements.
    pub fn l2norm(&mut self, x: Var, eps: f64) -> Result<Var, GradError> {
        if !(eps > 0.0) {
            return Err(GradError::InvalidArgument(format!("l2norm eps must be > 0, got {eps}")));
        }
        let xt = self.value(x);
        let n = (xt.data().iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
        Ok(self.push(Tensor::scalar(n), Op::L2Norm { eps }, vec![x.0]))
    }

    /// Smoothed norm of every row of a `[B, K]` matrix, giving a `[B]` vector.
    pub fn row_l2norm(&mut self, x: Var, eps: f64) -> Result<Var, GradError> {
        if !(eps > 0.0) {
            return Err(GradError::InvalidArgument(format!("l2norm eps must be > 0, got {eps}")));
        }
        let xt = self.value(x);
        if xt.shape().len() != 2 {
            return Err(GradError::ShapeMismatch {
                op: "row_l2norm",
                left: xt.shape().to_vec(),
                right: vec![0, 0],
            });
        }
        let out = (0..xt.rows())
            .map(|i| (xt.row(i).iter().map(|v| v * v).sum::<f64>() + eps).sqrt())
            .collect();
        Ok(self.push(Tensor::vector(out), Op::RowL2Norm { eps }, vec![x.0]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, GradError> {
        let xt = self.value(x);
        if xt.is_empty() {
            return Err(GradError::EmptyInput("mean"));
        }
        let m = xt.data().iter().sum::<f64>() / xt.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean, vec![x.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum, vec![x.0])
    }

    /// `log(mean(exp(x)))` over all elements, evaluated with a max shift.
    pub fn log_mean_exp(&mut self, x: Var) -> Result<Var, GradError> {
        let xt = self.value(x);
        if xt.is_empty() {
            return Err(GradError::EmptyInput("log_mean_exp"));
        }
        let v = log_mean_exp(xt.data());
        Ok(self.push(Tensor::scalar(v), Op::LogMeanExp, vec![x.0]))
    }

    /// Rows `start..start + len` of a matrix, or elements of a vector.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, GradError> {
        let xt = self.value(x);
        let nrows = if xt.shape().len() == 1 { xt.len() } else { xt.rows() };
        if xt.shape().is_empty() || start + len > nrows {
            return Err(GradError::ShapeMismatch {
                op: "rows",
                left: xt.shape().to_vec(),
                right: vec![start + len],
            });
        }
        let c = if xt.shape().len() == 1 { 1 } else { xt.cols() };
        let data = xt.data()[start * c..(start + len) * c].to_vec();
        let value = if xt.shape().len() == 1 {
            Tensor::vector(data)
        } else {
            Tensor::matrix(len, c, data)
        };
        Ok(self.push(value, Op::Rows { start, len }, vec![x.0]))
    }

    /// Selects rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, GradError> {
        let xt = self.value(x);
        if xt.shape().len() != 2 || indices.iter().any(|&i| i >= xt.rows()) {
            return Err(GradError::ShapeMismatch {
                op: "gather_rows",
                left: xt.shape().to_vec(),
                right: vec![indices.iter().copied().max().unwrap_or(0) + 1],
            });
        }
        let c = xt.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(xt.row(i));
        }
        let value = Tensor::matrix(indices.len(), c, data);
        Ok(self.push(value, Op::Gather { indices: indices.to_vec() }, vec![x.0]))
    }

    /// Concatenates along the first axis. Matrices must share a column
    /// count; scalars and vectors are flattened into one vector.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, GradError> {
        let first = match xs.first() {
            Some(&v) => self.value(v),
            None => return Err(GradError::EmptyInput("concat")),
        };
        let as_matrix = first.shape().len() == 2;
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let t = self.value(v);
            if as_matrix && (t.shape().len() != 2 || t.cols() != cols)
                || !as_matrix && t.shape().len() == 2
            {
                return Err(mismatch("concat", first, t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = if as_matrix {
            Tensor::matrix(rows, cols, data)
        } else {
            Tensor::vector(data)
        };
        Ok(self.push(value, Op::Concat, xs.iter().map(|v| v.0).collect()))
    }

    /// Repeats a vector `n` times as the rows of a matrix.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var, GradError> {
        let xt = self.value(x);
        if xt.shape().len() != 1 {
            return Err(GradError::ShapeMismatch {
                op: "broadcast_rows",
                left: xt.shape().to_vec(),
                right: vec![n],
            });
        }
        let c = xt.len();
        let data = xt.data().repeat(n);
        Ok(self.push(Tensor::matrix(n, c, data), Op::BroadcastRows { n }, vec![x.0]))
    }

    /// Reverse pass from a scalar root. Overwrites the gradients of every
    /// node and returns those of the leaves.
    pub fn backward(&mut self, root: Var) -> Result<Gradients, GradError> {
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        if self.nodes[root.0].value.len() != 1 {
            return Err(GradError::NonScalarRoot(root_shape));
        }
        for node in &mut self.nodes {
            node.grad = vec![0.0; node.value.len()];
        }
        self.nodes[root.0].grad[0] = 1.0;

        for i in (0..=root.0).rev() {
            if self.nodes[i].parents.is_empty() {
                continue;
            }
            let g = std::mem::take(&mut self.nodes[i].grad);
            if g.iter().all(|&v| v == 0.0) {
                self.nodes[i].grad = g;
                continue;
            }
            let contributions = self.local_backward(i, &g);
            self.nodes[i].grad = g;
            for (parent, delta) in contributions {
                let pg = &mut self.nodes[parent].grad;
                for (a, d) in pg.iter_mut().zip(delta) {
                    *a += d;
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .map(|n| match n.op {
                Op::Leaf => Some(Tensor::new(n.value.shape().to_vec(), n.grad.clone())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of node `i` against each parent.
    fn local_backward(&self, i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[i];
        let p = &node.parents;
        let pv = |k: usize| &self.nodes[p[k]].value;
        let out = node.value.data();
        let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..g.len()).map(f).collect() };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatVec => {
                let (w, x) = (pv(0), pv(1));
                let m = w.shape()[0];
                let (dx, dw, _) = affine_backward(g, x.data(), 1, x.len(), w.data(), m);
                vec![(p[0], dw), (p[1], dx)]
            }
            Op::Linear => {
                let (x, w) = (pv(0), pv(1));
                let m = w.shape()[0];
                let (dx, dw, db) = affine_backward(g, x.data(), x.rows(), x.cols(), w.data(), m);
                vec![(p[0], dx), (p[1], dw), (p[2], db)]
            }
            Op::Add => vec![(p[0], g.to_vec()), (p[1], g.to_vec())],
            Op::Sub => vec![(p[0], g.to_vec()), (p[1], g.iter().map(|v| -v).collect())],
            Op::Mul => {
                let (a, b) = (pv(0).data(), pv(1).data());
                vec![
                    (p[0], elementwise(&|j| g[j] * b[j])),
                    (p[1], elementwise(&|j| g[j] * a[j])),
                ]
            }
            Op::Relu => {
                let x = pv(0).data();
                vec![(p[0], elementwise(&|j| if x[j] > 0.0 { g[j] } else { 0.0 }))]
            }
            Op::Tanh => vec![(p[0], elementwise(&|j| g[j] * (1.0 - out[j] * out[j])))],
            Op::Exp => vec![(p[0], elementwise(&|j| g[j] * out[j]))],
            Op::Log => {
                let x = pv(0).data();
                vec![(p[0], elementwise(&|j| g[j] / x[j]))]
            }
            Op::Abs => {
                let x = pv(0).data();
                vec![(p[0], elementwise(&|j| g[j] * sign(x[j])))]
            }
            Op::Square => {
                let x = pv(0).data();
                vec![(p[0], elementwise(&|j| 2.0 * g[j] * x[j]))]
            }
            Op::Scale(c) => vec![(p[0], g.iter().map(|v| v * c).collect())],
            Op::AddScalar(_) => vec![(p[0], g.to_vec())],
            Op::L2Norm { .. } => {
                let n = out[0];
                vec![(p[0], pv(0).data().iter().map(|x| g[0] * x / n).collect())]
            }
            Op::RowL2Norm { .. } => {
                let x = pv(0);
                let c = x.cols();
                let dx = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, v)| g[j / c] * v / out[j / c])
                    .collect();
                vec![(p[0], dx)]
            }
            Op::Mean => {
                let n = pv(0).len();
                vec![(p[0], vec![g[0] / n as f64; n])]
            }
            Op::Sum => vec![(p[0], vec![g[0]; pv(0).len()])],
            Op::LogMeanExp => {
                let x = pv(0).data();
                let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                vec![(p[0], e.iter().map(|v| g[0] * v / z).collect())]
            }
            Op::Rows { start, .. } => {
                let x = pv(0);
                let c = if x.shape().len() == 1 { 1 } else { x.cols() };
                let mut dx = vec![0.0; x.len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                vec![(p[0], dx)]
            }
            Op::Gather { indices } => {
                let x = pv(0);
                let c = x.cols();
                let mut dx = vec![0.0; x.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for (a, v) in dx[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *a += v;
                    }
                }
                vec![(p[0], dx)]
            }
            Op::Concat => {
                let mut offset = 0;
                p.iter()
                    .map(|&pi| {
                        let n = self.nodes[pi].value.len();
                        let slice = g[offset..offset + n].to_vec();
                        offset += n;
                        (pi, slice)
                    })
                    .collect()
            }
            Op::BroadcastRows { n } => {
                let c = pv(0).len();
                let mut dx = vec![0.0; c];
                for r in 0..*n {
                    for (a, v) in dx.iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *a += v;
                    }
                }
                vec![(p[0], dx)]
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Max-shifted `log(mean(exp(xs)))`. Returns `NEG_INFINITY` for empty input.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NEG_INFINITY;
    }
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|v| (v - m).exp()).sum();
    m + (s / xs.len() as f64).ln()
}

/// `out[i] = b + W x[i]` for `rows` inputs of width `n`; `W` is `[m, n]`.
pub(crate) fn affine_forward(
    x: &[f64],
    rows: usize,
    n: usize,
    w: &[f64],
    b: Option<&[f64]>,
    m: usize,
) -> Vec<f64> {
    // transpose once so the inner loop is a contiguous axpy
    let mut wt = vec![0.0; n * m];
    for j in 0..m {
        for k in 0..n {
            wt[k * m + j] = w[j * n + k];
        }
    }
    let mut out = vec![0.0; rows * m];
    for i in 0..rows {
        let o = &mut out[i * m..(i + 1) * m];
        if let Some(b) = b {
            o.copy_from_slice(b);
        }
        for (k, &xv) in x[i * n..(i + 1) * n].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (acc, &wv) in o.iter_mut().zip(&wt[k * m..(k + 1) * m]) {
                *acc += xv * wv;
            }
        }
    }
    out
}

/// Returns `(dx, dW, db)` for the affine map above.
fn affine_backward(
    g: &[f64],
    x: &[f64],
    rows: usize,
    n: usize,
    w: &[f64],
    m: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; rows * n];
    let mut dw = vec![0.0; m * n];
    let mut db = vec![0.0; m];
    for i in 0..rows {
        let xi = &x[i * n..(i + 1) * n];
        let dxi = &mut dx[i * n..(i + 1) * n];
        for j in 0..m {
            let gij = g[i * m + j];
            if gij == 0.0 {
                continue;
            }
            db[j] += gij;
            let wj = &w[j * n..(j + 1) * n];
            for (a, &wv) in dxi.iter_mut().zip(wj) {
                *a += gij * wv;
            }
            let dwj = &mut dw[j * n..(j + 1) * n];
            for (a, &xv) in dwj.iter_mut().zip(xi) {
                *a += gij * xv;
            }
        }
    }
    (dx, dw, db)
}
