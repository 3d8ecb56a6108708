use crate::error::{shape_err, Error, Result};
use crate::norms_ffn::{activation, activation_derivative, activation_second_derivative, row_stats, Activation};
use crate::numerics::{row_softmax, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `A B^T`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    /// Adds a `1 x d` row to every row.
    AddRow(Var, Var),
    /// `sigmoid(theta) o hi + (1 - sigmoid(theta)) o lo`, theta `1 x 1` or `1 x d`.
    Blend { hi: Var, lo: Var, theta: Var },
    RowSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    LayerNormVelocity { x: Var, y: Var, gamma: Var, eps: f64 },
    Activation(Var, Activation),
    ActivationDerivative(Var, Activation),
    ConcatCols(Vec<Var>),
    Gather { table: Var, rows: Vec<usize> },
    MeanRows(Var),
    /// Mean negative log-likelihood over rows that carry a target.
    CrossEntropy { logits: Var, targets: Vec<Option<usize>> },
    Sum(Var),
    SumSquares(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Hadamard(a, b) | AddRow(a, b) => vec![*a, *b],
            Blend { hi, lo, theta } => vec![*hi, *lo, *theta],
            Scale(a, _) | RowSoftmax(a) | Activation(a, _) | ActivationDerivative(a, _) | MeanRows(a) | Sum(a)
            | SumSquares(a) => vec![*a],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            LayerNormVelocity { x, y, gamma, .. } => vec![*x, *y, *gamma],
            ConcatCols(v) => v.clone(),
            Gather { table, .. } => vec![*table],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Append-only record of a computation; node inputs always precede the node.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients(Vec<Option<Matrix>>);

impl Gradients {
    /// Adjoint of `v`; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, zero-filled when absent.
    pub fn take_or_zeros(&mut self, v: Var, rows: usize, cols: usize) -> Matrix {
        self.0
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Matrix::zeros(rows, cols))
    }
}

fn gate_values(theta: &Matrix, d: usize) -> Result<Vec<f64>> {
    crate::dynamics::gate_lambda(theta, d)
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatMulNt(a, b), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), v))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(row))?;
        Ok(self.push(Op::AddRow(a, row), v))
    }

    pub fn blend(&mut self, hi: Var, lo: Var, theta: Var) -> Result<Var> {
        let (h, l) = (self.value(hi), self.value(lo));
        if h.shape() != l.shape() {
            return Err(shape_err("blend", "branch shapes differ"));
        }
        let d = h.cols();
        let lam = gate_values(self.value(theta), d)?;
        let mut out = h.clone();
        for (k, o) in out.data_mut().iter_mut().enumerate() {
            let g = lam[k % d];
            *o = g * h.data()[k] + (1.0 - g) * l.data()[k];
        }
        Ok(self.push(Op::Blend { hi, lo, theta }, out))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let v = row_softmax(self.value(a))?;
        Ok(self.push(Op::RowSoftmax(a), v))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if g.shape() != (1, d) || b.shape() != (1, d) {
            return Err(shape_err("layer_norm", "gamma/beta width"));
        }
        let mut out = Matrix::zeros(xv.rows(), d);
        for i in 0..xv.rows() {
            let (mu, var) = row_stats(xv.row(i));
            let r = 1.0 / (var + eps).sqrt();
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (xv.get(i, j) - mu) * r * g.data()[j] + b.data()[j];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, out))
    }

    pub fn layer_norm_velocity(&mut self, x: Var, y: Var, gamma: Var, eps: f64) -> Result<Var> {
        let (xv, yv, g) = (self.value(x), self.value(y), self.value(gamma));
        let d = xv.cols();
        if g.shape() != (1, d) || yv.shape() != xv.shape() {
            return Err(shape_err("layer_norm_velocity", "shapes"));
        }
        let mut out = Matrix::zeros(xv.rows(), d);
        for i in 0..xv.rows() {
            let (_, var) = row_stats(xv.row(i));
            let r = 1.0 / (var + eps).sqrt();
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = yv.get(i, j) * r * g.data()[j];
            }
        }
        Ok(self.push(Op::LayerNormVelocity { x, y, gamma, eps }, out))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let v = self.value(a).map(|z| activation(z, kind));
        self.push(Op::Activation(a, kind), v)
    }

    pub fn activation_derivative(&mut self, a: Var, kind: Activation) -> Var {
        let v = self.value(a).map(|z| activation_derivative(z, kind));
        self.push(Op::ActivationDerivative(a, kind), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<Matrix> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = Matrix::concat_cols(&mats)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    /// Rows of `table` selected by `rows`.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&r) = rows.iter().find(|&&r| r >= t.rows()) {
            return Err(shape_err("gather", format!("row {r} of {}", t.rows())));
        }
        let mut out = Matrix::zeros(rows.len(), t.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(r));
        }
        Ok(self.push(Op::Gather { table, rows: rows.to_vec() }, out))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        self.push(Op::MeanRows(a), v)
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let l = self.value(logits);
        if targets.len() != l.rows() {
            return Err(shape_err("cross_entropy", "one target slot per row"));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::InvalidArgument("cross entropy without targets".into()));
        }
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= l.cols() {
                    return Err(Error::VocabOverflow { token: t, vocab: l.cols() });
                }
                let row = l.row(i);
                let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
        }
        let v = Matrix::filled(1, 1, total / count as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            v,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).norm_sq());
        self.push(Op::SumSquares(a), v)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(shape_err("backward", "loss must be 1 x 1"));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            for input in node.op.inputs() {
                if input.0 >= id {
                    return Err(Error::GraphCycle { node: id, input: input.0 });
                }
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients(grads))
    }

    fn propagate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let mut acc = |v: Var, delta: Matrix| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_scaled_assign(&delta, 1.0),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_nt(self.value(*b))?)?;
                acc(*b, self.value(*a).matmul_tn(g)?)?;
            }
            Op::MatMulNt(a, b) => {
                acc(*a, g.matmul(self.value(*b))?)?;
                acc(*b, g.matmul_tn(self.value(*a))?)?;
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::Hadamard(a, b) => {
                acc(*a, g.hadamard(self.value(*b))?)?;
                acc(*b, g.hadamard(self.value(*a))?)?;
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone())?;
                acc(*row, column_sums(g))?;
            }
            Op::Blend { hi, lo, theta } => {
                let (h, l, th) = (self.value(*hi), self.value(*lo), self.value(*theta));
                let d = h.cols();
                let lam = gate_values(th, d)?;
                let mut dh = g.clone();
                let mut dl = g.clone();
                let mut dtheta = Matrix::zeros(1, th.cols());
                for (k, gv) in g.data().iter().enumerate() {
                    let j = k % d;
                    dh.data_mut()[k] = lam[j] * gv;
                    dl.data_mut()[k] = (1.0 - lam[j]) * gv;
                    let slot = if th.cols() == 1 { 0 } else { j };
                    dtheta.data_mut()[slot] += gv * (h.data()[k] - l.data()[k]) * lam[j] * (1.0 - lam[j]);
                }
                acc(*hi, dh)?;
                acc(*lo, dl)?;
                acc(*theta, dtheta)?;
            }
            Op::RowSoftmax(a) => {
                let s = &node.value;
                let mut dz = Matrix::zeros(s.rows(), s.cols());
                for i in 0..s.rows() {
                    let (sr, gr) = (s.row(i), g.row(i));
                    let inner: f64 = sr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (j, o) in dz.row_mut(i).iter_mut().enumerate() {
                        *o = sr[j] * (gr[j] - inner);
                    }
                }
                acc(*a, dz)?;
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (xv, gm) = (self.value(*x), self.value(*gamma));
                let (n, d) = xv.shape();
                let mut dx = Matrix::zeros(n, d);
                let mut dg = Matrix::zeros(1, d);
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for i in 0..n {
                    let (mu, var) = row_stats(xv.row(i));
                    let r = 1.0 / (var + eps).sqrt();
                    let gr = g.row(i);
                    for j in 0..d {
                        xhat[j] = (xv.get(i, j) - mu) * r;
                        dxhat[j] = gr[j] * gm.data()[j];
                        dg.data_mut()[j] += gr[j] * xhat[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = r * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                acc(*x, dx)?;
                acc(*gamma, dg)?;
                acc(*beta, column_sums(g))?;
            }
            Op::LayerNormVelocity { x, y, gamma, eps } => {
                let (xv, yv, gm) = (self.value(*x), self.value(*y), self.value(*gamma));
                let (n, d) = xv.shape();
                let mut dx = Matrix::zeros(n, d);
                let mut dy = Matrix::zeros(n, d);
                let mut dg = Matrix::zeros(1, d);
                for i in 0..n {
                    let (mu, var) = row_stats(xv.row(i));
                    let r = 1.0 / (var + eps).sqrt();
                    let gr = g.row(i);
                    let mut s = 0.0;
                    for j in 0..d {
                        let gy = gr[j] * yv.get(i, j);
                        s += gy * gm.data()[j];
                        dg.data_mut()[j] += gy * r;
                        dy.set(i, j, gr[j] * gm.data()[j] * r);
                    }
                    // d r / d x_k = -r^3 (x_k - mu) / d
                    let c = -r * r * r * s / d as f64;
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = c * (xv.get(i, j) - mu);
                    }
                }
                acc(*x, dx)?;
                acc(*y, dy)?;
                acc(*gamma, dg)?;
            }
            Op::Activation(a, kind) => {
                let z = self.value(*a);
                let mut d = g.clone();
                for (o, &zv) in d.data_mut().iter_mut().zip(z.data()) {
                    *o *= activation_derivative(zv, *kind);
                }
                acc(*a, d)?;
            }
            Op::ActivationDerivative(a, kind) => {
                let z = self.value(*a);
                let mut d = g.clone();
                for (o, &zv) in d.data_mut().iter_mut().zip(z.data()) {
                    *o *= activation_second_derivative(zv, *kind);
                }
                acc(*a, d)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(*p, g.slice_cols(start, w)?)?;
                    start += w;
                }
            }
            Op::Gather { table, rows } => {
                let t = self.value(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (o, &gv) in dt.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += gv;
                    }
                }
                acc(*table, dt)?;
            }
            Op::MeanRows(a) => {
                let n = self.value(*a).rows();
                let gr = g.row(0);
                let da = Matrix::from_fn(n, gr.len(), |_, j| gr[j] / n as f64);
                acc(*a, da)?;
            }
            Op::CrossEntropy { logits, targets } => {
                let l = self.value(*logits);
                let count = targets.iter().flatten().count() as f64;
                let scale = g.data()[0] / count;
                let mut dl = Matrix::zeros(l.rows(), l.cols());
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = dl.row_mut(i);
                        row.copy_from_slice(l.row(i));
                        crate::numerics::softmax_in_place(row);
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                }
                acc(*logits, dl)?;
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g.data()[0]))?;
            }
            Op::SumSquares(a) => acc(*a, self.value(*a).scale(2.0 * g.data()[0]))?,
        }
        Ok(())
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in g.row_iter() {
        for (o, v) in out.data_mut().iter_mut().zip(r) {
            *o += v;
        }
    }
    out
}
