//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] is a tape built fresh for every forward pass. Nodes are
//! appended in evaluation order, so the backward sweep is a single reverse
//! walk. Parameters enter through [`Graph::param`] and their gradients are
//! collected per [`ParamId`] after [`Graph::backward`].

use super::mat::Mat;
use super::store::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Silu(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    NormalizeRows(Var, Vec<f64>),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    BroadcastRows(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    /// Scalar node whose input gradients were computed in closed form.
    ScalarFn(Vec<(Var, Mat)>),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
}

/// Gradients of a finished backward pass, keyed by parameter.
pub struct ParamGrads {
    pub grads: Vec<(ParamId, Mat)>,
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

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.data()[0]
    }

    /// Constant input; no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input leaf whose gradient is retained (for gradient checks on inputs).
    pub fn variable(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.push(store.value(id).clone(), Op::Param(id), trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Div(a, b), rg)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row expects 1x{}", av.cols());
        let mut v = av.clone();
        for r in 0..v.rows() {
            v.row_mut(r).iter_mut().zip(rv.data()).for_each(|(x, b)| *x += b);
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "mul_row expects 1x{}", av.cols());
        let mut v = av.clone();
        for r in 0..v.rows() {
            v.row_mut(r).iter_mut().zip(rv.data()).for_each(|(x, b)| *x *= b);
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::MulRow(a, row), rg)
    }

    /// `a * s` for a `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(a).scale(sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(v, Op::MulScalar(a, s), rg)
    }

    /// `a / s` for a `1 x 1` node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(a).map(|x| x / sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(v, Op::DivScalar(a, s), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddConst(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(v, op, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x / (1.0 + (-x).exp()), Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let c = av.cols() as f64;
        let mut v = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(v, Op::LayerNormRows(a, inv_std), rg)
    }

    /// Row-wise unit-L2 normalization.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut v = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let rg = self.rg(a);
        self.push(v, Op::NormalizeRows(a, norms), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(v, Op::MeanAll(a), rg)
    }

    /// Column means, `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).col_means();
        let rg = self.rg(a);
        self.push(v, Op::MeanRows(a), rg)
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), 1, "broadcast_rows expects a single row");
        let mut data = Vec::with_capacity(n * av.cols());
        for _ in 0..n {
            data.extend_from_slice(av.data());
        }
        let v = Mat::from_vec(n, av.cols(), data);
        let rg = self.rg(a);
        self.push(v, Op::BroadcastRows(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        let rg = self.rg(a);
        self.push(v, Op::SliceRows(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::concat_cols(&mats);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::concat_rows(&mats);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Scalar produced outside the tape together with `d value / d input`
    /// for each input. The backward pass only rescales those gradients.
    pub fn scalar_fn(&mut self, value: f64, inputs: Vec<(Var, Mat)>) -> Var {
        for (v, g) in &inputs {
            assert_eq!(self.value(*v).shape(), g.shape(), "scalar_fn gradient shape");
        }
        let rg = inputs.iter().any(|(v, _)| self.rg(*v));
        self.push(Mat::scalar(value), Op::ScalarFn(inputs), rg)
    }

    fn accumulate(&mut self, v: Var, g: Mat) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient of the (leaf) node after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Backpropagates from a scalar root and returns parameter gradients.
    pub fn backward(&mut self, root: Var) -> ParamGrads {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Mat::scalar(1.0));
        let mut params: Vec<(ParamId, Mat)> = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &g, &mut params);
            self.nodes[i].op = op;
            self.grads[i] = Some(g);
        }
        params.sort_by_key(|(id, _)| id.index());
        let mut merged: Vec<(ParamId, Mat)> = Vec::new();
        for (id, g) in params {
            match merged.last_mut() {
                Some((last, acc)) if *last == id => acc.add_assign(&g),
                _ => merged.push((id, g)),
            }
        }
        ParamGrads { grads: merged }
    }

    fn backward_op(&mut self, i: usize, op: &Op, g: &Mat, params: &mut Vec<(ParamId, Mat)>) {
        match op {
            Op::Leaf => {}
            Op::Param(id) => params.push((*id, g.clone())),
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul_t(self.value(*b));
                    self.accumulate(*a, ga);
                }
                if self.rg(*b) {
                    let gb = self.value(*a).t_matmul(g);
                    self.accumulate(*b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul(self.value(*b));
                    self.accumulate(*a, ga);
                }
                if self.rg(*b) {
                    let gb = g.t_matmul(self.value(*a));
                    self.accumulate(*b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y);
                let gb = g.zip_map(self.value(*a), |x, y| x * y);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                let ga = g.zip_map(bv, |x, y| x / y);
                let out = &self.nodes[i].value;
                let gb = Mat::from_fn(g.rows(), g.cols(), |r, c| -g.get(r, c) * out.get(r, c) / bv.get(r, c));
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::AddRow(a, row) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*row, g.col_sums());
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row).clone();
                let av = self.value(*a);
                let gr = g.zip_map(av, |x, y| x * y).col_sums();
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    ga.row_mut(r).iter_mut().zip(rv.data()).for_each(|(x, b)| *x *= b);
                }
                self.accumulate(*a, ga);
                self.accumulate(*row, gr);
            }
            Op::MulScalar(a, s) => {
                let sv = self.scalar(*s);
                let gs = Mat::scalar(g.dot(self.value(*a)));
                self.accumulate(*a, g.scale(sv));
                self.accumulate(*s, gs);
            }
            Op::DivScalar(a, s) => {
                let sv = self.scalar(*s);
                let gs = Mat::scalar(-g.dot(self.value(*a)) / (sv * sv));
                self.accumulate(*a, g.scale(1.0 / sv));
                self.accumulate(*s, gs);
            }
            Op::Scale(a, c) => self.accumulate(*a, g.scale(*c)),
            Op::AddConst(a) => self.accumulate(*a, g.clone()),
            Op::Silu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * (s + x * s * (1.0 - s))
                });
                self.accumulate(*a, ga);
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(*a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(&self.nodes[i].value, |gv, y| gv * (1.0 - y * y));
                self.accumulate(*a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(&self.nodes[i].value, |gv, y| gv * y * (1.0 - y));
                self.accumulate(*a, ga);
            }
            Op::Exp(a) => {
                let ga = g.zip_map(&self.nodes[i].value, |gv, y| gv * y);
                self.accumulate(*a, ga);
            }
            Op::Sqrt(a) => {
                let ga = g.zip_map(&self.nodes[i].value, |gv, y| gv * 0.5 / y);
                self.accumulate(*a, ga);
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| 2.0 * gv * x);
                self.accumulate(*a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yv, gv)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::LayerNormRows(a, inv_std) => {
                let y = &self.nodes[i].value;
                let c = y.cols() as f64;
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mg = gr.iter().sum::<f64>() / c;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c;
                    for (o, (yv, gv)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = inv_std[r] * (gv - mg - yv * mgy);
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::NormalizeRows(a, norms) => {
                let y = &self.nodes[i].value;
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yv, gv)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = (gv - yv * dot) / norms[r];
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(*a, Mat::filled(r, c, g.data()[0]));
            }
            Op::MeanAll(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(*a, Mat::filled(r, c, g.data()[0] / (r * c) as f64));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.value(*a).shape();
                let scaled = g.scale(1.0 / r as f64);
                let ga = Mat::from_fn(r, c, |_, j| scaled.get(0, j));
                self.accumulate(*a, ga);
            }
            Op::BroadcastRows(a) => self.accumulate(*a, g.col_sums()),
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Mat::zeros(r, c);
                for row in 0..r {
                    ga.row_mut(row)[*start..*start + g.cols()].copy_from_slice(g.row(row));
                }
                self.accumulate(*a, ga);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Mat::zeros(r, c);
                ga.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                self.accumulate(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let gp = g.slice_cols(off, w);
                    off += w;
                    self.accumulate(p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    let gp = g.slice_rows(off, h);
                    off += h;
                    self.accumulate(p, gp);
                }
            }
            Op::Transpose(a) => self.accumulate(*a, g.transpose()),
            Op::ScalarFn(inputs) => {
                let s = g.data()[0];
                for (v, dv) in inputs {
                    self.accumulate(*v, dv.scale(s));
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut v = m.clone();
    for r in 0..v.rows() {
        let row = v.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        row.iter_mut().for_each(|x| *x /= total);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of every input leaf of `build`.
    fn check(inputs: Vec<Mat>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.variable(m.clone())).collect();
        let root = build(&mut g, &vars);
        g.backward(root);
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = g
                .grad(vars[k])
                .cloned()
                .unwrap_or_else(|| Mat::zeros(m.rows(), m.cols()));
            for idx in 0..m.len() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, x)| {
                            let mut x = x.clone();
                            if j == k {
                                x.data_mut()[idx] += delta;
                            }
                            g2.variable(x)
                        })
                        .collect();
                    let r = build(&mut g2, &vs);
                    g2.scalar(r)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[idx];
                let err = (a - numeric).abs() / (1.0f64).max(a.abs()).max(numeric.abs());
                assert!(err < 1e-6, "input {k} idx {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn matmul_family_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2));
        check(vec![a.clone(), b], |g, v| {
            let c = g.matmul(v[0], v[1]);
            let s = g.square(c);
            g.sum_all(s)
        });
        let b2 = rand_mat(&mut rng, 5, 4);
        check(vec![a, b2], |g, v| {
            let c = g.matmul_t(v[0], v[1]);
            let t = g.tanh(c);
            g.sum_all(t)
        });
    }

    #[test]
    fn elementwise_and_row_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 3, 4).map(|x| x + 2.0);
        let row = rand_mat(&mut rng, 1, 4);
        check(vec![a, b, row], |g, v| {
            let d = g.div(v[0], v[1]);
            let m = g.mul(d, v[0]);
            let ar = g.add_row(m, v[2]);
            let mr = g.mul_row(ar, v[2]);
            let s = g.silu(mr);
            let sg = g.sigmoid(s);
            let e = g.exp(sg);
            let sub = g.sub(e, v[1]);
            let sq = g.square(sub);
            g.mean_all(sq)
        });
    }

    #[test]
    fn normalization_and_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 4, 5);
        let w = rand_mat(&mut rng, 4, 5);
        check(vec![a.clone(), w.clone()], |g, v| {
            let s = g.softmax_rows(v[0]);
            let p = g.mul(s, v[1]);
            g.sum_all(p)
        });
        check(vec![a.clone(), w.clone()], |g, v| {
            let s = g.layer_norm_rows(v[0], 1e-5);
            let p = g.mul(s, v[1]);
            g.sum_all(p)
        });
        check(vec![a, w], |g, v| {
            let s = g.normalize_rows(v[0]);
            let p = g.mul(s, v[1]);
            g.sum_all(p)
        });
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_mat(&mut rng, 4, 6);
        let s = Mat::scalar(1.7);
        let w = rand_mat(&mut rng, 3, 6);
        check(vec![a, s, w], |g, v| {
            let l = g.slice_cols(v[0], 0, 3);
            let r = g.slice_cols(v[0], 3, 3);
            let rs = g.div_scalar(r, v[1]);
            let ls = g.mul_scalar(l, v[1]);
            let c = g.concat_cols(&[rs, ls]);
            let top = g.slice_rows(c, 0, 1);
            let rest = g.slice_rows(c, 1, 3);
            let mr = g.mean_rows(rest);
            let bc = g.broadcast_rows(mr, 2);
            let cat = g.concat_rows(&[top, bc]);
            let t = g.transpose(cat);
            let wt = g.transpose(v[2]);
            let p = g.mul(t, wt);
            let pos = g_abs_plus_one(g, p);
            let sq = g.sqrt(pos);
            g.sum_all(sq)
        });
    }

    fn g_abs_plus_one(g: &mut Graph, v: Var) -> Var {
        let s = g.square(v);
        g.add_const(s, 1.0)
    }

    #[test]
    fn scalar_fn_rescales_supplied_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Mat::row_vector(&[1.0, 2.0]));
        let v = g.scalar_fn(5.0, vec![(x, Mat::row_vector(&[3.0, 4.0]))]);
        let y = g.scale(v, 2.0);
        g.backward(y);
        assert_eq!(g.grad(x).unwrap().data(), &[6.0, 8.0]);
    }
}
