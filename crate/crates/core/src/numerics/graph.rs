//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation of one forward pass together with its
//! value. [`Graph::backward`] then walks the tape in reverse and returns the
//! gradient of a scalar output with respect to every node that requires one.
//! Shape errors inside the tape are programming errors and panic; callers
//! validate external inputs before building a graph.

use std::sync::Arc;

use super::tensor::{self, matmul, matmul_t, t_matmul, Tensor};
use super::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    ClampMin(Var, f64),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    LogClamped(Var, f64),
    SoftmaxRows(Var),
    MeanRows(Var),
    SumAll(Var),
    Row(Var, usize),
    Element(Var, usize, usize),
    StackRows(Vec<Var>),
    Norm(Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    OuterAdd(Var, Var),
    PinvInit(Var),
    PinvExact(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Parameter leaves of a graph, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients but is not tied to a parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers every parameter of `store` as a gradient-carrying leaf.
    pub fn bind(&mut self, store: &ParamStore) -> Bound {
        let vars = store
            .iter()
            .map(|(id, _, p)| {
                let v = self.push(p.value.clone(), Op::Leaf, true);
                self.params.push((v, id));
                v
            })
            .collect();
        Bound(vars)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b)).expect("matmul shapes");
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_t(self.value(a), self.value(b)).expect("matmul_t shapes");
        self.binary(a, b, v, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.unary(a, v, Op::Transpose(a))
    }

    fn assert_same(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same(a, b, "add");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same(a, b, "sub");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same(a, b, "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.unary(a, v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.unary(a, v, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(a, v, Op::Relu(a))
    }

    /// `max(a, floor)` elementwise; no gradient where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(floor));
        self.unary(a, v, Op::ClampMin(a, floor))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.unary(a, v, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.unary(a, v, Op::Sigmoid(a))
    }

    /// `ln(max(a, floor))`; no gradient flows where the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(floor).ln());
        self.unary(a, v, Op::LogClamped(a, floor))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = tensor::softmax_rows(self.value(a), None);
        self.unary(a, v, Op::SoftmaxRows(a))
    }

    /// Row-wise softmax restricted to entries where `mask` (row-major, same
    /// shape as `a`) is true. Every row must keep at least one entry.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Arc<[bool]>) -> Var {
        let [r, c] = self.shape(a);
        assert_eq!(mask.len(), r * c, "mask shape");
        let v = tensor::softmax_rows(self.value(a), Some(&mask));
        self.unary(a, v, Op::SoftmaxRows(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        self.unary(a, v, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, v, Op::SumAll(a))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let v = Tensor::row_vector(self.value(a).row(i).to_vec());
        self.unary(a, v, Op::Row(a, i))
    }

    pub fn element(&mut self, a: Var, r: usize, c: usize) -> Var {
        let v = Tensor::scalar(self.value(a).get(r, c));
        self.unary(a, v, Op::Element(a, r, c))
    }

    /// Stacks `1 × c` vars into an `n × c` matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack of nothing");
        let cols = self.shape(parts[0])[1];
        let mut data = Vec::with_capacity(parts.len() * cols);
        let mut rg = false;
        for &p in parts {
            assert_eq!(self.shape(p), [1, cols], "stack_rows expects row vectors");
            data.extend_from_slice(self.value(p).data());
            rg |= self.nodes[p.0].requires_grad;
        }
        let v = Tensor::from_vec(parts.len(), cols, data).expect("stack shape");
        self.push(v, Op::StackRows(parts.to_vec()), rg)
    }

    /// Euclidean (Frobenius) norm as a `1 × 1` value.
    pub fn norm(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).frobenius());
        self.unary(a, v, Op::Norm(a))
    }

    /// `a · s` for a `1 × 1` var `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), [1, 1], "mul_scalar expects a scalar");
        let sv = self.scalar(s);
        let v = self.value(a).scale(sv);
        self.binary(a, s, v, Op::MulScalar(a, s))
    }

    /// `a / s` for a `1 × 1` var `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), [1, 1], "div_scalar expects a scalar");
        let sv = self.scalar(s);
        let v = self.value(a).map(|x| x / sv);
        self.binary(a, s, v, Op::DivScalar(a, s))
    }

    /// `out[i][j] = col[i] + row[j]` for an `n × 1` column and a `1 × m` row.
    pub fn outer_add(&mut self, col: Var, row: Var) -> Var {
        let [n, one] = self.shape(col);
        let [one_b, m] = self.shape(row);
        assert!(one == 1 && one_b == 1, "outer_add expects a column and a row");
        let (c, r) = (self.value(col), self.value(row));
        let v = Tensor::from_fn(n, m, |i, j| c.get(i, 0) + r.get(0, j));
        self.binary(col, row, v, Op::OuterAdd(col, row))
    }

    /// Starting point of the iterative pseudo-inverse:
    /// `Kᵀ / (max column abs-sum · max row abs-sum)`.
    pub fn pinv_init(&mut self, k: Var) -> Var {
        let kv = self.value(k);
        let (_, c) = max_col_abs_sum(kv);
        let (_, r) = max_row_abs_sum(kv);
        let v = kv.transpose().scale(1.0 / (c * r));
        self.unary(k, v, Op::PinvInit(k))
    }

    /// Exact Moore–Penrose pseudo-inverse (SVD). Differentiable where the
    /// rank is locally constant.
    pub fn pinv_exact(&mut self, a: Var) -> Var {
        let v = tensor::pinv_exact(self.value(a));
        self.unary(a, v, Op::PinvExact(a))
    }

    // Compositions.

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum_all(p)
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        self.dot(a, a)
    }

    /// Cosine similarity of two same-shaped vars as a `1 × 1` value. The norm
    /// product is floored at `eps`, so a zero vector gives 0 rather than NaN.
    pub fn cosine(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let num = self.dot(a, b);
        let na = self.norm(a);
        let nb = self.norm(b);
        let den = self.mul(na, nb);
        let den = self.clamp_min(den, eps);
        self.div_scalar(num, den)
    }

    /// Gradient of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients {
        let n = out.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let [r, c] = self.shape(out);
        grads[out.0] = Some(Tensor::filled(r, c, 1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients(grads)
    }

    /// Adds the gradient of each bound parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for &(v, id) in &self.params {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, matmul_t(g, val(*b)).unwrap());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, t_matmul(val(*a), g).unwrap());
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, matmul(g, val(*b)).unwrap());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, t_matmul(g, val(*a)).unwrap());
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let d = g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::ClampMin(a, floor) => {
                let d = g.zip_map(val(*a), |gv, x| if x > *floor { gv } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let d = g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { slope * gv });
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y));
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                self.accumulate(grads, *a, d);
            }
            Op::LogClamped(a, floor) => {
                let d = g.zip_map(val(*a), |gv, x| if x > *floor { gv / x } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = tensor::dot(yr, gr);
                    for (o, (yv, gv)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - inner);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MeanRows(a) => {
                let [rows, cols] = val(*a).shape();
                let inv = 1.0 / rows as f64;
                let d = Tensor::from_fn(rows, cols, |_, c| g.get(0, c) * inv);
                self.accumulate(grads, *a, d);
            }
            Op::SumAll(a) => {
                let [rows, cols] = val(*a).shape();
                self.accumulate(grads, *a, Tensor::filled(rows, cols, g.item()));
            }
            Op::Row(a, i) => {
                let [rows, cols] = val(*a).shape();
                let mut d = Tensor::zeros(rows, cols);
                d.row_mut(*i).copy_from_slice(g.data());
                self.accumulate(grads, *a, d);
            }
            Op::Element(a, r, c) => {
                let [rows, cols] = val(*a).shape();
                let mut d = Tensor::zeros(rows, cols);
                d.set(*r, *c, g.item());
                self.accumulate(grads, *a, d);
            }
            Op::StackRows(parts) => {
                for (k, p) in parts.iter().enumerate() {
                    if self.wants(*p) {
                        self.accumulate(grads, *p, Tensor::row_vector(g.row(k).to_vec()));
                    }
                }
            }
            Op::Norm(a) => {
                let n = node.value.item();
                let d = if n > 0.0 {
                    val(*a).scale(g.item() / n)
                } else {
                    let [rows, cols] = val(*a).shape();
                    Tensor::zeros(rows, cols)
                };
                self.accumulate(grads, *a, d);
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s).item();
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.scale(sv));
                }
                if self.wants(*s) {
                    let ds = tensor::dot(g.data(), val(*a).data());
                    self.accumulate(grads, *s, Tensor::scalar(ds));
                }
            }
            Op::DivScalar(a, s) => {
                let sv = val(*s).item();
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.scale(1.0 / sv));
                }
                if self.wants(*s) {
                    let ds = -tensor::dot(g.data(), val(*a).data()) / (sv * sv);
                    self.accumulate(grads, *s, Tensor::scalar(ds));
                }
            }
            Op::OuterAdd(col, row) => {
                let [n, m] = g.shape();
                if self.wants(*col) {
                    let d = Tensor::from_fn(n, 1, |i, _| g.row(i).iter().sum());
                    self.accumulate(grads, *col, d);
                }
                if self.wants(*row) {
                    let d = Tensor::from_fn(1, m, |_, j| (0..n).map(|i| g.get(i, j)).sum());
                    self.accumulate(grads, *row, d);
                }
            }
            Op::PinvInit(k) => {
                let kv = val(*k);
                let (jc, c) = max_col_abs_sum(kv);
                let (ir, r) = max_row_abs_sum(kv);
                let s = c * r;
                // y = Kᵀ / s  =>  dK = Gᵀ/s − <G, Kᵀ>/s² · ∂s/∂K
                let gk = tensor::dot(g.data(), node.value.data()) * s / (s * s);
                let mut d = g.transpose().scale(1.0 / s);
                for i in 0..kv.rows() {
                    let sg = kv.get(i, jc).signum();
                    let cur = d.get(i, jc);
                    d.set(i, jc, cur - gk * r * sg);
                }
                for j in 0..kv.cols() {
                    let sg = kv.get(ir, j).signum();
                    let cur = d.get(ir, j);
                    d.set(ir, j, cur - gk * c * sg);
                }
                self.accumulate(grads, *k, d);
            }
            Op::PinvExact(a) => {
                let av = val(*a);
                let y = &node.value;
                let yt = y.transpose();
                let ay = matmul(av, y).unwrap();
                let ya = matmul(y, av).unwrap();
                let i_m = Tensor::identity(ay.rows()).zip_map(&ay, |x, z| x - z);
                let i_n = Tensor::identity(ya.rows()).zip_map(&ya, |x, z| x - z);
                let gt = g.transpose();
                // −Yᵀ G Yᵀ + (I − AY) Gᵀ Y Yᵀ + Yᵀ Y Gᵀ (I − YA)
                let t1 = matmul(&matmul(&yt, g).unwrap(), &yt).unwrap().scale(-1.0);
                let yyt = matmul(y, &yt).unwrap();
                let t2 = matmul(&matmul(&i_m, &gt).unwrap(), &yyt).unwrap();
                let yty = matmul(&yt, y).unwrap();
                let t3 = matmul(&matmul(&yty, &gt).unwrap(), &i_n).unwrap();
                let mut d = t1;
                d.add_assign(&t2);
                d.add_assign(&t3);
                self.accumulate(grads, *a, d);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn max_col_abs_sum(t: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for j in 0..t.cols() {
        let s: f64 = (0..t.rows()).map(|i| t.get(i, j).abs()).sum();
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

fn max_row_abs_sum(t: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..t.rows() {
        let s: f64 = t.row(i).iter().map(|v| v.abs()).sum();
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}
