//! Reverse-mode differentiable tape over small dense vectors and matrices.
//!
//! A forward pass records one [`Node`] per operation on a [`Tape`];
//! [`Tape::backward`] then walks the record in reverse and accumulates
//! gradients for every node, including leaves bound from parameter
//! tensors. The op set is exactly what the layer stack needs: affine
//! maps, pointwise nonlinearities, concatenation, reductions, and the
//! scalar gather/stack plumbing used by attention and batched losses.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("contract violation: {0}")]
    Contract(&'static str),
}

fn shape_err(expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> TensorError {
    TensorError::Shape {
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}

/// Dense value with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(shape_err(&shape, data.len()));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![F::zero(); n], grad: None }
    }

    pub fn scalar(v: F) -> Self {
        Self { shape: vec![], data: vec![v], grad: None }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Self { shape: vec![data.len()], data, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<F>) -> Result<(), TensorError> {
        if grad.len() != self.data.len() {
            return Err(shape_err(self.data.len(), grad.len()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

enum Op<F: Scalar> {
    Leaf,
    /// y[j] = sum_i x[i] * w[i*m + j]
    VecMat { x: Var, w: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// y = s * v, s scalar
    SMul { s: Var, v: Var },
    Scale(Var, F),
    AddConst(Var, F),
    Relu(Var),
    LeakyRelu(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Dot(Var, Var),
    /// y = num / den, den scalar
    DivScalar { num: Var, den: Var },
    Pick { src: Var, idx: usize },
    Stack(Vec<Var>),
}

struct Node<F: Scalar> {
    value: Vec<F>,
    shape: Shape,
    op: Op<F>,
}

/// Computation record for one forward pass.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Vec<F>>,
    ran_backward: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), ran_backward: false }
    }

    /// Drop the recorded computation but keep allocation capacity.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.ran_backward = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<F>, shape: Shape, op: Op<F>) -> Var {
        debug_assert_eq!(value.len(), shape.len());
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    /// Gradient of the last `backward` loss w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Result<&[F], TensorError> {
        if !self.ran_backward {
            return Err(TensorError::Contract("gradient requested before backward"));
        }
        Ok(&self.grads[v.0])
    }

    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        let shape = match t.shape() {
            [] => Shape::Scalar,
            [n] => Shape::Vector(*n),
            [r, c] => Shape::Matrix(*r, *c),
            other => panic!("tape supports rank <= 2, got {other:?}"),
        };
        self.push(t.data().to_vec(), shape, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, v: F) -> Var {
        self.push(vec![v], Shape::Scalar, Op::Leaf)
    }

    pub fn leaf_vector(&mut self, v: &[F]) -> Var {
        self.push(v.to_vec(), Shape::Vector(v.len()), Op::Leaf)
    }

    pub fn vecmat(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (n, m) = match (self.shape(x), self.shape(w)) {
            (Shape::Vector(n), Shape::Matrix(r, m)) if n == r => (n, m),
            (sx, sw) => return Err(shape_err("vector [n] x matrix [n,m]", (sx, sw))),
        };
        let mut out = vec![F::zero(); m];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            for i in 0..n {
                let xi = xv[i];
                let row = &wv[i * m..(i + 1) * m];
                for j in 0..m {
                    out[j] += xi * row[j];
                }
            }
        }
        Ok(self.push(out, Shape::Vector(m), Op::VecMat { x, w }))
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(sa, sb));
        }
        let value: Vec<F> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(value, sa, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn smul(&mut self, s: Var, v: Var) -> Result<Var, TensorError> {
        if self.shape(s) != Shape::Scalar {
            return Err(shape_err(Shape::Scalar, self.shape(s)));
        }
        let sv = self.nodes[s.0].value[0];
        let value: Vec<F> = self.nodes[v.0].value.iter().map(|&x| sv * x).collect();
        let shape = self.shape(v);
        Ok(self.push(value, shape, Op::SMul { s, v }))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value: Vec<F> = self.nodes[a.0].value.iter().map(|&x| c * x).collect();
        let shape = self.shape(a);
        self.push(value, shape, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: F) -> Var {
        let value: Vec<F> = self.nodes[a.0].value.iter().map(|&x| x + c).collect();
        let shape = self.shape(a);
        self.push(value, shape, Op::AddConst(a, c))
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let value: Vec<F> = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a);
        self.push(value, shape, op)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > F::zero() { x } else { F::zero() }, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        self.unary(a, |x| if x > F::zero() { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| F::one() / (F::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat of zero tensors"));
        }
        let mut value = Vec::new();
        for &p in parts {
            match self.shape(p) {
                Shape::Vector(_) | Shape::Scalar => value.extend_from_slice(&self.nodes[p.0].value),
                s => return Err(shape_err("vector", s)),
            }
        }
        let n = value.len();
        Ok(self.push(value, Shape::Vector(n), Op::Concat(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().fold(F::zero(), |acc, &x| acc + x);
        self.push(vec![s], Shape::Scalar, Op::Sum(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(sa, sb));
        }
        let s = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .fold(F::zero(), |acc, (&x, &y)| acc + x * y);
        Ok(self.push(vec![s], Shape::Scalar, Op::Dot(a, b)))
    }

    pub fn div_scalar(&mut self, num: Var, den: Var) -> Result<Var, TensorError> {
        if self.shape(den) != Shape::Scalar {
            return Err(shape_err(Shape::Scalar, self.shape(den)));
        }
        let d = self.nodes[den.0].value[0];
        let value: Vec<F> = self.nodes[num.0].value.iter().map(|&x| x / d).collect();
        let shape = self.shape(num);
        Ok(self.push(value, shape, Op::DivScalar { num, den }))
    }

    pub fn pick(&mut self, src: Var, idx: usize) -> Result<Var, TensorError> {
        match self.shape(src) {
            Shape::Vector(n) if idx < n => {}
            s => return Err(shape_err(format!("vector with index {idx} in range"), s)),
        }
        let v = self.nodes[src.0].value[idx];
        Ok(self.push(vec![v], Shape::Scalar, Op::Pick { src, idx }))
    }

    pub fn stack(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let mut value = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.shape(p) != Shape::Scalar {
                return Err(shape_err(Shape::Scalar, self.shape(p)));
            }
            value.push(self.nodes[p.0].value[0]);
        }
        if value.is_empty() {
            return Err(TensorError::Contract("stack of zero scalars"));
        }
        let n = value.len();
        Ok(self.push(value, Shape::Vector(n), Op::Stack(parts.to_vec())))
    }

    /// Numerically stable softmax over a score vector. The max shift is
    /// treated as a constant, which leaves the gradient unchanged.
    pub fn softmax(&mut self, scores: Var) -> Result<Var, TensorError> {
        match self.shape(scores) {
            Shape::Vector(n) if n > 0 => {}
            s => return Err(shape_err("nonempty vector", s)),
        }
        let max = self.nodes[scores.0]
            .value
            .iter()
            .fold(F::neg_infinity(), |a, &b| if b > a { b } else { a });
        let shifted = self.add_const(scores, -max);
        let e = self.exp(shifted);
        let total = self.sum(e);
        self.div_scalar(e, total)
    }

    /// Mean squared error against a constant target vector.
    pub fn mse(&mut self, pred: Var, target: &[F]) -> Result<Var, TensorError> {
        let n = match self.shape(pred) {
            Shape::Vector(n) if n == target.len() && n > 0 => n,
            s => return Err(shape_err(format!("vector of {}", target.len()), s)),
        };
        let t = self.leaf_vector(target);
        let diff = self.sub(pred, t)?;
        let sq = self.mul(diff, diff)?;
        let total = self.sum(sq);
        Ok(self.scale(total, F::of(1.0 / n as f64)))
    }

    /// Reverse pass from a scalar loss. Populates gradients for every node.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::Contract("backward called before forward"));
        }
        if self.shape(loss) != Shape::Scalar {
            return Err(shape_err(Shape::Scalar, self.shape(loss)));
        }
        self.grads.clear();
        self.grads.extend(self.nodes.iter().map(|n| vec![F::zero(); n.value.len()]));
        self.grads[loss.0][0] = F::one();

        for i in (0..self.nodes.len()).rev() {
            let g = std::mem::take(&mut self.grads[i]);
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::VecMat { x, w } => {
                    let (x, w) = (*x, *w);
                    let n = match self.shape(x) {
                        Shape::Vector(n) => n,
                        _ => unreachable!(),
                    };
                    let m = g.len();
                    let (xv, wv): (Vec<F>, Vec<F>) =
                        (self.nodes[x.0].value.clone(), self.nodes[w.0].value.clone());
                    for idx in 0..n {
                        let mut acc = F::zero();
                        let row = &wv[idx * m..(idx + 1) * m];
                        for j in 0..m {
                            acc += g[j] * row[j];
                        }
                        self.grads[x.0][idx] += acc;
                    }
                    for idx in 0..n {
                        let xi = xv[idx];
                        let grow = &mut self.grads[w.0][idx * m..(idx + 1) * m];
                        for j in 0..m {
                            grow[j] += xi * g[j];
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    for (k, &gv) in g.iter().enumerate() {
                        self.grads[a.0][k] += gv;
                    }
                    for (k, &gv) in g.iter().enumerate() {
                        self.grads[b.0][k] += gv;
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    for (k, &gv) in g.iter().enumerate() {
                        self.grads[a.0][k] += gv;
                    }
                    for (k, &gv) in g.iter().enumerate() {
                        self.grads[b.0][k] -= gv;
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    for (k, &gv) in g.iter().enumerate() {
                        self.grads[a.0][k] += gv * bv[k];
                    }
                    for (k, &gv) in g.iter().enumerate() {
                        self.grads[b.0][k] += gv * av[k];
                    }
                }
                Op::SMul { s, v } => {
                    let (s, v) = (*s, *v);
                    let sv = self.nodes[s.0].value[0];
                    let vv = self.nodes[v.0].value.clone();
                    let mut acc = F::zero();
                    for (k, &gv) in g.iter().enumerate() {
                        self.grads[v.0][k] += gv * sv;
                        acc += gv * vv[k];
                    }
                    self.grads[s.0][0] += acc;
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    for (k, &gv) in g.iter().enumerate() {
                        self.grads[a.0][k] += gv * c;
                    }
                }
                Op::AddConst(a, _) => {
                    let a = *a;
                    for (k, &gv) in g.iter().enumerate() {
                        self.grads[a.0][k] += gv;
                    }
                }
                Op::Relu(a) => {
                    let a = *a;
                    let out = self.nodes[i].value.clone();
                    for (k, &gv) in g.iter().enumerate() {
                        if out[k] > F::zero() {
                            self.grads[a.0][k] += gv;
                        }
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let (a, slope) = (*a, *slope);
                    let inp = self.nodes[a.0].value.clone();
                    for (k, &gv) in g.iter().enumerate() {
                        let d = if inp[k] > F::zero() { F::one() } else { slope };
                        self.grads[a.0][k] += gv * d;
                    }
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let out = self.nodes[i].value.clone();
                    for (k, &gv) in g.iter().enumerate() {
                        self.grads[a.0][k] += gv * out[k] * (F::one() - out[k]);
                    }
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let out = self.nodes[i].value.clone();
                    for (k, &gv) in g.iter().enumerate() {
                        self.grads[a.0][k] += gv * (F::one() - out[k] * out[k]);
                    }
                }
                Op::Exp(a) => {
                    let a = *a;
                    let out = self.nodes[i].value.clone();
                    for (k, &gv) in g.iter().enumerate() {
                        self.grads[a.0][k] += gv * out[k];
                    }
                }
                Op::Concat(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        for k in 0..len {
                            self.grads[p.0][k] += g[off + k];
                        }
                        off += len;
                    }
                }
                Op::Sum(a) => {
                    let a = *a;
                    let gv = g[0];
                    for slot in self.grads[a.0].iter_mut() {
                        *slot += gv;
                    }
                }
                Op::Dot(a, b) => {
                    let (a, b) = (*a, *b);
                    let gv = g[0];
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    for (k, &bk) in bv.iter().enumerate() {
                        self.grads[a.0][k] += gv * bk;
                    }
                    for (k, &ak) in av.iter().enumerate() {
                        self.grads[b.0][k] += gv * ak;
                    }
                }
                Op::DivScalar { num, den } => {
                    let (num, den) = (*num, *den);
                    let d = self.nodes[den.0].value[0];
                    let nv = self.nodes[num.0].value.clone();
                    let mut acc = F::zero();
                    for (k, &gv) in g.iter().enumerate() {
                        self.grads[num.0][k] += gv / d;
                        acc -= gv * nv[k] / (d * d);
                    }
                    self.grads[den.0][0] += acc;
                }
                Op::Pick { src, idx } => {
                    let (src, idx) = (*src, *idx);
                    self.grads[src.0][idx] += g[0];
                }
                Op::Stack(parts) => {
                    let parts = parts.clone();
                    for (k, p) in parts.iter().enumerate() {
                        self.grads[p.0][0] += g[k];
                    }
                }
            }
            self.grads[i] = g;
        }
        self.ran_backward = true;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(v: Vec<f64>) -> Tensor<f64> {
        Tensor::vector(v)
    }

    #[test]
    fn vecmat_matches_triple_loop() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(vec![1.0, -2.0, 0.5]));
        let w = tape.leaf(&Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = tape.vecmat(x, w).unwrap();
        // hand loop
        let xs = [1.0, -2.0, 0.5];
        let ws = [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let mut expect = [0.0f64; 2];
        for i in 0..3 {
            for j in 0..2 {
                expect[j] += xs[i] * ws[i][j];
            }
        }
        assert_eq!(tape.value(y), &expect);
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut tape: Tape<f64> = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(TensorError::Contract(_))));
    }

    #[test]
    fn constant_loss_gives_zero_parameter_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(&t64(vec![3.0, -1.0]));
        let c = tape.leaf_scalar(5.0);
        // loss does not depend on w
        let loss = tape.scale(c, 2.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn mse_gradient_closed_form() {
        let mut tape = Tape::new();
        let pred = tape.leaf(&t64(vec![1.0, -2.0, 0.0, 4.0]));
        let target = [0.5, 0.5, 0.5, 0.5];
        let loss = tape.mse(pred, &target).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(pred).unwrap();
        let n = 4.0;
        for k in 0..4 {
            let expect = 2.0 * (tape.value(pred)[k] - target[k]) / n;
            assert!((g[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_matches_direct() {
        let mut tape = Tape::new();
        let s = tape.leaf(&t64(vec![0.3, -1.2, 2.0, 0.0]));
        let a = tape.softmax(s).unwrap();
        let v = tape.value(a);
        let direct: Vec<f64> = {
            let e: Vec<f64> = [0.3, -1.2, 2.0, 0.0].iter().map(|x| x.exp()).collect();
            let t: f64 = e.iter().sum();
            e.iter().map(|x| x / t).collect()
        };
        let sum: f64 = v.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (got, want) in v.iter().zip(&direct) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t64(vec![1.0, 2.0]));
        let b = tape.leaf(&t64(vec![1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("Vector(2)") && msg.contains("Vector(3)"), "{msg}");
    }
}
