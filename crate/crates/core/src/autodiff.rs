//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every vector-Jacobian product is itself recorded on the tape, so the
//! result of [`Graph::grad`] is an ordinary [`Var`] that can be
//! differentiated again. The meta-update relies on this: the inner step
//! `theta' = theta - alpha * step(grad L(theta))` stays a function of
//! `theta` and the outer gradient flows through it.
//!
//! Everything is 2-D. Row vectors are `1 x n`, column vectors `m x 1` and
//! scalars `1 x 1`.

use std::rc::Rc;

use ndarray::{Array2, Axis};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Rc<Array2<f64>>),
    MatMul(Var, Var),
    Transpose(Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    SelectCols(Var, Rc<Vec<usize>>),
    ScatterCols(Var, Rc<Vec<usize>>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
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

    /// Differentiable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let r = self.recip(b);
        self.mul(a, r)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = -self.value(a);
        let rg = self.rg(a);
        self.push(value, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, mask: Rc<Array2<f64>>) -> Var {
        assert_eq!(self.shape(a), mask.dim(), "mul_const: shape mismatch");
        let value = self.value(a) * &*mask;
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, mask), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (_, k) = self.shape(a);
        assert_eq!(k, self.shape(b).0, "matmul: inner dimension mismatch");
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Column sums, `m x n -> 1 x n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(value, Op::SumRows(a), rg)
    }

    /// Row sums, `m x n -> m x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let r = self.sum_rows(a);
        self.sum_cols(r)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, 1.0 / (m * n) as f64)
    }

    /// `1 x n -> rows x n`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let (one, n) = self.shape(a);
        assert_eq!(one, 1, "broadcast_rows expects a row vector");
        let value = self.value(a).broadcast((rows, n)).unwrap().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::BroadcastRows(a), rg)
    }

    /// `m x 1 -> m x cols`.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let (m, one) = self.shape(a);
        assert_eq!(one, 1, "broadcast_cols expects a column vector");
        let value = self.value(a).broadcast((m, cols)).unwrap().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::BroadcastCols(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        let rg = self.rg(a);
        self.push(value, Op::Sqrt(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::recip);
        let rg = self.rg(a);
        self.push(value, Op::Recip(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mask = self.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.mul_const(a, Rc::new(mask))
    }

    /// `max(a, floor)` elementwise; clamped entries carry no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let mask = self.value(a).mapv(|x| if x > floor { 1.0 } else { 0.0 });
        let offset = mask.mapv(|m| (1.0 - m) * floor);
        let kept = self.mul_const(a, Rc::new(mask));
        let offset = self.constant(offset);
        self.add(kept, offset)
    }

    /// Picks `a[i, idx[i]]` for every row, giving an `m x 1` column.
    pub fn select_cols(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), idx.len(), "select_cols: one index per row");
        let value = Array2::from_shape_fn((idx.len(), 1), |(i, _)| src[[i, idx[i]]]);
        let rg = self.rg(a);
        self.push(value, Op::SelectCols(a, idx), rg)
    }

    /// Adjoint of [`Graph::select_cols`]: places `a[i]` at column `idx[i]`.
    pub fn scatter_cols(&mut self, a: Var, idx: Rc<Vec<usize>>, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.dim(), (idx.len(), 1), "scatter_cols: expects a column");
        let mut value = Array2::zeros((idx.len(), cols));
        for (i, &j) in idx.iter().enumerate() {
            value[[i, j]] = src[[i, 0]];
        }
        let rg = self.rg(a);
        self.push(value, Op::ScatterCols(a, idx), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let rows = self.shape(a).0;
        let b = self.broadcast_rows(row, rows);
        self.add(a, b)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let rows = self.shape(a).0;
        let b = self.broadcast_rows(row, rows);
        self.mul(a, b)
    }

    pub fn sub_row(&mut self, a: Var, row: Var) -> Var {
        let rows = self.shape(a).0;
        let b = self.broadcast_rows(row, rows);
        self.sub(a, b)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let cols = self.shape(a).1;
        let b = self.broadcast_cols(col, cols);
        self.mul(a, b)
    }

    /// Gradient of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned handles live on this tape; differentiating them again
    /// yields second-order terms. Inputs with no path from `output` get a
    /// zero constant.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.shape(output), (1, 1), "grad: output must be a scalar");
        let end = output.0 + 1;
        let mut grads: Vec<Option<Var>> = vec![None; end];
        if self.rg(output) {
            grads[output.0] = Some(self.scalar(1.0));
        }

        for i in (0..end).rev() {
            let Some(g) = grads[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let out = Var(i);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, g);
                    self.accumulate(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, a, g);
                    if self.rg(b) {
                        let gb = self.neg(g);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let ga = self.mul(g, b);
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.rg(b) {
                        let gb = self.mul(g, a);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::Neg(a) => {
                    let ga = self.neg(g);
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    self.accumulate(&mut grads, a, ga);
                }
                Op::AddScalar(a) => self.accumulate(&mut grads, a, g),
                Op::MulConst(a, mask) => {
                    let ga = self.mul_const(g, mask);
                    self.accumulate(&mut grads, a, ga);
                }
                Op::MatMul(a, b) => {
                    if self.rg(a) {
                        let bt = self.transpose(b);
                        let ga = self.matmul(g, bt);
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.rg(b) {
                        let at = self.transpose(a);
                        let gb = self.matmul(at, g);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g);
                    self.accumulate(&mut grads, a, ga);
                }
                Op::SumRows(a) => {
                    let rows = self.shape(a).0;
                    let ga = self.broadcast_rows(g, rows);
                    self.accumulate(&mut grads, a, ga);
                }
                Op::SumCols(a) => {
                    let cols = self.shape(a).1;
                    let ga = self.broadcast_cols(g, cols);
                    self.accumulate(&mut grads, a, ga);
                }
                Op::BroadcastRows(a) => {
                    let ga = self.sum_rows(g);
                    self.accumulate(&mut grads, a, ga);
                }
                Op::BroadcastCols(a) => {
                    let ga = self.sum_cols(g);
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Sqrt(a) => {
                    // d sqrt(a) = 0.5 / sqrt(a)
                    let r = self.recip(out);
                    let half = self.scale(r, 0.5);
                    let ga = self.mul(g, half);
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, out);
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Log(a) => {
                    let r = self.recip(a);
                    let ga = self.mul(g, r);
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Recip(a) => {
                    let sq = self.mul(out, out);
                    let t = self.mul(g, sq);
                    let ga = self.neg(t);
                    self.accumulate(&mut grads, a, ga);
                }
                Op::SelectCols(a, idx) => {
                    let cols = self.shape(a).1;
                    let ga = self.scatter_cols(g, idx, cols);
                    self.accumulate(&mut grads, a, ga);
                }
                Op::ScatterCols(a, idx) => {
                    let ga = self.select_cols(g, idx);
                    self.accumulate(&mut grads, a, ga);
                }
            }
        }

        wrt.iter()
            .map(|&v| match grads.get(v.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(v);
                    self.constant(Array2::zeros(shape))
                }
            })
            .collect()
    }

    fn accumulate(&mut self, grads: &mut [Option<Var>], target: Var, g: Var) {
        if !self.rg(target) {
            return;
        }
        grads[target.0] = Some(match grads[target.0] {
            Some(prev) => self.add(prev, g),
            None => g,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd<F: Fn(&Array2<f64>) -> f64>(f: F, x: &Array2<f64>, h: f64) -> Array2<f64> {
        let mut out = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            out.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, rel: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let scale = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / scale < rel, "{x} vs {y}");
        }
    }

    fn composite(g: &mut Graph, x: Var, w: Var) -> Var {
        // sum(log(1 + exp(x w))) + sum(sqrt(x^2 + 1)) + sum((x^T x)^-1 entries squared)
        let xw = g.matmul(x, w);
        let e = g.exp(xw);
        let e1 = g.add_scalar(e, 1.0);
        let l = g.ln(e1);
        let s1 = g.sum(l);
        let sq = g.square(x);
        let sq1 = g.add_scalar(sq, 1.0);
        let rt = g.sqrt(sq1);
        let s2 = g.sum(rt);
        let xt = g.transpose(x);
        let gram = g.matmul(xt, x);
        let gp = g.add_scalar(gram, 2.0);
        let inv = g.recip(gp);
        let inv2 = g.square(inv);
        let s3 = g.sum(inv2);
        let a = g.add(s1, s2);
        g.add(a, s3)
    }

    #[test]
    fn first_order_matches_finite_differences() {
        let x0 = array![[0.3, -0.7], [1.1, 0.4], [-0.2, 0.9]];
        let w0 = array![[0.5], [-1.2]];
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let w = g.constant(w0.clone());
        let y = composite(&mut g, x, w);
        let gx = g.grad(y, &[x])[0];
        let analytic = g.value(gx).clone();
        let numeric = fd(
            |xv| {
                let mut g = Graph::new();
                let x = g.constant(xv.clone());
                let w = g.constant(w0.clone());
                let y = composite(&mut g, x, w);
                g.scalar_value(y)
            },
            &x0,
            1e-5,
        );
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn second_order_matches_finite_differences_of_gradient() {
        // d/dx of sum(grad_x f(x) * v) for fixed v: a Hessian-vector product.
        let x0 = array![[0.3, -0.7], [1.1, 0.4], [-0.2, 0.9]];
        let w0 = array![[0.5], [-1.2]];
        let v0 = array![[1.0, 0.5], [-0.3, 2.0], [0.7, -1.1]];
        let hvp = |xv: &Array2<f64>| -> (f64, Array2<f64>) {
            let mut g = Graph::new();
            let x = g.param(xv.clone());
            let w = g.constant(w0.clone());
            let v = g.constant(v0.clone());
            let y = composite(&mut g, x, w);
            let gx = g.grad(y, &[x])[0];
            let dot = g.mul(gx, v);
            let s = g.sum(dot);
            let h = g.grad(s, &[x])[0];
            (g.scalar_value(s), g.value(h).clone())
        };
        let (_, analytic) = hvp(&x0);
        let numeric = fd(|xv| hvp(xv).0, &x0, 1e-5);
        assert_close(&analytic, &numeric, 1e-5);
    }

    #[test]
    fn select_and_scatter_are_adjoint() {
        let mut g = Graph::new();
        let a = g.param(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let idx = Rc::new(vec![2, 0]);
        let s = g.select_cols(a, idx);
        assert_eq!(g.value(s), &array![[3.0], [4.0]]);
        let total = g.sum(s);
        let ga = g.grad(total, &[a])[0];
        assert_eq!(g.value(ga), &array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn unrelated_input_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param(array![[1.0, 2.0]]);
        let b = g.param(array![[3.0]]);
        let s = g.sum(a);
        let grads = g.grad(s, &[a, b]);
        assert_eq!(g.value(grads[0]), &array![[1.0, 1.0]]);
        assert_eq!(g.value(grads[1]), &array![[0.0]]);
    }

    #[test]
    fn clamp_min_blocks_gradient_below_floor() {
        let mut g = Graph::new();
        let a = g.param(array![[-1.0, 0.5, 2.0]]);
        let c = g.clamp_min(a, 1.0);
        assert_eq!(g.value(c), &array![[1.0, 1.0, 2.0]]);
        let s = g.sum(c);
        let ga = g.grad(s, &[a])[0];
        assert_eq!(g.value(ga), &array![[0.0, 0.0, 1.0]]);
    }
}
