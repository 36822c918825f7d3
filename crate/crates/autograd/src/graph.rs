use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::conv::{
    add_channel_bias, batch_to_channel_major, channel_bias_grad, channel_to_batch_major, col2im, conv2d_raw,
    conv_transpose_geom, im2col,
};
use crate::{gemm, Scalar, ShapeError, Tensor};

type Backward<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
    requires_grad: bool,
}

/// A recording tape. Build one per forward pass and drop it afterwards.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient for a leaf created with [`Graph::param`]. `None` when the
    /// root does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads[var.id]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.id].clone(), g.clone()).expect("grad shape"))
    }

    /// Like [`Grads::get`] but substitutes zeros for parameters the root does
    /// not reach.
    pub fn get_or_zero(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push<F>(&self, value: Tensor<T>, parents: &[usize], backward: F) -> Var<'_, T>
    where
        F: Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.to_vec(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![T::one()]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let results = backward(&g, &needs);
            for ((&p, r), need) in node.parents.iter().zip(results).zip(&needs) {
                let (Some(r), true) = (r, *need) else {
                    continue;
                };
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&r) {
                            *a += *v;
                        }
                    }
                    slot @ None => *slot = Some(r),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Grads { grads, shapes }
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<(), ShapeError> {
    if a.shape() != b.shape() {
        return Err(ShapeError::Mismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// Value of a single-element node.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    fn unary(
        self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static, // (input, output) -> derivative
    ) -> Var<'g, T> {
        let x = self.value();
        let y = x.map(&f);
        let xs = x.clone();
        let ys = Rc::new(y.clone());
        self.graph.push(y, &[self.id], move |g, _| {
            let d = g
                .iter()
                .zip(xs.data())
                .zip(ys.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(d)]
        })
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(
            // NaN must propagate, which `max` would swallow
            |v| if v > T::zero() || v.is_nan() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        self.unary(
            move |v| if v > T::zero() { v } else { v * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(|v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(
            |v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(|v| v * v, |x, _| x + x)
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(self, lo: T, hi: T) -> Var<'g, T> {
        self.unary(
            move |v| if v.is_nan() { v } else { v.max(lo).min(hi).ln() },
            move |x, _| {
                if x > lo && x < hi {
                    T::one() / x
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        self.unary(move |v| v * c, move |_, _| c)
    }

    /// `c - x`.
    pub fn rsub_scalar(self, c: T) -> Var<'g, T> {
        self.unary(move |v| c - v, |_, _| -T::one())
    }

    fn binary(
        self,
        other: Var<'g, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        grads: impl Fn(T, T, T) -> (T, T) + 'static, // (g, a, b) -> (da, db)
    ) -> Result<Var<'g, T>, ShapeError> {
        let a = self.value();
        let b = other.value();
        same_shape(op, &a, &b)?;
        let y = Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )?;
        Ok(self.graph.push(y, &[self.id, other.id], move |g, needs| {
            let mut da = needs[0].then(|| Vec::with_capacity(g.len()));
            let mut db = needs[1].then(|| Vec::with_capacity(g.len()));
            for ((&g, &x), &y) in g.iter().zip(a.data()).zip(b.data()) {
                let (ga, gb) = grads(g, x, y);
                if let Some(v) = da.as_mut() {
                    v.push(ga);
                }
                if let Some(v) = db.as_mut() {
                    v.push(gb);
                }
            }
            vec![da, db]
        }))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>, ShapeError> {
        self.binary(other, "add", |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>, ShapeError> {
        self.binary(other, "sub", |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>, ShapeError> {
        self.binary(other, "mul", |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(self, c: &Tensor<T>) -> Result<Var<'g, T>, ShapeError> {
        let x = self.value();
        same_shape("mul_const", &x, c)?;
        let y = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect(),
        )?;
        let c = Rc::new(c.clone());
        Ok(self.graph.push(y, &[self.id], move |g, _| {
            vec![Some(g.iter().zip(c.data()).map(|(&g, &c)| g * c).collect())]
        }))
    }

    /// `s · x` for a single-element `s`.
    pub fn mul_scalar_var(self, s: Var<'g, T>) -> Result<Var<'g, T>, ShapeError> {
        let x = self.value();
        let sv = s.value();
        if sv.len() != 1 {
            return Err(ShapeError::Mismatch {
                op: "mul_scalar_var",
                lhs: x.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let k = sv.data()[0];
        let y = x.map(|v| v * k);
        Ok(self.graph.push(y, &[self.id, s.id], move |g, needs| {
            let dx = needs[0].then(|| g.iter().map(|&g| g * k).collect());
            let ds = needs[1].then(|| vec![g.iter().zip(x.data()).map(|(&g, &v)| g * v).sum()]);
            vec![dx, ds]
        }))
    }

    pub fn sum_all(self) -> Var<'g, T> {
        let x = self.value();
        let n = x.len();
        let s: T = x.data().iter().copied().sum();
        self.graph
            .push(Tensor::scalar(s), &[self.id], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = self.value().len();
        let inv = T::one() / T::from_usize(n).expect("count");
        self.sum_all().scale(inv)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, T>, ShapeError> {
        let x = self.value();
        let y = (*x).clone().reshape(shape)?;
        Ok(self.graph.push(y, &[self.id], |g, _| vec![Some(g.to_vec())]))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[B, C, ...]` tensor.
    pub fn add_channel_bias(self, bias: Var<'g, T>) -> Result<Var<'g, T>, ShapeError> {
        let x = self.value();
        let b = bias.value();
        if x.shape().len() < 2 || b.len() != x.dim(1) {
            return Err(ShapeError::Mismatch {
                op: "add_channel_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (batch, channels) = (x.dim(0), x.dim(1));
        let plane = x.len() / (batch * channels);
        let mut y = (*x).clone();
        add_channel_bias(y.data_mut(), b.data(), batch, plane);
        Ok(self.graph.push(y, &[self.id, bias.id], move |g, needs| {
            let dx = needs[0].then(|| g.to_vec());
            let db = needs[1].then(|| channel_bias_grad(g, batch, channels, plane));
            vec![dx, db]
        }))
    }

    /// 2-D matrix product with optional transposes of either operand.
    pub fn matmul(self, other: Var<'g, T>, trans_a: bool, trans_b: bool) -> Result<Var<'g, T>, ShapeError> {
        let a = self.value();
        let b = other.value();
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(ShapeError::Rank {
                op: "matmul",
                expected: 2,
                got: if a.shape().len() != 2 { a.shape().to_vec() } else { b.shape().to_vec() },
            });
        }
        let y = self.bmm_value(&a, &b, 1, trans_a, trans_b, "matmul")?;
        let (m, n) = (y.dim(1), y.dim(2));
        let y = y.reshape(vec![m, n])?;
        self.bmm_push(other, a, b, y, 1, trans_a, trans_b)
    }

    /// Batched product of `[B, ·, ·]` operands.
    pub fn bmm(self, other: Var<'g, T>, trans_a: bool, trans_b: bool) -> Result<Var<'g, T>, ShapeError> {
        let a = self.value();
        let b = other.value();
        if a.shape().len() != 3 || b.shape().len() != 3 || a.dim(0) != b.dim(0) {
            return Err(ShapeError::Mismatch {
                op: "bmm",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let batch = a.dim(0);
        let y = self.bmm_value(&a, &b, batch, trans_a, trans_b, "bmm")?;
        self.bmm_push(other, a, b, y, batch, trans_a, trans_b)
    }

    fn bmm_dims(shape: &[usize], trans: bool) -> (usize, usize) {
        let r = shape.len();
        let (p, q) = (shape[r - 2], shape[r - 1]);
        if trans {
            (q, p)
        } else {
            (p, q)
        }
    }

    fn bmm_value(
        &self,
        a: &Tensor<T>,
        b: &Tensor<T>,
        batch: usize,
        ta: bool,
        tb: bool,
        op: &'static str,
    ) -> Result<Tensor<T>, ShapeError> {
        let (m, k) = Self::bmm_dims(a.shape(), ta);
        let (k2, n) = Self::bmm_dims(b.shape(), tb);
        if k != k2 {
            return Err(ShapeError::Mismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                ta,
                &b.data()[i * k * n..(i + 1) * k * n],
                tb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Tensor::new(vec![batch, m, n], out)
    }

    #[allow(clippy::too_many_arguments)]
    fn bmm_push(
        self,
        other: Var<'g, T>,
        a: Rc<Tensor<T>>,
        b: Rc<Tensor<T>>,
        y: Tensor<T>,
        batch: usize,
        ta: bool,
        tb: bool,
    ) -> Result<Var<'g, T>, ShapeError> {
        let (m, k) = Self::bmm_dims(a.shape(), ta);
        let (_, n) = Self::bmm_dims(b.shape(), tb);
        Ok(self.graph.push(y, &[self.id, other.id], move |g, needs| {
            // C = op(A) op(B); dop(A) = G op(B)^T, dop(B) = op(A)^T G.
            let da = needs[0].then(|| {
                let mut d = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &b.data()[i * k * n..(i + 1) * k * n];
                    let di = &mut d[i * m * k..(i + 1) * m * k];
                    if ta {
                        // A stored k×m: dA = op(B) G^T
                        gemm(k, n, m, bi, tb, gi, true, T::zero(), di);
                    } else {
                        gemm(m, n, k, gi, false, bi, !tb, T::zero(), di);
                    }
                }
                d
            });
            let db = needs[1].then(|| {
                let mut d = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &a.data()[i * m * k..(i + 1) * m * k];
                    let di = &mut d[i * k * n..(i + 1) * k * n];
                    if tb {
                        // B stored n×k: dB = G^T op(A)
                        gemm(n, m, k, gi, true, ai, ta, T::zero(), di);
                    } else {
                        gemm(k, m, n, ai, !ta, gi, false, T::zero(), di);
                    }
                }
                d
            });
            vec![da, db]
        }))
    }

    /// `x · wᵀ + b` for `x: [B, n]`, `w: [m, n]`, `b: [m]`.
    pub fn linear(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>, ShapeError> {
        let y = self.matmul(weight, false, true)?;
        match bias {
            Some(b) => y.add_channel_bias(b),
            None => Ok(y),
        }
    }

    /// Strided 2-D convolution, `x: [B, C, H, W]`, `w: [O, C, k, k]`.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g, T>, ShapeError> {
        let x = self.value();
        let w = weight.value();
        let b = bias.map(|b| b.value());
        let (y, col) = conv2d_raw(&x, &w, b.as_deref(), stride, pad)?;
        let g = crate::conv::conv_geom(x.shape(), w.shape(), stride, pad)?;
        let out_c = w.dim(0);
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        Ok(self.graph.push(y, &parents, move |grad, needs| {
            let plane = g.ho * g.wo;
            let g_cm = batch_to_channel_major(grad, g.batch, out_c, plane);
            let dx = needs[0].then(|| {
                let mut dcol = vec![T::zero(); g.col_rows() * g.col_cols()];
                gemm(g.col_rows(), out_c, g.col_cols(), w.data(), true, &g_cm, false, T::zero(), &mut dcol);
                let mut dx = vec![T::zero(); x.len()];
                col2im(&dcol, &g, &mut dx);
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![T::zero(); w.len()];
                gemm(out_c, g.col_cols(), g.col_rows(), &g_cm, false, &col, true, T::zero(), &mut dw);
                dw
            });
            let mut out = vec![dx, dw];
            if needs.len() > 2 {
                out.push(needs[2].then(|| channel_bias_grad(grad, g.batch, out_c, plane)));
            }
            out
        }))
    }

    /// Transposed convolution, `x: [B, I, H, W]`, `w: [I, O, k, k]`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g, T>, ShapeError> {
        let x = self.value();
        let w = weight.value();
        let g = conv_transpose_geom(x.shape(), w.shape(), stride, pad)?;
        let in_c = w.dim(0);
        let out_c = g.channels;
        let in_plane = g.ho * g.wo;
        if let Some(b) = bias {
            if b.value().len() != out_c {
                return Err(ShapeError::Mismatch {
                    op: "conv_transpose2d bias",
                    lhs: w.shape().to_vec(),
                    rhs: b.shape(),
                });
            }
        }
        let x_cm = batch_to_channel_major(x.data(), g.batch, in_c, in_plane);
        let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
        gemm(g.col_rows(), in_c, g.col_cols(), w.data(), true, &x_cm, false, T::zero(), &mut col);
        let mut out = vec![T::zero(); g.batch * out_c * g.h * g.w];
        col2im(&col, &g, &mut out);
        if let Some(b) = bias {
            add_channel_bias(&mut out, b.value().data(), g.batch, g.h * g.w);
        }
        let y = Tensor::new(vec![g.batch, out_c, g.h, g.w], out)?;
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        Ok(self.graph.push(y, &parents, move |grad, needs| {
            let gcol = im2col(grad, &g);
            let dx = needs[0].then(|| {
                let mut dx_cm = vec![T::zero(); in_c * g.col_cols()];
                gemm(in_c, g.col_rows(), g.col_cols(), w.data(), false, &gcol, false, T::zero(), &mut dx_cm);
                channel_to_batch_major(&dx_cm, g.batch, in_c, in_plane)
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![T::zero(); w.len()];
                gemm(in_c, g.col_cols(), g.col_rows(), &x_cm, false, &gcol, true, T::zero(), &mut dw);
                dw
            });
            let mut res = vec![dx, dw];
            if needs.len() > 2 {
                res.push(needs[2].then(|| channel_bias_grad(grad, g.batch, out_c, g.h * g.w)));
            }
            res
        }))
    }

    fn rows_cols(shape: &[usize]) -> (usize, usize) {
        let cols = *shape.last().unwrap_or(&1);
        (shape.iter().product::<usize>() / cols.max(1), cols)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(self) -> Var<'g, T> {
        let x = self.value();
        let (rows, cols) = Self::rows_cols(x.shape());
        let mut y = (*x).clone();
        for r in 0..rows {
            softmax_in_place(&mut y.data_mut()[r * cols..(r + 1) * cols]);
        }
        let ys = Rc::new(y.clone());
        self.graph.push(y, &[self.id], move |g, _| {
            let mut d = vec![T::zero(); g.len()];
            for r in 0..rows {
                let yr = &ys.data()[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((dv, &yv), &gv) in d[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                    *dv = yv * (gv - dot);
                }
            }
            vec![Some(d)]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(self) -> Var<'g, T> {
        let x = self.value();
        let (rows, cols) = Self::rows_cols(x.shape());
        let mut y = (*x).clone();
        let mut probs = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &mut y.data_mut()[r * cols..(r + 1) * cols];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for (v, p) in row.iter_mut().zip(&mut probs[r * cols..(r + 1) * cols]) {
                *v -= lse;
                *p = v.exp();
            }
        }
        self.graph.push(y, &[self.id], move |g, _| {
            let mut d = vec![T::zero(); g.len()];
            for r in 0..rows {
                let gr = &g[r * cols..(r + 1) * cols];
                let total: T = gr.iter().copied().sum();
                for ((dv, &gv), &p) in d[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(&probs[r * cols..]) {
                    *dv = gv - p * total;
                }
            }
            vec![Some(d)]
        })
    }

    /// Concatenate two `[B, C_i, ...]` tensors along axis 1.
    pub fn concat_channels(self, other: Var<'g, T>) -> Result<Var<'g, T>, ShapeError> {
        let a = self.value();
        let b = other.value();
        if a.shape().len() < 2 || a.shape().len() != b.shape().len() || a.dim(0) != b.dim(0) || a.shape()[2..] != b.shape()[2..]
        {
            return Err(ShapeError::Mismatch {
                op: "concat_channels",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let batch = a.dim(0);
        let na = a.len() / batch;
        let nb = b.len() / batch;
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..batch {
            data.extend_from_slice(&a.data()[i * na..(i + 1) * na]);
            data.extend_from_slice(&b.data()[i * nb..(i + 1) * nb]);
        }
        let mut shape = a.shape().to_vec();
        shape[1] += b.dim(1);
        let y = Tensor::new(shape, data)?;
        Ok(self.graph.push(y, &[self.id, other.id], move |g, needs| {
            let da = needs[0].then(|| {
                (0..batch)
                    .flat_map(|i| g[i * (na + nb)..i * (na + nb) + na].iter().copied())
                    .collect()
            });
            let db = needs[1].then(|| {
                (0..batch)
                    .flat_map(|i| g[i * (na + nb) + na..(i + 1) * (na + nb)].iter().copied())
                    .collect()
            });
            vec![da, db]
        }))
    }

    /// `W / σ` with `σ = uᵀ W v`, treating the singular-vector estimates `u`
    /// (length = leading dim) and `v` (length = remaining elements) as
    /// constants. `σ` is floored at `1e-12`.
    pub fn spectral_scale(self, u: &[T], v: &[T]) -> Result<Var<'g, T>, ShapeError> {
        let w = self.value();
        let rows = w.dim(0);
        let cols = w.len() / rows;
        if u.len() != rows || v.len() != cols {
            return Err(ShapeError::Mismatch {
                op: "spectral_scale",
                lhs: w.shape().to_vec(),
                rhs: vec![u.len(), v.len()],
            });
        }
        let raw_sigma = bilinear(w.data(), u, v);
        let floor = T::from_f64_lossy(1e-12);
        let clamped = raw_sigma <= floor;
        let sigma = if clamped { floor } else { raw_sigma };
        let y = w.map(|x| x / sigma);
        let u = u.to_vec();
        let v = v.to_vec();
        Ok(self.graph.push(y, &[self.id], move |g, _| {
            let mut d: Vec<T> = g.iter().map(|&g| g / sigma).collect();
            if !clamped {
                let inner: T = g.iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
                let k = inner / (sigma * sigma);
                for (i, &ui) in u.iter().enumerate() {
                    for (j, &vj) in v.iter().enumerate() {
                        d[i * cols + j] -= k * ui * vj;
                    }
                }
            }
            vec![Some(d)]
        }))
    }
}

/// `uᵀ W v` for a row-major `W`.
pub(crate) fn bilinear<T: Scalar>(w: &[T], u: &[T], v: &[T]) -> T {
    let cols = v.len();
    u.iter()
        .enumerate()
        .map(|(i, &ui)| ui * w[i * cols..(i + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum::<T>())
        .sum()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
