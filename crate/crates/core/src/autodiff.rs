//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep. Gradients
//! accumulate additively, so a value used by several consumers receives the
//! sum of their contributions.

use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    MeanAxis { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    Concat { xs: Vec<Var>, axis: usize },
    Reshape(Var),
    ScaleShift { x: Var, scale: Var, shift: Var },
    L2Normalize { x: Var, norms: Vec<T> },
    LogSoftmax(Var),
    GatherRows { table: Var, idx: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Build it forward with the op methods, then call
/// [`Graph::backward`] on a scalar.
#[derive(Debug, Clone, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Grads<T: Real = f32> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.slots.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn grad_slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::ZERO; len])
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copy a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph shapes are valid")
    }

    /// Leaf input; tracks gradients iff `t.requires_grad`.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        check_finite("input", t.data())?;
        let rg = t.requires_grad;
        let shape = t.shape().to_vec();
        Ok(self.push(shape, t.into_data(), Op::Leaf, rg))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        let mut t = t;
        t.requires_grad = false;
        self.input(t)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.input(t.with_grad())
    }

    /// `a [m,k] @ b [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            T::ZERO,
            &mut out,
            n as isize,
            1,
        );
        check_finite("matmul", &out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose expects rank 2, got {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x);
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), rg))
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        check_finite(name, &out)?;
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// Broadcast add of `b [n]` over the trailing axis of `x [.., n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let n = *sx.last().unwrap_or(&0);
        if numel(sb) != n {
            return Err(Error::shape("add_row", sx, sb));
        }
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        check_finite("add_row", &out)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(sx.to_vec(), out, Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|&v| v * c).collect();
        check_finite("scale", &out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > T::ZERO { v } else { T::ZERO })
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Relu(x), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.tanh()).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Tanh(x), rg))
    }

    /// Mean over one axis; the axis is removed from the shape (a rank-1
    /// input yields shape `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::InvalidArgument(format!(
                "mean_axis: axis {axis} out of range for {s:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(x);
        let mut out = vec![T::ZERO; outer * inner];
        let inv = T::ONE / T::from_f64(len as f64);
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape: Vec<usize> = s.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::MeanAxis { x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: T = self.value(x).iter().copied().sum();
        check_finite("sum", &[total])?;
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1], vec![total], Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let total: T = self.value(x).iter().copied().sum();
        let m = total / T::from_f64(n as f64);
        check_finite("mean", &[m])?;
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1], vec![m], Op::Mean(x), rg))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| {
                Error::InvalidArgument("concat of zero tensors".into())
            })?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!(
                "concat: axis {axis} out of range for {first:?}"
            )));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same_rank = s.len() == first.len();
            if !same_rank || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let block = len * inner;
                out.extend_from_slice(&self.value(v)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Elementwise `x * scale + shift`; the FiLM modulation.
    pub fn scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        for other in [scale, shift] {
            if self.shape(x) != self.shape(other) {
                return Err(Error::shape("scale_shift", self.shape(x), self.shape(other)));
            }
        }
        let out: Vec<T> = self
            .value(x)
            .iter()
            .zip(self.value(scale))
            .zip(self.value(shift))
            .map(|((&v, &s), &b)| v * s + b)
            .collect();
        check_finite("scale_shift", &out)?;
        let rg = self.rg(&[x, scale, shift]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::ScaleShift { x, scale, shift },
            rg,
        ))
    }

    /// Normalize each row (trailing axis) to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&1);
        let mut out = self.value(x).to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n.to_f64() <= 1e-12 {
                return Err(Error::ZeroNorm { op: "l2_normalize" });
            }
            let inv = T::ONE / n;
            row.iter_mut().for_each(|v| *v *= inv);
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(s, out, Op::L2Normalize { x, norms }, rg))
    }

    /// All-pairs cosine similarity between rows: `a [m,d], b [n,d] -> [m,n]`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("cosine", sa, sb));
        }
        let an = self.l2_normalize(a)?;
        let bn = self.l2_normalize(b)?;
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&1);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(d) {
            let mx = row
                .iter()
                .copied()
                .fold(row[0], |m, v| if v > m { v } else { m });
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        check_finite("log_softmax", &out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(s, out, Op::LogSoftmax(x), rg))
    }

    /// Select rows of `table [v, d]` by index: the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "gather_rows expects a rank-2 table, got {s:?}"
            )));
        }
        let (v, d) = (s[0], s[1]);
        if idx.is_empty() {
            return Err(Error::InvalidArgument("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows index {bad} out of range for {v} rows"
            )));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![idx.len(), d],
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::ONE]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Grads { slots: grads })
    }

    fn backward_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr, |$g:ident| $body:block) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let $g = grad_slot(grads, v, nodes[v.0].value.len());
                    $body
                }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc!(*a, |ga| {
                    // ga[m,k] += gy[m,n] @ b^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::ONE,
                        gy,
                        n as isize,
                        1,
                        &nodes[b.0].value,
                        1,
                        n as isize,
                        T::ONE,
                        ga,
                        k as isize,
                        1,
                    );
                });
                acc!(*b, |gb| {
                    // gb[k,n] += a^T @ gy
                    T::gemm(
                        k,
                        m,
                        n,
                        T::ONE,
                        &nodes[a.0].value,
                        1,
                        k as isize,
                        gy,
                        n as isize,
                        1,
                        T::ONE,
                        gb,
                        n as isize,
                        1,
                    );
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                acc!(*x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += gy[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc!(*a, |g| {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                });
                acc!(*b, |g| {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                });
            }
            Op::Sub(a, b) => {
                acc!(*a, |g| {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                });
                acc!(*b, |g| {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g -= d);
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc!(*a, |g| {
                    for ((g, &d), &y) in g.iter_mut().zip(gy).zip(vb) {
                        *g += d * y;
                    }
                });
                acc!(*b, |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(gy).zip(va) {
                        *g += d * x;
                    }
                });
            }
            Op::AddRow(x, b) => {
                acc!(*x, |g| {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                });
                acc!(*b, |g| {
                    let n = g.len();
                    for row in gy.chunks(n) {
                        g.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc!(*x, |g| {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * c);
                });
            }
            Op::Relu(x) => {
                let vx = &nodes[x.0].value;
                acc!(*x, |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(gy).zip(vx) {
                        if v > T::ZERO {
                            *g += d;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value;
                acc!(*x, |g| {
                    for ((g, &d), &t) in g.iter_mut().zip(gy).zip(y) {
                        *g += d * (T::ONE - t * t);
                    }
                });
            }
            Op::MeanAxis { x, axis } => {
                let s = &nodes[x.0].shape;
                let (outer, len, inner) = split_axis(s, *axis);
                let inv = T::ONE / T::from_f64(len as f64);
                acc!(*x, |g| {
                    for o in 0..outer {
                        for a in 0..len {
                            let base = (o * len + a) * inner;
                            for i in 0..inner {
                                g[base + i] += gy[o * inner + i] * inv;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let d = gy[0];
                acc!(*x, |g| {
                    g.iter_mut().for_each(|g| *g += d);
                });
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.len();
                let d = gy[0] / T::from_f64(n as f64);
                acc!(*x, |g| {
                    g.iter_mut().for_each(|g| *g += d);
                });
            }
            Op::Concat { xs, axis } => {
                let first = &nodes[xs[0].0].shape;
                let (outer, _, inner) = split_axis(first, *axis);
                let total = node.shape[*axis];
                let mut offset = 0;
                for &v in xs {
                    let len = nodes[v.0].shape[*axis];
                    acc!(v, |g| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for i in 0..len * inner {
                                g[dst + i] += gy[src + i];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Reshape(x) => {
                acc!(*x, |g| {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                });
            }
            Op::ScaleShift { x, scale, shift } => {
                let (vx, vs) = (&nodes[x.0].value, &nodes[scale.0].value);
                acc!(*x, |g| {
                    for ((g, &d), &s) in g.iter_mut().zip(gy).zip(vs) {
                        *g += d * s;
                    }
                });
                acc!(*scale, |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(gy).zip(vx) {
                        *g += d * v;
                    }
                });
                acc!(*shift, |g| {
                    g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                });
            }
            Op::L2Normalize { x, norms } => {
                let d = *node.shape.last().unwrap_or(&1);
                let y = &node.value;
                acc!(*x, |g| {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &gy[r * d..(r + 1) * d];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let inv = T::ONE / n;
                        for j in 0..d {
                            g[r * d + j] += (gr[j] - yr[j] * dot) * inv;
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let d = *node.shape.last().unwrap_or(&1);
                let y = &node.value;
                acc!(*x, |g| {
                    for (r, (yr, gr)) in y.chunks(d).zip(gy.chunks(d)).enumerate() {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..d {
                            g[r * d + j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::GatherRows { table, idx } => {
                let d = nodes[table.0].shape[1];
                acc!(*table, |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            g[i * d + j] += gy[r * d + j];
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = g.matmul(i, m).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3], &[0.0; 6])).unwrap();
        let b = g.constant(t(&[2, 3], &[0.0; 6])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn cosine_of_vector_with_itself_is_one() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(t(&[1, 3], &[0.3, -2.0, 5.0])).unwrap();
        let c = g.cosine(v, v).unwrap();
        assert!((g.value(c)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 5], &[0.7; 5])).unwrap();
        let y = g.log_softmax(x).unwrap();
        for &v in g.value(y) {
            assert!((v + 5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 3.0])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn cosine_gradient_vanishes_at_parallel_inputs() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[1, 3], &[1.0, 2.0, -0.5])).unwrap();
        let b = g.constant(t(&[1, 3], &[1.0, 2.0, -0.5])).unwrap();
        let c = g.cosine(a, b).unwrap();
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        for &v in grads.get(a).unwrap() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sum(x * x) + sum(x) => dy/dx = 2x + 1
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[3.0, -1.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let a = g.sum(sq).unwrap();
        let b = g.sum(x).unwrap();
        let y = g.add(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[7.0, -1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut g = Graph::<f32>::new();
        let bad = Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(g.input(bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn normalize_rejects_zero_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert!(matches!(g.l2_normalize(x), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn frozen_inputs_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let x = g.constant(t(&[1, 2], &[1.0, 1.0])).unwrap();
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }
}
