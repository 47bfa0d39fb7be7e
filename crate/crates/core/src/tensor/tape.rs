use std::collections::HashMap;

use super::{Gradients, ParamId, ParamStore, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatVec(Var, Var),
    VecMat(Var, Var),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Exp(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Slice { src: Var, start: usize },
    LeakyRelu(Var, T),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    L2Norm(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records forward operations so their adjoints can be replayed in reverse.
///
/// A tape is single-use and single-threaded. Parameters are bound once per
/// tape; repeated binds of the same [`ParamId`] return the same [`Var`].
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    checked: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(op: &'static str, shapes: &[&Tensor<T>]) -> TensorError
where
    T: Real,
{
    TensorError::Shape {
        op,
        shapes: shapes.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

/// Visit every lane of `shape` along `axis` as `(offset, stride, len)`.
fn lanes(shape: &[usize], axis: usize) -> Vec<(usize, usize, usize)> {
    match (shape.len(), axis) {
        (1, 0) => vec![(0, 1, shape[0])],
        (2, 1) => (0..shape[0]).map(|r| (r * shape[1], 1, shape[1])).collect(),
        (2, 0) => (0..shape[1]).map(|c| (c, shape[1], shape[0])).collect(),
        _ => Vec::new(),
    }
}

fn softmax_lane<T: Real>(x: &[T], out: &mut [T], off: usize, stride: usize, len: usize) {
    let mut max = T::neg_infinity();
    for i in 0..len {
        max = max.max(x[off + i * stride]);
    }
    let mut total = T::zero();
    for i in 0..len {
        let e = (x[off + i * stride] - max).exp();
        out[off + i * stride] = e;
        total = total + e;
    }
    for i in 0..len {
        out[off + i * stride] = out[off + i * stride] / total;
    }
}

fn log_softmax_lane<T: Real>(x: &[T], out: &mut [T], off: usize, stride: usize, len: usize) {
    let mut max = T::neg_infinity();
    for i in 0..len {
        max = max.max(x[off + i * stride]);
    }
    let mut total = T::zero();
    for i in 0..len {
        total = total + (x[off + i * stride] - max).exp();
    }
    let lse = max + total.ln();
    for i in 0..len {
        out[off + i * stride] = x[off + i * stride] - lse;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            checked: false,
        }
    }

    /// A tape that rejects NaN/Inf in any forward output.
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("input", value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound.get(&id) {
            return Ok(*v);
        }
        let v = self.push("param", store.value(id).clone(), Op::Param(id))?;
        self.bound.insert(id, v);
        Ok(v)
    }

    /// `W x` for `W: [m, n]`, `x: [n]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wt, xt) = (self.value(w), self.value(x));
        let (m, n) = wt.dims2().ok_or_else(|| shape_err("matvec", &[wt, xt]))?;
        if !xt.is_vector() || xt.len() != n {
            return Err(shape_err("matvec", &[wt, xt]));
        }
        let (wd, xd) = (wt.data(), xt.data());
        let out = (0..m)
            .map(|r| {
                wd[r * n..(r + 1) * n]
                    .iter()
                    .zip(xd)
                    .fold(T::zero(), |acc, (a, b)| acc + *a * *b)
            })
            .collect();
        self.push("matvec", Tensor::vector(out), Op::MatVec(w, x))
    }

    /// `x M` for `x: [n]`, `M: [n, m]`; with `x` a weight vector this is a
    /// convex (or one-hot) combination of the rows of `M`.
    pub fn vecmat(&mut self, x: Var, m: Var) -> Result<Var> {
        let (xt, mt) = (self.value(x), self.value(m));
        let (n, cols) = mt.dims2().ok_or_else(|| shape_err("vecmat", &[xt, mt]))?;
        if !xt.is_vector() || xt.len() != n {
            return Err(shape_err("vecmat", &[xt, mt]));
        }
        let mut out = vec![T::zero(); cols];
        for (i, &xi) in xt.data().iter().enumerate() {
            for (o, &mv) in out.iter_mut().zip(mt.row(i)) {
                *o = *o + xi * mv;
            }
        }
        self.push("vecmat", Tensor::vector(out), Op::VecMat(x, m))
    }

    /// Alias of [`Tape::vecmat`] under its model-facing name.
    pub fn embedding_select(&mut self, weights: Var, matrix: Var) -> Result<Var> {
        self.vecmat(weights, matrix)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (at.dims2(), bt.dims2()) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(shape_err("matmul", &[at, bt])),
        };
        if k != k2 {
            return Err(shape_err("matmul", &[at, bt]));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let av = at.get2(i, p);
                for j in 0..n {
                    out[i * n + j] = out[i * n + j] + av * bt.get2(p, j);
                }
            }
        }
        self.push("matmul", Tensor::from_vec(vec![m, n], out)?, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(shape_err("add", &[at, bt]));
        }
        let out = at.data().iter().zip(bt.data()).map(|(x, y)| *x + *y).collect();
        let t = Tensor::from_vec(at.shape().to_vec(), out)?;
        self.push("add", t, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(shape_err("mul", &[at, bt]));
        }
        let out = at.data().iter().zip(bt.data()).map(|(x, y)| *x * *y).collect();
        let t = Tensor::from_vec(at.shape().to_vec(), out)?;
        self.push("mul", t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let t = self.value(a).scaled(s);
        self.push("scale", t, Op::Scale(a, s))
    }

    /// Multiply every element of `a` by the single-element node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let (at, st) = (self.value(a), self.value(s));
        if st.len() != 1 {
            return Err(shape_err("scale_by", &[at, st]));
        }
        let t = at.scaled(st.data()[0]);
        self.push("scale_by", t, Op::ScaleBy(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        let out = at.data().iter().map(|v| v.exp()).collect();
        let t = Tensor::from_vec(at.shape().to_vec(), out)?;
        self.push("exp", t, Op::Exp(a))
    }

    /// Concatenate 1-D nodes end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            let pt = self.value(p);
            if !pt.is_vector() {
                return Err(shape_err("concat", &[pt]));
            }
            out.extend_from_slice(pt.data());
        }
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        self.push("concat", Tensor::vector(out), Op::Concat(parts.to_vec()))
    }

    /// Stack equal-length 1-D nodes as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(TensorError::Invalid {
                op: "stack",
                msg: "no inputs".into(),
            });
        };
        let width = self.value(first).len();
        let mut out = Vec::with_capacity(width * rows.len());
        for &r in rows {
            let rt = self.value(r);
            if !rt.is_vector() || rt.len() != width {
                return Err(shape_err("stack", &[self.value(first), rt]));
            }
            out.extend_from_slice(rt.data());
        }
        let t = Tensor::from_vec(vec![rows.len(), width], out)?;
        self.push("stack", t, Op::Stack(rows.to_vec()))
    }

    /// Contiguous range `[start, start + len)` of a 1-D node.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let at = self.value(a);
        if !at.is_vector() || start + len > at.len() || len == 0 {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} of shape {:?}", start + len, at.shape()),
            });
        }
        let t = Tensor::vector(at.data()[start..start + len].to_vec());
        self.push("slice", t, Op::Slice { src: a, start })
    }

    pub fn leaky_relu(&mut self, a: Var, negative_slope: T) -> Result<Var> {
        let at = self.value(a);
        let out = at
            .data()
            .iter()
            .map(|&v| if v >= T::zero() { v } else { v * negative_slope })
            .collect();
        let t = Tensor::from_vec(at.shape().to_vec(), out)?;
        self.push("leaky_relu", t, Op::LeakyRelu(a, negative_slope))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let at = self.value(a);
        let ls = lanes(at.shape(), axis);
        if ls.is_empty() {
            return Err(shape_err("softmax", &[at]));
        }
        let mut out = vec![T::zero(); at.len()];
        for (off, stride, len) in ls {
            softmax_lane(at.data(), &mut out, off, stride, len);
        }
        let t = Tensor::from_vec(at.shape().to_vec(), out)?;
        self.push("softmax", t, Op::Softmax(a, axis))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let at = self.value(a);
        let ls = lanes(at.shape(), axis);
        if ls.is_empty() {
            return Err(shape_err("log_softmax", &[at]));
        }
        let mut out = vec![T::zero(); at.len()];
        for (off, stride, len) in ls {
            log_softmax_lane(at.data(), &mut out, off, stride, len);
        }
        let t = Tensor::from_vec(at.shape().to_vec(), out)?;
        self.push("log_softmax", t, Op::LogSoftmax(a, axis))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        if at.is_empty() {
            return Err(shape_err("mean", &[at]));
        }
        let n = T::from_usize(at.len()).unwrap();
        let s: T = at.data().iter().copied().sum();
        self.push("mean", Tensor::scalar(s / n), Op::Mean(a))
    }

    /// Column means of a matrix: `[n, m] -> [m]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        let (n, m) = at.dims2().ok_or_else(|| shape_err("mean_rows", &[at]))?;
        let nf = T::from_usize(n).unwrap();
        let out = (0..m)
            .map(|c| (0..n).map(|r| at.get2(r, c)).sum::<T>() / nf)
            .collect();
        self.push("mean_rows", Tensor::vector(out), Op::MeanRows(a))
    }

    /// Column maxima of a matrix: `[n, m] -> [m]`; ties go to the first row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        let (n, m) = at.dims2().ok_or_else(|| shape_err("max_rows", &[at]))?;
        let mut arg = vec![0usize; m];
        let mut out = vec![T::zero(); m];
        for c in 0..m {
            let mut best = at.get2(0, c);
            for r in 1..n {
                if at.get2(r, c) > best {
                    best = at.get2(r, c);
                    arg[c] = r;
                }
            }
            out[c] = best;
        }
        self.push("max_rows", Tensor::vector(out), Op::MaxRows(a, arg))
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().map(|v| *v * *v).sum();
        self.push("l2_norm", Tensor::scalar(s.sqrt()), Op::L2Norm(a))
    }

    /// Reverse sweep from a single-element output node.
    ///
    /// Returns the gradient of `out` with respect to every bound parameter.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        Ok(self.backward_full(out)?.0)
    }

    /// Like [`Tape::backward`] but also returns the adjoint of every node.
    pub fn backward_full(&self, out: Var) -> Result<(Gradients<T>, Vec<Option<Tensor<T>>>)> {
        if self.value(out).len() != 1 {
            return Err(shape_err("backward", &[self.value(out)]));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[out.0] = Some(Tensor::from_vec(
            self.value(out).shape().to_vec(),
            vec![T::one()],
        )?);
        let mut grads = Gradients::new();

        for idx in (0..=out.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut adj);
            if let Op::Param(id) = node.op {
                grads.insert(id, g.clone());
            }
            adj[idx] = Some(g);
        }
        Ok((grads, adj))
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, delta: Tensor<T>| match &mut adj[v.0] {
            Some(a) => a.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatVec(w, x) => {
                let (wt, xt) = (self.value(*w), self.value(*x));
                let (m, n) = wt.dims2().unwrap();
                let mut dw = vec![T::zero(); m * n];
                let mut dx = vec![T::zero(); n];
                for r in 0..m {
                    for c in 0..n {
                        dw[r * n + c] = gd[r] * xt.data()[c];
                        dx[c] = dx[c] + wt.get2(r, c) * gd[r];
                    }
                }
                acc(*w, Tensor::from_vec(vec![m, n], dw).unwrap());
                acc(*x, Tensor::vector(dx));
            }
            Op::VecMat(x, mm) => {
                let (xt, mt) = (self.value(*x), self.value(*mm));
                let (n, cols) = mt.dims2().unwrap();
                let mut dx = vec![T::zero(); n];
                let mut dm = vec![T::zero(); n * cols];
                for i in 0..n {
                    let xi = xt.data()[i];
                    for j in 0..cols {
                        dx[i] = dx[i] + gd[j] * mt.get2(i, j);
                        dm[i * cols + j] = xi * gd[j];
                    }
                }
                acc(*x, Tensor::vector(dx));
                acc(*mm, Tensor::from_vec(vec![n, cols], dm).unwrap());
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k) = at.dims2().unwrap();
                let (_, n) = bt.dims2().unwrap();
                let mut da = vec![T::zero(); m * k];
                let mut db = vec![T::zero(); k * n];
                for i in 0..m {
                    for p in 0..k {
                        for j in 0..n {
                            let gij = gd[i * n + j];
                            da[i * k + p] = da[i * k + p] + gij * bt.get2(p, j);
                            db[p * n + j] = db[p * n + j] + at.get2(i, p) * gij;
                        }
                    }
                }
                acc(*a, Tensor::from_vec(vec![m, k], da).unwrap());
                acc(*b, Tensor::from_vec(vec![k, n], db).unwrap());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(bt.data()).map(|(x, y)| *x * *y).collect();
                let db = gd.iter().zip(at.data()).map(|(x, y)| *x * *y).collect();
                acc(*a, Tensor::from_vec(g.shape().to_vec(), da).unwrap());
                acc(*b, Tensor::from_vec(g.shape().to_vec(), db).unwrap());
            }
            Op::Scale(a, s) => acc(*a, g.scaled(*s)),
            Op::ScaleBy(a, s) => {
                let (at, st) = (self.value(*a), self.value(*s));
                acc(*a, g.scaled(st.data()[0]));
                let ds: T = gd.iter().zip(at.data()).map(|(x, y)| *x * *y).sum();
                acc(*s, Tensor::from_vec(st.shape().to_vec(), vec![ds]).unwrap());
            }
            Op::Exp(a) => {
                let out = node.value.data();
                let d = gd.iter().zip(out).map(|(x, y)| *x * *y).collect();
                acc(*a, Tensor::from_vec(g.shape().to_vec(), d).unwrap());
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, Tensor::vector(gd[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::Stack(rows) => {
                let width = node.value.shape()[1];
                for (r, &p) in rows.iter().enumerate() {
                    acc(p, Tensor::vector(gd[r * width..(r + 1) * width].to_vec()));
                }
            }
            Op::Slice { src, start } => {
                let mut d = vec![T::zero(); self.value(*src).len()];
                d[*start..*start + gd.len()].copy_from_slice(gd);
                acc(*src, Tensor::vector(d));
            }
            Op::LeakyRelu(a, slope) => {
                let at = self.value(*a);
                let d = gd
                    .iter()
                    .zip(at.data())
                    .map(|(gv, x)| if *x >= T::zero() { *gv } else { *gv * *slope })
                    .collect();
                acc(*a, Tensor::from_vec(g.shape().to_vec(), d).unwrap());
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                for (off, stride, len) in lanes(node.value.shape(), *axis) {
                    let dot: T = (0..len)
                        .map(|i| gd[off + i * stride] * y[off + i * stride])
                        .sum();
                    for i in 0..len {
                        let k = off + i * stride;
                        d[k] = y[k] * (gd[k] - dot);
                    }
                }
                acc(*a, Tensor::from_vec(g.shape().to_vec(), d).unwrap());
            }
            Op::LogSoftmax(a, axis) => {
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                for (off, stride, len) in lanes(node.value.shape(), *axis) {
                    let total: T = (0..len).map(|i| gd[off + i * stride]).sum();
                    for i in 0..len {
                        let k = off + i * stride;
                        d[k] = gd[k] - y[k].exp() * total;
                    }
                }
                acc(*a, Tensor::from_vec(g.shape().to_vec(), d).unwrap());
            }
            Op::Sum(a) => {
                let at = self.value(*a);
                let d = vec![gd[0]; at.len()];
                acc(*a, Tensor::from_vec(at.shape().to_vec(), d).unwrap());
            }
            Op::Mean(a) => {
                let at = self.value(*a);
                let n = T::from_usize(at.len()).unwrap();
                let d = vec![gd[0] / n; at.len()];
                acc(*a, Tensor::from_vec(at.shape().to_vec(), d).unwrap());
            }
            Op::MeanRows(a) => {
                let at = self.value(*a);
                let (n, m) = at.dims2().unwrap();
                let nf = T::from_usize(n).unwrap();
                let mut d = vec![T::zero(); n * m];
                for r in 0..n {
                    for c in 0..m {
                        d[r * m + c] = gd[c] / nf;
                    }
                }
                acc(*a, Tensor::from_vec(vec![n, m], d).unwrap());
            }
            Op::MaxRows(a, arg) => {
                let at = self.value(*a);
                let (n, m) = at.dims2().unwrap();
                let mut d = vec![T::zero(); n * m];
                for (c, &r) in arg.iter().enumerate() {
                    d[r * m + c] = gd[c];
                }
                acc(*a, Tensor::from_vec(vec![n, m], d).unwrap());
            }
            Op::L2Norm(a) => {
                let at = self.value(*a);
                let norm = node.value.data()[0];
                let d = if norm > T::zero() {
                    at.data().iter().map(|x| gd[0] * *x / norm).collect()
                } else {
                    vec![T::zero(); at.len()]
                };
                acc(*a, Tensor::from_vec(at.shape().to_vec(), d).unwrap());
            }
        }
    }
}
