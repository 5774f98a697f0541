use super::kernels::{self, AttentionShape};
use super::{DiffError, Float, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Minimum { a: Var, b: Var },
    Maximum { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    Scale { a: Var, c: T },
    AddScalar { a: Var },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Abs { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<T> },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    L2Normalize { a: Var, norms: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    GatherRows { a: Var, idx: Vec<usize> },
    SelectToken { a: Var, pos: usize },
    PrependRow { a: Var, row: Var },
    SliceLast { a: Var, start: usize },
    Reshape { a: Var },
    ConcatRows { parts: Vec<Var> },
    Sum { a: Var },
    Mean { a: Var },
    SumLast { a: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Vec<T>>,
}

/// Ordered record of operations. Values are appended in execution order, so
/// every operation's inputs precede it.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(kernel: &'static str, a: &[usize], b: &[usize]) -> Result<(), DiffError> {
    if a != b {
        return Err(DiffError::shape(kernel, &[a, b]));
    }
    Ok(())
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad: false, needs_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a])
    }

    fn binary(
        &mut self,
        kernel: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(kernel, x.shape(), y.shape())?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[.., k] · b[k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, w) = (self.value(a), self.value(b));
        if x.shape().is_empty() || w.shape().len() != 2 || x.last_dim() != w.shape()[0] {
            return Err(DiffError::shape("matmul", &[x.shape(), w.shape()]));
        }
        let k = x.last_dim();
        let n = w.shape()[1];
        let m = x.numel() / k.max(1);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(x.data(), w.data(), &mut out, m, k, n, false);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(DiffError::shape("transpose", &[x.shape()]));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose { a }, &[a]))
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", a, b, |p, q| p + q, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("div", a, b, |p, q| p / q, Op::Div { a, b })
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("minimum", a, b, |p, q| if q < p { q } else { p }, Op::Minimum { a, b })
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("maximum", a, b, |p, q| if q > p { q } else { p }, Op::Maximum { a, b })
    }

    /// Adds `b` broadcast over the leading axes of `a`; `b`'s shape must be a
    /// suffix of `a`'s (a bias `[d]`, a position table `[l, d]`, ...).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        let (xs, ys) = (x.shape(), y.shape());
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(DiffError::shape("add_broadcast", &[xs, ys]));
        }
        let w = y.numel();
        let mut out = x.data().to_vec();
        if w > 0 {
            for chunk in out.chunks_exact_mut(w) {
                add_into(chunk, y.data());
            }
        }
        let value = Tensor::new(xs.to_vec(), out)?;
        Ok(self.push(value, Op::AddBroadcast { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |v| v * c, Op::Scale { a, c })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |v| v + c, Op::AddScalar { a })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.exp(), Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        if self.value(a).numel() == 0 {
            return Err(DiffError::EmptyAxis { kernel: "log" });
        }
        Ok(self.unary(a, |v| v.ln(), Op::Log { a }))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.abs(), Op::Abs { a })
    }

    // ---- normalisation ---------------------------------------------------

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, DiffError> {
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let d = x_last(xv);
        if d == 0 {
            return Err(DiffError::EmptyAxis { kernel: "layer_norm" });
        }
        if g.shape() != [d] || b.shape() != [d] {
            return Err(DiffError::shape("layer_norm", &[xv.shape(), g.shape(), b.shape()]));
        }
        let eps = T::c(eps);
        let inv_d = T::one() / T::c(d as f64);
        let rows = xv.numel() / d;
        let mut out = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        for (r, (xr, yr)) in xv.data().chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                yr[i] = (xr[i] - mean) * rs * g.data()[i] + b.data()[i];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, rstd }, &[x, gamma, beta]))
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        let w = x_last(x);
        if w == 0 {
            return Err(DiffError::EmptyAxis { kernel: "softmax" });
        }
        let mut out = vec![T::zero(); x.numel()];
        kernels::softmax_rows(x.data(), &mut out, w);
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { a }, &[a]))
    }

    /// `log(softmax(a))` over the last axis, computed stably.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        let w = x_last(x);
        if w == 0 {
            return Err(DiffError::EmptyAxis { kernel: "log_softmax" });
        }
        let mut out = vec![T::zero(); x.numel()];
        kernels::log_softmax_rows(x.data(), &mut out, w);
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax { a }, &[a]))
    }

    /// Rows scaled to unit Euclidean norm; `1e-12` is added under the root.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        let w = x_last(x);
        if w == 0 {
            return Err(DiffError::EmptyAxis { kernel: "l2_normalize" });
        }
        let eps = T::c(1e-12);
        let mut out = vec![T::zero(); x.numel()];
        let mut norms = Vec::with_capacity(x.numel() / w);
        for (xr, yr) in x.data().chunks_exact(w).zip(out.chunks_exact_mut(w)) {
            let n = (xr.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            norms.push(n);
            for (y, &v) in yr.iter_mut().zip(xr) {
                *y = v / n;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::L2Normalize { a, norms }, &[a]))
    }

    // ---- attention -------------------------------------------------------

    /// Multi-head scaled dot-product attention over `q [b, lq, d]`,
    /// `k, v [b, lk, d]`. `key_mask` (length `b * lk`) drops keys marked false.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var, DiffError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (qs, ks, vs) = (qv.shape(), kv.shape(), vv.shape());
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(DiffError::shape("attention", &[qs, ks, vs]));
        }
        if heads == 0 || qs[2] % heads != 0 {
            return Err(DiffError::InvalidArgument(format!(
                "attention: width {} not divisible into {} heads",
                qs[2], heads
            )));
        }
        if ks[1] == 0 {
            return Err(DiffError::EmptyAxis { kernel: "attention" });
        }
        if let Some(m) = key_mask {
            if m.len() != ks[0] * ks[1] {
                return Err(DiffError::Shape {
                    kernel: "attention",
                    detail: format!("key mask of {} entries for keys {:?}", m.len(), ks),
                });
            }
        }
        let shape = AttentionShape { batch: qs[0], lq: qs[1], lk: ks[1], width: qs[2], heads };
        let mut out = vec![T::zero(); qv.numel()];
        let probs = kernels::attention_forward(&shape, qv.data(), kv.data(), vv.data(), key_mask, &mut out);
        let value = Tensor::new(qs.to_vec(), out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let probs = if needs { probs } else { Vec::new() };
        Ok(self.push(value, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    // ---- indexing --------------------------------------------------------

    /// Rows of `a` (indexed along axis 0) in the order given by `idx`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let x = self.value(a);
        let rows = x.shape().first().copied().ok_or_else(|| DiffError::shape("gather_rows", &[x.shape()]))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(DiffError::InvalidArgument(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let w = x.numel() / rows.max(1);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&x.data()[i * w..(i + 1) * w]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::GatherRows { a, idx: idx.to_vec() }, &[a]))
    }

    /// Row `pos` of every sequence: `[b, l, d] -> [b, d]`.
    pub fn select_token(&mut self, a: Var, pos: usize) -> Result<Var, DiffError> {
        let x = self.value(a);
        let s = x.shape();
        if s.len() != 3 || pos >= s[1] {
            return Err(DiffError::Shape { kernel: "select_token", detail: format!("{s:?} at {pos}") });
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * d);
        for i in 0..b {
            out.extend_from_slice(&x.data()[(i * l + pos) * d..(i * l + pos + 1) * d]);
        }
        let value = Tensor::new(vec![b, d], out)?;
        Ok(self.push(value, Op::SelectToken { a, pos }, &[a]))
    }

    /// Prepends the same row `[d]` to every sequence: `[b, l, d] -> [b, l+1, d]`.
    pub fn prepend_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let (x, r) = (self.value(a), self.value(row));
        let s = x.shape();
        if s.len() != 3 || r.shape() != [s[2]] {
            return Err(DiffError::shape("prepend_row", &[s, r.shape()]));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * (l + 1) * d);
        for i in 0..b {
            out.extend_from_slice(r.data());
            out.extend_from_slice(&x.data()[i * l * d..(i + 1) * l * d]);
        }
        let value = Tensor::new(vec![b, l + 1, d], out)?;
        Ok(self.push(value, Op::PrependRow { a, row }, &[a, row]))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let x = self.value(a);
        let w = x_last(x);
        if start + len > w || x.shape().is_empty() {
            return Err(DiffError::Shape {
                kernel: "slice_last",
                detail: format!("{:?} columns {}..{}", x.shape(), start, start + len),
            });
        }
        let mut out = Vec::with_capacity(x.numel() / w.max(1) * len);
        for row in x.data().chunks_exact(w) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SliceLast { a, start }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    /// Stacks tensors with identical trailing shape along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts.first().ok_or(DiffError::EmptyAxis { kernel: "concat_rows" })?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let x = self.value(p);
            if x.shape().is_empty() || x.shape()[1..] != *tail {
                return Err(DiffError::shape("concat_rows", &[self.shape(*first), x.shape()]));
            }
            rows += x.shape()[0];
            out.extend_from_slice(x.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        if x.numel() == 0 {
            return Err(DiffError::EmptyAxis { kernel: "mean" });
        }
        let s = x.data().iter().copied().sum::<T>() / T::c(x.numel() as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean { a }, &[a]))
    }

    /// Sum over the last axis: `[.., n] -> [..]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        let w = x_last(x);
        if x.shape().is_empty() {
            return Err(DiffError::shape("sum_last", &[x.shape()]));
        }
        let out: Vec<T> = if w == 0 {
            vec![T::zero(); x.numel()]
        } else {
            x.data().chunks_exact(w).map(|r| r.iter().copied().sum()).collect()
        };
        let shape = x.shape()[..x.shape().len() - 1].to_vec();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SumLast { a }, &[a]))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Accumulates `d root / d leaf` into every reachable leaf created with
    /// `requires_grad`. Repeated calls add to the stored gradients.
    pub fn backward(&mut self, root: Var) -> Result<(), DiffError> {
        let rv = self.value(root);
        if rv.numel() != 1 || rv.shape().iter().any(|&d| d != 1) {
            return Err(DiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        if !self.needs(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    grads[i] = Some(g);
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => add_into(acc, &g),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let needs = |v: Var| nodes[v.0].needs_grad;
        let out = nodes[i].value.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (x, w) = (&nodes[a.0].value, &nodes[b.0].value);
                let k = x.last_dim();
                let n = w.shape()[1];
                let m = x.numel() / k.max(1);
                acc(*a, &|ga| kernels::matmul_nt_acc(g, w.data(), ga, m, k, n));
                acc(*b, &|gb| kernels::matmul_tn_acc(x.data(), g, gb, m, k, n));
            }
            Op::Transpose { a } => {
                let s = nodes[a.0].value.shape();
                let (r, c) = (s[0], s[1]);
                acc(*a, &|ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &|ga| add_into(ga, g));
                acc(*b, &|gb| add_into(gb, g));
            }
            Op::Sub { a, b } => {
                acc(*a, &|ga| add_into(ga, g));
                acc(*b, &|gb| gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s));
            }
            Op::Mul { a, b } => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, &|ga| ga.iter_mut().zip(g).zip(y).for_each(|((d, &s), &q)| *d += s * q));
                acc(*b, &|gb| gb.iter_mut().zip(g).zip(x).for_each(|((d, &s), &p)| *d += s * p));
            }
            Op::Div { a, b } => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, &|ga| ga.iter_mut().zip(g).zip(y).for_each(|((d, &s), &q)| *d += s / q));
                acc(*b, &|gb| {
                    for j in 0..gb.len() {
                        gb[j] -= g[j] * x[j] / (y[j] * y[j]);
                    }
                });
            }
            Op::Minimum { a, b } | Op::Maximum { a, b } => {
                let is_min = matches!(nodes[i].op, Op::Minimum { .. });
                let (x, y) = (val(*a), val(*b));
                let pick_b = |j: usize| if is_min { y[j] < x[j] } else { y[j] > x[j] };
                acc(*a, &|ga| {
                    for j in 0..ga.len() {
                        if !pick_b(j) {
                            ga[j] += g[j];
                        }
                    }
                });
                acc(*b, &|gb| {
                    for j in 0..gb.len() {
                        if pick_b(j) {
                            gb[j] += g[j];
                        }
                    }
                });
            }
            Op::AddBroadcast { a, b } => {
                acc(*a, &|ga| add_into(ga, g));
                acc(*b, &|gb| {
                    let w = gb.len();
                    if w > 0 {
                        for chunk in g.chunks_exact(w) {
                            add_into(gb, chunk);
                        }
                    }
                });
            }
            Op::Scale { a, c } => {
                acc(*a, &|ga| ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c));
            }
            Op::AddScalar { a } => acc(*a, &|ga| add_into(ga, g)),
            Op::Gelu { a } => {
                let x = val(*a);
                acc(*a, &|ga| {
                    ga.iter_mut().zip(g).zip(x).for_each(|((d, &s), &v)| *d += s * kernels::gelu_grad(v))
                });
            }
            Op::Sigmoid { a } => {
                acc(*a, &|ga| {
                    ga.iter_mut().zip(g).zip(out).for_each(|((d, &s), &y)| *d += s * y * (T::one() - y))
                });
            }
            Op::Exp { a } => {
                acc(*a, &|ga| ga.iter_mut().zip(g).zip(out).for_each(|((d, &s), &y)| *d += s * y));
            }
            Op::Log { a } => {
                let x = val(*a);
                acc(*a, &|ga| ga.iter_mut().zip(g).zip(x).for_each(|((d, &s), &v)| *d += s / v));
            }
            Op::Abs { a } => {
                let x = val(*a);
                acc(*a, &|ga| {
                    ga.iter_mut().zip(g).zip(x).for_each(|((d, &s), &v)| {
                        if v > T::zero() {
                            *d += s
                        } else if v < T::zero() {
                            *d -= s
                        }
                    })
                });
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let xv = val(*x);
                let gm = val(*gamma);
                let d = gm.len();
                let inv_d = T::one() / T::c(d as f64);
                let xhat_row = |r: usize, buf: &mut [T]| {
                    let xr = &xv[r * d..(r + 1) * d];
                    let mean = xr.iter().copied().sum::<T>() * inv_d;
                    for j in 0..d {
                        buf[j] = (xr[j] - mean) * rstd[r];
                    }
                };
                let rows = rstd.len();
                acc(*gamma, &|gg| {
                    let mut xh = vec![T::zero(); d];
                    for r in 0..rows {
                        xhat_row(r, &mut xh);
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xh[j];
                        }
                    }
                });
                acc(*beta, &|gb| {
                    for r in 0..rows {
                        add_into(gb, &g[r * d..(r + 1) * d]);
                    }
                });
                acc(*x, &|gx| {
                    let mut xh = vec![T::zero(); d];
                    let mut dxh = vec![T::zero(); d];
                    for r in 0..rows {
                        xhat_row(r, &mut xh);
                        let gr = &g[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxh[j] = gr[j] * gm[j];
                        }
                        let m1 = dxh.iter().copied().sum::<T>() * inv_d;
                        let m2 = dxh.iter().zip(&xh).map(|(&p, &q)| p * q).sum::<T>() * inv_d;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let w = nodes[i].value.last_dim();
                acc(*a, &|ga| {
                    for ((gar, gr), yr) in ga.chunks_exact_mut(w).zip(g.chunks_exact(w)).zip(out.chunks_exact(w)) {
                        let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for j in 0..w {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { a } => {
                let w = nodes[i].value.last_dim();
                acc(*a, &|ga| {
                    for ((gar, gr), yr) in ga.chunks_exact_mut(w).zip(g.chunks_exact(w)).zip(out.chunks_exact(w)) {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..w {
                            gar[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::L2Normalize { a, norms } => {
                let w = nodes[i].value.last_dim();
                acc(*a, &|ga| {
                    for (r, ((gar, gr), yr)) in
                        ga.chunks_exact_mut(w).zip(g.chunks_exact(w)).zip(out.chunks_exact(w)).enumerate()
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for j in 0..w {
                            gar[j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                let qs = nodes[q.0].value.shape();
                let shape = AttentionShape {
                    batch: qs[0],
                    lq: qs[1],
                    lk: nodes[k.0].value.shape()[1],
                    width: qs[2],
                    heads: *heads,
                };
                let mut dq = needs(*q).then(|| vec![T::zero(); nodes[q.0].value.numel()]);
                let mut dk = needs(*k).then(|| vec![T::zero(); nodes[k.0].value.numel()]);
                let mut dv = needs(*v).then(|| vec![T::zero(); nodes[v.0].value.numel()]);
                kernels::attention_backward(
                    &shape,
                    val(*q),
                    val(*k),
                    val(*v),
                    probs,
                    g,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                if let Some(d) = dq {
                    acc(*q, &|s| add_into(s, &d));
                }
                if let Some(d) = dk {
                    acc(*k, &|s| add_into(s, &d));
                }
                if let Some(d) = dv {
                    acc(*v, &|s| add_into(s, &d));
                }
            }
            Op::GatherRows { a, idx } => {
                let w = nodes[i].value.numel() / idx.len().max(1);
                acc(*a, &|ga| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut ga[src * w..(src + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::SelectToken { a, pos } => {
                let s = nodes[a.0].value.shape();
                let (b, l, d) = (s[0], s[1], s[2]);
                acc(*a, &|ga| {
                    for r in 0..b {
                        add_into(&mut ga[(r * l + pos) * d..(r * l + pos + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::PrependRow { a, row } => {
                let s = nodes[a.0].value.shape();
                let (b, l, d) = (s[0], s[1], s[2]);
                acc(*a, &|ga| {
                    for r in 0..b {
                        let src = &g[(r * (l + 1) + 1) * d..(r + 1) * (l + 1) * d];
                        add_into(&mut ga[r * l * d..(r + 1) * l * d], src);
                    }
                });
                acc(*row, &|gr| {
                    for r in 0..b {
                        add_into(gr, &g[r * (l + 1) * d..(r * (l + 1) + 1) * d]);
                    }
                });
            }
            Op::SliceLast { a, start } => {
                let w = nodes[a.0].value.last_dim();
                let len = nodes[i].value.last_dim();
                acc(*a, &|ga| {
                    if len == 0 {
                        return;
                    }
                    for (gar, gr) in ga.chunks_exact_mut(w).zip(g.chunks_exact(len)) {
                        add_into(&mut gar[*start..*start + len], gr);
                    }
                });
            }
            Op::Reshape { a } => acc(*a, &|ga| add_into(ga, g)),
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    acc(p, &|gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Sum { a } => acc(*a, &|ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean { a } => {
                let n = T::c(nodes[a.0].value.numel() as f64);
                acc(*a, &|ga| ga.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumLast { a } => {
                let w = nodes[a.0].value.last_dim();
                acc(*a, &|ga| {
                    if w == 0 {
                        return;
                    }
                    for (gar, &s) in ga.chunks_exact_mut(w).zip(g) {
                        gar.iter_mut().for_each(|d| *d += s);
                    }
                });
            }
        }
    }
}

fn x_last<T: Float>(x: &Tensor<T>) -> usize {
    if x.shape().is_empty() {
        0
    } else {
        x.last_dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.l2_normalize(x).unwrap();
        let d = tape.data(y);
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let x = t(&[3, 2], &[1.0, -2.0, 3.5, 4.0, 0.0, 7.0]);
        let i = tape.constant(Tensor::identity(3));
        let xv = tape.constant(x.clone());
        let ixt = tape.transpose(xv).unwrap();
        let y = tape.matmul(ixt, i).unwrap();
        let back = tape.transpose(y).unwrap();
        assert_eq!(tape.value(back), &x);
        let id_left = tape.matmul(i, xv).unwrap();
        assert_eq!(tape.value(id_left), &x);
    }

    #[test]
    fn shape_errors_name_kernel() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, c).unwrap_err().to_string().contains("add"));
        let e = tape.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(tape.softmax(e), Err(DiffError::EmptyAxis { .. })));
        let empty = tape.constant(Tensor::zeros(&[0]));
        assert!(matches!(tape.log(empty), Err(DiffError::EmptyAxis { .. })));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_square_norm_is_identity() {
        let data = [0.3, -1.2, 2.0, 0.7];
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &data), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let h = tape.scale(s, 0.5);
        tape.backward(h).unwrap();
        for (g, v) in tape.grad(x).unwrap().iter().zip(data) {
            assert!((g - v).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_pick_gradient() {
        let data = [0.5, -1.0, 2.0];
        let k = 1;
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &data), true);
        let p = tape.softmax(x).unwrap();
        let lp = tape.log(p).unwrap();
        let pick = tape.slice_last(lp, k, 1).unwrap();
        let root = tape.sum(pick);
        tape.backward(root).unwrap();
        let sm = tape.data(p).to_vec();
        for (j, g) in tape.grad(x).unwrap().iter().enumerate() {
            let expect = if j == k { 1.0 } else { 0.0 } - sm[j];
            assert!((g - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(DiffError::NonScalarRoot(_))));
    }

    #[test]
    fn constants_never_receive_grad() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let x = tape.leaf(t(&[2], &[3.0, 4.0]), true);
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn masked_keys_are_ignored() {
        // One query, three keys; the last key is masked and carries a huge value.
        let mut tape = Tape::new();
        let q = tape.constant(t(&[1, 1, 2], &[1.0, 0.0]));
        let k = tape.constant(t(&[1, 3, 2], &[1.0, 0.0, 0.0, 1.0, 5.0, 5.0]));
        let v = tape.constant(t(&[1, 3, 2], &[1.0, 0.0, 0.0, 1.0, 1e6, 1e6]));
        let out = tape.attention(q, k, v, 1, Some(&[true, true, false])).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let p0 = s.exp() / (s.exp() + 1.0);
        let d = tape.data(out);
        assert!((d[0] - p0).abs() < 1e-12 && (d[1] - (1.0 - p0)).abs() < 1e-12);
    }
}
