//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: each call computes its value
//! immediately and appends a node to the tape. [`Graph::backward`] walks the
//! tape in reverse and returns a [`Gradients`] table indexed by [`Var`].

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{self, AttnShape};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A node handle on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}


#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LinearT {
        x: Var,
        w: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddLead {
        a: Var,
        b: Var,
    },
    AddMid {
        a: Var,
        b: Var,
    },
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        total: T,
    },
    Mse(Var, Var),
    CosineLoss {
        a: Var,
        b: Var,
    },
    Mean(Var),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Eager computation tape.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<(u64, ParamId), Var>,
    param_leaves: Vec<(u64, ParamId, Var)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn cosine_eps<T: Scalar>() -> T {
    T::lit(1e-8)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_leaves: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients but is not backed by a store.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// The leaf for a stored parameter. Repeated calls return the same node.
    /// Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.tag(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
            needs_grad: store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        self.param_leaves.push((key.0, id, v));
        v
    }

    /// `x W (+ b)` over the trailing axis of `x`; `W` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().ok_or_else(|| TensorError::invalid("linear", "scalar input"))?;
        if ws.len() != 2 || ws[0] != k {
            return Err(TensorError::mismatch("linear", &xs, &ws));
        }
        let n = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(TensorError::mismatch("linear bias", &ws, self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / k.max(1);
        let mut out = vec![T::zero(); rows * n];
        T::gemm(
            rows,
            k,
            n,
            T::one(),
            self.value(x).data(),
            k as isize,
            1,
            self.value(w).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::from_vec(&shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// `x Wᵀ` with `W` stored as `[out, in]`, e.g. an LM head tied to the
    /// token embedding table.
    pub fn linear_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().ok_or_else(|| TensorError::invalid("linear_t", "scalar input"))?;
        if ws.len() != 2 || ws[1] != k {
            return Err(TensorError::mismatch("linear_t", &xs, &ws));
        }
        let n = ws[0];
        let rows = self.value(x).numel() / k.max(1);
        let mut out = vec![T::zero(); rows * n];
        T::gemm(
            rows,
            k,
            n,
            T::one(),
            self.value(x).data(),
            k as isize,
            1,
            self.value(w).data(),
            1,
            k as isize,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::LinearT { x, w }, &[x, w]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// Adds `b` to every leading slice of `a`; `b`'s shape must equal the
    /// trailing dims of `a` (e.g. positional table `[L, D]` onto `[B, L, D]`).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::mismatch("add_broadcast", sa, sb));
        }
        let inner = self.value(b).numel();
        let mut value = self.value(a).clone();
        let bd = self.value(b).data();
        for chunk in value.data_mut().chunks_mut(inner) {
            for (x, &y) in chunk.iter_mut().zip(bd) {
                *x += y;
            }
        }
        Ok(self.push(value, Op::AddLead { a, b }, &[a, b]))
    }

    /// `a [B, N, D] + b [B, D]` broadcast over the middle axis.
    pub fn add_per_item(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 2 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::mismatch("add_per_item", sa, sb));
        }
        let (n, d) = (sa[1], sa[2]);
        let mut value = self.value(a).clone();
        let bd = self.value(b).data();
        for (i, chunk) in value.data_mut().chunks_mut(d).enumerate() {
            let row = &bd[(i / n) * d..(i / n + 1) * d];
            for (x, &y) in chunk.iter_mut().zip(row) {
                *x += y;
            }
        }
        Ok(self.push(value, Op::AddMid { a, b }, &[a, b]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (y, means, rstds) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            d,
        );
        let value = Tensor::from_vec(self.shape(x), y)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row gather from `table [V, D]`; the result has shape `out_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(TensorError::invalid("embedding", "table must be 2-D"));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if out_shape.iter().product::<usize>() != ids.len() {
            return Err(TensorError::invalid("embedding", "ids do not fill out_shape"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        let td = self.value(table).data();
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::OutOfRange {
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Concatenation of `[B, L_i, D]` tensors along axis 1.
    pub fn concat_seq(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| TensorError::invalid("concat", "empty"))?).to_vec();
        if first.len() != 3 {
            return Err(TensorError::invalid("concat", "expects 3-D tensors"));
        }
        let (b, d) = (first[0], first[2]);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[0] != b || s[2] != d {
                return Err(TensorError::mismatch("concat", &first, s));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(b * total * d);
        for bi in 0..b {
            for &p in parts {
                let l = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[bi * l * d..(bi + 1) * l * d]);
            }
        }
        let value = Tensor::from_vec(&[b, total, d], out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Positions `start..end` along axis 1 of a `[B, L, D]` tensor.
    pub fn slice_seq(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || start > end || end > s[1] {
            return Err(TensorError::invalid(
                "slice_seq",
                format!("range {start}..{end} invalid for {s:?}"),
            ));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let len = end - start;
        let mut out = Vec::with_capacity(b * len * d);
        let xd = self.value(x).data();
        for bi in 0..b {
            out.extend_from_slice(&xd[(bi * l + start) * d..(bi * l + end) * d]);
        }
        let value = Tensor::from_vec(&[b, len, d], out)?;
        Ok(self.push(value, Op::Slice { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Multi-head scaled dot-product attention over `[B, L, D]` projections.
    /// `key_mask[b * L + j]` false hides key `j` of item `b`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(TensorError::mismatch("attention", &s, self.shape(k)));
        }
        if heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(TensorError::invalid("attention", "dim not divisible by heads"));
        }
        let shape = AttnShape {
            batch: s[0],
            len: s[1],
            dim: s[2],
            heads,
        };
        if let Some(m) = key_mask {
            if m.len() != s[0] * s[1] {
                return Err(TensorError::invalid("attention", "key mask length"));
            }
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            shape,
            causal,
            key_mask,
        );
        let value = Tensor::from_vec(&s, out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention probabilities `[B, H, L, L]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], [usize; 4])> {
        match &self.nodes[v.0].op {
            Op::Attention { shape, probs, .. } => Some((
                probs,
                [shape.batch, shape.heads, shape.len, shape.len],
            )),
            _ => None,
        }
    }

    /// Weighted mean token cross-entropy over rows of `logits [.., V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.last_dim();
        let rows = lv.rows();
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("{rows} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let total: T = weights.iter().copied().sum();
        if total <= T::zero() {
            return Err(TensorError::invalid("cross_entropy", "no supervised positions"));
        }
        let mut probs = vec![T::zero(); rows * vocab];
        let mut loss = T::zero();
        for r in 0..rows {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p /= z;
            }
            if weights[r] != T::zero() {
                let t = targets[r];
                if t >= vocab {
                    return Err(TensorError::OutOfRange { index: t, size: vocab });
                }
                loss += weights[r] * (z.ln() + max - row[t]);
            }
        }
        let value = Tensor::scalar(loss / total);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                total,
            },
            &[logits],
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let value = Tensor::scalar(diff.sum_sq() / T::from_usize(diff.numel()).unwrap());
        Ok(self.push(value, Op::Mse(a, b), &[a, b]))
    }

    /// `1 - mean_r cos(a_r, b_r)` over the rows of two equally shaped tensors.
    pub fn cosine_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::mismatch("cosine_loss", av.shape(), bv.shape()));
        }
        let rows = av.rows();
        let mut total = T::zero();
        for r in 0..rows {
            total += row_cosine(av.row(r), bv.row(r));
        }
        let value = Tensor::scalar(T::one() - total / T::from_usize(rows).unwrap());
        Ok(self.push(value, Op::CosineLoss { a, b }, &[a, b]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        self.push(value, Op::Mean(a), &[a])
    }

    /// Forward value `replacement`, backward identity into `z`
    /// (straight-through estimator).
    pub fn straight_through(&mut self, z: Var, replacement: Tensor<T>) -> Result<Var> {
        if self.shape(z) != replacement.shape() {
            return Err(TensorError::mismatch("straight_through", self.shape(z), replacement.shape()));
        }
        Ok(self.push(replacement, Op::StraightThrough(z), &[z]))
    }

    /// Reverse pass from a scalar output with seed gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::invalid("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(self.shape(loss), vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            param_leaves: self.param_leaves.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_vec(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        let t = Tensor::from_vec(self.shape(v), g)?;
        self.accumulate(grads, v, t);
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let k = xv.last_dim();
                let n = self.shape(*w)[1];
                let rows = xv.numel() / k.max(1);
                if self.needs_grad(*x) {
                    let mut dx = vec![T::zero(); rows * k];
                    // dX = dY W^T
                    T::gemm(
                        rows,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        n as isize,
                        1,
                        self.value(*w).data(),
                        1,
                        n as isize,
                        T::zero(),
                        &mut dx,
                        k as isize,
                        1,
                    );
                    self.accumulate_vec(grads, *x, dx)?;
                }
                if self.needs_grad(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    // dW = X^T dY
                    T::gemm(
                        k,
                        rows,
                        n,
                        T::one(),
                        xv.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        n as isize,
                        1,
                    );
                    self.accumulate_vec(grads, *w, dw)?;
                }
                if let Some(b) = b {
                    if self.needs_grad(*b) {
                        let mut db = vec![T::zero(); n];
                        for row in g.data().chunks(n) {
                            for (acc, &x) in db.iter_mut().zip(row) {
                                *acc += x;
                            }
                        }
                        self.accumulate_vec(grads, *b, db)?;
                    }
                }
            }
            Op::LinearT { x, w } => {
                let xv = self.value(*x);
                let k = xv.last_dim();
                let n = self.shape(*w)[0];
                let rows = xv.numel() / k.max(1);
                if self.needs_grad(*x) {
                    // dX = dY W
                    let mut dx = vec![T::zero(); rows * k];
                    T::gemm(
                        rows,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        n as isize,
                        1,
                        self.value(*w).data(),
                        k as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        k as isize,
                        1,
                    );
                    self.accumulate_vec(grads, *x, dx)?;
                }
                if self.needs_grad(*w) {
                    // dW = dY^T X
                    let mut dw = vec![T::zero(); n * k];
                    T::gemm(
                        n,
                        rows,
                        k,
                        T::one(),
                        g.data(),
                        1,
                        n as isize,
                        xv.data(),
                        k as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        k as isize,
                        1,
                    );
                    self.accumulate_vec(grads, *w, dw)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                let da = g.zip_map(self.value(*b), |x, y| x * y)?;
                let db = g.zip_map(self.value(*a), |x, y| x * y)?;
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(a, s) => {
                // A zero factor contributes nothing; skipping keeps the
                // upstream gradients bitwise untouched.
                if *s != T::zero() {
                    self.accumulate(grads, *a, g.scale(*s));
                }
            }
            Op::AddLead { a, b } => {
                self.accumulate(grads, *a, g.clone());
                if self.needs_grad(*b) {
                    let inner = self.value(*b).numel();
                    let mut db = vec![T::zero(); inner];
                    for chunk in g.data().chunks(inner) {
                        for (acc, &x) in db.iter_mut().zip(chunk) {
                            *acc += x;
                        }
                    }
                    self.accumulate_vec(grads, *b, db)?;
                }
            }
            Op::AddMid { a, b } => {
                self.accumulate(grads, *a, g.clone());
                if self.needs_grad(*b) {
                    let s = self.shape(*a);
                    let (n, d) = (s[1], s[2]);
                    let mut db = vec![T::zero(); s[0] * d];
                    for (r, chunk) in g.data().chunks(d).enumerate() {
                        let row = &mut db[(r / n) * d..(r / n + 1) * d];
                        for (acc, &x) in row.iter_mut().zip(chunk) {
                            *acc += x;
                        }
                    }
                    self.accumulate_vec(grads, *b, db)?;
                }
            }
            Op::Gelu(a) => {
                let da = g.zip_map(self.value(*a), |gy, x| gy * kernels::gelu_grad(x))?;
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = g.zip_map(&node.value, |gy, y| gy * y * (T::one() - y))?;
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            } => {
                let d = self.value(*x).last_dim();
                let lg = kernels::layer_norm_backward(
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    means,
                    rstds,
                    g.data(),
                    d,
                );
                self.accumulate_vec(grads, *x, lg.dx)?;
                self.accumulate_vec(grads, *gamma, lg.dgamma)?;
                self.accumulate_vec(grads, *beta, lg.dbeta)?;
            }
            Op::Embedding { table, ids } => {
                if self.needs_grad(*table) {
                    let d = self.shape(*table)[1];
                    let mut dt = vec![T::zero(); self.value(*table).numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (acc, &x) in dt[id * d..(id + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *acc += x;
                        }
                    }
                    self.accumulate_vec(grads, *table, dt)?;
                }
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let (b, total, d) = (s[0], s[1], s[2]);
                let mut offset = 0;
                for &p in parts {
                    let l = self.shape(p)[1];
                    if self.needs_grad(p) {
                        let mut dp = Vec::with_capacity(b * l * d);
                        for bi in 0..b {
                            let start = (bi * total + offset) * d;
                            dp.extend_from_slice(&g.data()[start..start + l * d]);
                        }
                        self.accumulate_vec(grads, p, dp)?;
                    }
                    offset += l;
                }
            }
            Op::Slice { x, start } => {
                if self.needs_grad(*x) {
                    let s = self.shape(*x);
                    let (b, l, d) = (s[0], s[1], s[2]);
                    let len = node.value.shape()[1];
                    let mut dx = vec![T::zero(); b * l * d];
                    for bi in 0..b {
                        let dst = (bi * l + start) * d;
                        dx[dst..dst + len * d].copy_from_slice(&g.data()[bi * len * d..(bi + 1) * len * d]);
                    }
                    self.accumulate_vec(grads, *x, dx)?;
                }
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshape(self.shape(*x))?;
                self.accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g.data(),
                    *shape,
                );
                self.accumulate_vec(grads, *q, dq)?;
                self.accumulate_vec(grads, *k, dk)?;
                self.accumulate_vec(grads, *v, dv)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total,
            } => {
                let vocab = self.value(*logits).last_dim();
                let scale = g.item() / *total;
                let mut dl = vec![T::zero(); probs.len()];
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let f = w * scale;
                    for c in 0..vocab {
                        dl[r * vocab + c] = f * probs[r * vocab + c];
                    }
                    dl[r * vocab + t] -= f;
                }
                self.accumulate_vec(grads, *logits, dl)?;
            }
            Op::Mse(a, b) => {
                let n = T::from_usize(self.value(*a).numel()).unwrap();
                let f = T::lit(2.0) * g.item() / n;
                let diff = self.value(*a).zip_map(self.value(*b), |x, y| (x - y) * f)?;
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, diff.scale(-T::one()));
                }
                self.accumulate(grads, *a, diff);
            }
            Op::CosineLoss { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.last_dim();
                let rows = av.rows();
                let f = -g.item() / T::from_usize(rows).unwrap();
                let mut da = vec![T::zero(); av.numel()];
                let mut db = vec![T::zero(); av.numel()];
                for r in 0..rows {
                    let (x, y) = (av.row(r), bv.row(r));
                    let nx = norm(x).max(cosine_eps());
                    let ny = norm(y).max(cosine_eps());
                    let cos = dot(x, y) / (nx * ny);
                    for c in 0..d {
                        da[r * d + c] = f * (y[c] / (nx * ny) - cos * x[c] / (nx * nx));
                        db[r * d + c] = f * (x[c] / (nx * ny) - cos * y[c] / (ny * ny));
                    }
                }
                self.accumulate_vec(grads, *a, da)?;
                self.accumulate_vec(grads, *b, db)?;
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let fill = g.item() / T::from_usize(n).unwrap();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), fill));
            }
            Op::StraightThrough(z) => {
                self.accumulate(grads, *z, g.clone());
            }
        }
        Ok(())
    }
}

fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).map(|(&a, &b)| a * b).sum()
}

fn norm<T: Scalar>(x: &[T]) -> T {
    dot(x, x).sqrt()
}

fn row_cosine<T: Scalar>(x: &[T], y: &[T]) -> T {
    dot(x, y) / (norm(x).max(cosine_eps()) * norm(y).max(cosine_eps()))
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_leaves: Vec<(u64, ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. any recorded node (None if unreached).
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Option<&Tensor<T>> {
        let tag = store.tag();
        self.param_leaves
            .iter()
            .find(|(t, pid, _)| *t == tag && *pid == id)
            .and_then(|(_, _, v)| self.of(*v))
    }

    /// Gradients aligned with `store`'s parameter order.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let tag = store.tag();
        let mut out: Vec<Option<Tensor<T>>> = (0..store.len()).map(|_| None).collect();
        for (t, id, v) in &self.param_leaves {
            if *t == tag {
                out[id.index()] = self.grads[v.0].clone();
            }
        }
        out
    }
}
