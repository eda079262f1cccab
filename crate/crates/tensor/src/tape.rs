use std::sync::Arc;

use crate::nn::{AttentionCache, ConvCache};
use crate::{Element, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    StopGradient,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    MulRow {
        x: Var,
        scale: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        active: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Cosine {
        a: Var,
        b: Var,
        valid: Vec<bool>,
        eps: T,
        count: usize,
    },
    Attention(Box<AttentionCache<T>>),
    Conv2d(Box<ConvCache>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Arc<Tensor<T>>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Ordered record of executed primitives.
///
/// Values are computed eagerly when a primitive is called; the tape keeps
/// them alive together with whatever the adjoint needs. `backward` walks the
/// record once in reverse execution order.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// Tape that never records adjoint state; used for inference.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
            backward_done: false,
        }
    }

    pub fn set_grad_enabled(&mut self, enabled: bool) {
        self.grad_enabled = enabled;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input value.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Records an input value without copying it.
    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: requires_grad && self.grad_enabled,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    ///
    /// `None` when `v` does not participate in differentiation; zeros when it
    /// does but the loss did not depend on it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match &node.grad {
            Some(g) => Tensor::from_vec(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        })
    }

    /// Moves the gradient buffer out of the tape.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            node.grad
                .take()
                .unwrap_or_else(|| vec![T::zero(); node.value.len()]),
        )
    }

    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Mutable gradient buffer of `v`, allocated on first use. `None` when
    /// `v` does not require a gradient.
    pub(crate) fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<T>> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(node.grad.get_or_insert_with(|| vec![T::zero(); n]))
    }

    pub(crate) fn accumulate(&mut self, v: Var, delta: &[T]) {
        if let Some(buf) = self.grad_buf(v) {
            for (g, &d) in buf.iter_mut().zip(delta) {
                *g = *g + d;
            }
        }
    }

    /// Propagates d`loss`/d(every recorded value).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.shape(loss).to_vec();
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            let grad = self.nodes[idx].grad.take().expect("checked above");
            self.backward_op(idx, &op, &grad);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    fn backward_op(&mut self, idx: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul { a, b } => {
                let av = self.shared_value(*a);
                let bv = self.shared_value(*b);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if let Some(ga) = self.grad_buf(*a) {
                    // dA += dC · Bᵀ
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        n as isize,
                        1,
                        bv.data(),
                        1,
                        n as isize,
                        T::one(),
                        ga,
                        k as isize,
                        1,
                    );
                }
                if let Some(gb) = self.grad_buf(*b) {
                    // dB += Aᵀ · dC
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        T::one(),
                        gb,
                        n as isize,
                        1,
                    );
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::AddRow { x, bias } => {
                self.accumulate(*x, g);
                if let Some(gb) = self.grad_buf(*bias) {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                }
            }
            Op::MulRow { x, scale } => {
                let (x, scale) = (*x, *scale);
                let vs = self.shared_value(scale);
                let d = vs.len();
                if let Some(gx) = self.grad_buf(x) {
                    for (acc, gr) in gx.chunks_mut(d).zip(g.chunks(d)) {
                        for ((a, &v), &m) in acc.iter_mut().zip(gr).zip(vs.data()) {
                            *a = *a + v * m;
                        }
                    }
                }
                let vx = self.shared_value(x);
                if let Some(gs) = self.grad_buf(scale) {
                    for (xr, gr) in vx.data().chunks(d).zip(g.chunks(d)) {
                        for ((a, &xv), &v) in gs.iter_mut().zip(xr).zip(gr) {
                            *a = *a + xv * v;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                if let Some(gx) = self.grad_buf(*x) {
                    for (acc, &v) in gx.iter_mut().zip(g) {
                        *acc = *acc + f * v;
                    }
                }
            }
            Op::Relu { x } => {
                let out = self.shared_value(Var(idx));
                if let Some(gx) = self.grad_buf(*x) {
                    for ((acc, &v), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                        if y > T::zero() {
                            *acc = *acc + v;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                let g0 = g[0];
                if let Some(gx) = self.grad_buf(*x) {
                    for acc in gx.iter_mut() {
                        *acc = *acc + g0;
                    }
                }
            }
            Op::Reshape { x } => self.accumulate(*x, g),
            Op::GatherRows { x, index } => {
                let d = self.value(*x).cols();
                if let Some(gx) = self.grad_buf(*x) {
                    for (out_row, &src) in index.iter().enumerate() {
                        for c in 0..d {
                            gx[src * d + c] = gx[src * d + c] + g[out_row * d + c];
                        }
                    }
                }
            }
            Op::Softmax { x } => self.softmax_backward(idx, *x, g),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => self.layer_norm_backward(*x, *gamma, *beta, xhat, rstd, g),
            Op::CrossEntropy {
                logits,
                targets,
                active,
                probs,
                count,
            } => self.cross_entropy_backward(*logits, targets, active, probs, *count, g[0]),
            Op::Cosine {
                a,
                b,
                valid,
                eps,
                count,
            } => self.cosine_backward(*a, *b, valid, *eps, *count, g[0]),
            Op::Attention(cache) => self.attention_backward(cache, g),
            Op::Conv2d(cache) => self.conv2d_backward(cache, g),
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                if let Some(gt) = self.grad_buf(*table) {
                    for (row, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] = gt[id * d + c] + g[row * d + c];
                        }
                    }
                }
            }
        }
    }

    // ---- elementwise and linear-algebra primitives ----

    /// Forward identity whose adjoint is zero.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.shared_value(x);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: false,
            op: Op::StopGradient,
        });
        Var(self.nodes.len() - 1)
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::shape("add", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a length-`d` vector to every row of `x[...×d]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.len() != vx.cols() {
            return Err(TensorError::shape("add_row", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        let d = vb.len();
        for row in data.chunks_mut(d) {
            for (v, &b) in row.iter_mut().zip(vb.data()) {
                *v = *v + b;
            }
        }
        let value = Tensor::from_vec(vx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow { x, bias }, &[x, bias]))
    }

    /// Multiplies every row of `x[...×d]` element-wise by a length-`d` vector.
    pub fn mul_row(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(scale));
        if vs.len() != vx.cols() {
            return Err(TensorError::shape("mul_row", vx.shape(), vs.shape()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(vs.len()) {
            for (v, &m) in row.iter_mut().zip(vs.data()) {
                *v = *v * m;
            }
        }
        let value = Tensor::from_vec(vx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulRow { x, scale }, &[x, scale]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// `Σ wᵢ·xᵢ` over scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let scaled = self.scale(v, w);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| TensorError::invalid("weighted_sum", "no terms"))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Row selection: `out[i] = x[index[i]]` over the trailing axis.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (rows, d) = (vx.rows(), vx.cols());
        if index.is_empty() {
            return Err(TensorError::invalid("gather_rows", "empty index"));
        }
        let mut data = Vec::with_capacity(index.len() * d);
        for &r in index {
            if r >= rows {
                return Err(TensorError::invalid(
                    "gather_rows",
                    format!("row {r} out of range for {rows} rows"),
                ));
            }
            data.extend_from_slice(vx.row(r));
        }
        let value = Tensor::from_vec(vec![index.len(), d], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }
}
