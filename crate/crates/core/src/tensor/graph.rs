use std::sync::Arc;

use super::kernels::{self, AttnDims};
use super::{Float, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<T>,
    },
    Rope {
        x: Var,
        cos: Arc<Vec<T>>,
        sin: Arc<Vec<T>>,
        heads: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        mask: Option<Arc<Vec<bool>>>,
        lse: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations supporting one reverse pass.
///
/// Nodes are appended in evaluation order, so the node index is a valid
/// topological order and the reverse pass simply walks it backwards.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    exhausted: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            exhausted: false,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `x · weight + bias` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight);
        let k = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != k {
            return Err(mismatch("linear", &sx, sw));
        }
        let n = sw[1];
        if let Some(b) = bias {
            if self.value(b).numel() != n {
                return Err(mismatch("linear bias", self.shape(weight), self.shape(b)));
            }
        }
        let rows = self.value(x).rows();
        let mut out = vec![T::zero(); rows * n];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for r in 0..rows {
                out[r * n..(r + 1) * n].copy_from_slice(bd);
            }
        }
        kernels::matmul_nn(self.value(x).data(), self.value(weight).data(), &mut out, rows, k, n);
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Linear {
                x,
                w: weight,
                b: bias,
                rows,
                k,
                n,
            },
            rg,
        ))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op_name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let c = self.value(x).cols();
        if self.value(row).numel() != c {
            return Err(mismatch("add_row", self.shape(x), self.shape(row)));
        }
        let rd = self.value(row).data().to_vec();
        let mut value = self.value(x).clone();
        for chunk in value.data_mut().chunks_mut(c) {
            for (o, &r) in chunk.iter_mut().zip(&rd) {
                *o += r;
            }
        }
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Silu(x), rg)
    }

    /// Softmax over the last axis with max subtraction. NaN inputs propagate.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = softmax_lastdim(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Normalizes each last-axis slice to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let cf = T::from_usize(c).unwrap();
        let mut out = xv.data().to_vec();
        let mut rstd = Vec::with_capacity(xv.rows());
        for row in out.chunks_mut(c) {
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::LayerNorm { x, rstd }, rg)
    }

    /// Rotates consecutive channel pairs of every head by per-token angles.
    ///
    /// `cos` and `sin` are `rows × head_dim/2` tables shared by all heads.
    pub fn rope(
        &mut self,
        x: Var,
        cos: Arc<Vec<T>>,
        sin: Arc<Vec<T>>,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        if heads == 0 || d % heads != 0 || !(d / heads).is_multiple_of(2) {
            return Err(TensorError::Invalid {
                op: "rope",
                msg: format!("channel count {d} cannot form rotary pairs over {heads} heads"),
            });
        }
        let half = d / heads / 2;
        if cos.len() != rows * half || sin.len() != rows * half {
            return Err(TensorError::Invalid {
                op: "rope",
                msg: format!("angle table has {} entries, expected {}", cos.len(), rows * half),
            });
        }
        let mut out = xv.data().to_vec();
        rotate_pairs(&mut out, &cos, &sin, rows, d, heads, false);
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Rope { x, cos, sin, heads }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(mismatch("concat_rows", self.shape(parts[0]), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new([rows, c], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let value = self.value(x).slice_rows(start, len)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Multi-head scaled dot-product attention `softmax(q kᵀ / √d_head) v`.
    ///
    /// `key_mask[j] == false` removes key `j` (logit −∞). Memory use is linear
    /// in the token count; probabilities are recomputed in the reverse pass.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<Arc<Vec<bool>>>,
    ) -> Result<Var, TensorError> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] || sk != sv {
            return Err(mismatch("attention", sq, sk));
        }
        let dims = AttnDims {
            nq: sq[0],
            nk: sk[0],
            d: sq[1],
            heads,
        };
        if heads == 0 || !dims.d.is_multiple_of(heads) {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("{} channels not divisible by {heads} heads", dims.d),
            });
        }
        if let Some(m) = &key_mask {
            if m.len() != dims.nk {
                return Err(TensorError::Invalid {
                    op: "attention",
                    msg: format!("mask length {} for {} keys", m.len(), dims.nk),
                });
            }
        }
        let (out, lse) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dims,
            key_mask.as_deref().map(|m| m.as_slice()),
        );
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            Tensor::new([dims.nq, dims.d], out)?,
            Op::Attention {
                q,
                k,
                v,
                dims,
                mask: key_mask,
                lse,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        if self.shape(pred) != self.shape(target) {
            return Err(mismatch("mse", self.shape(pred), self.shape(target)));
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let s = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>()
            / T::from_usize(p.len()).unwrap();
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target), rg))
    }

    /// Reverse pass from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.exhausted {
            return Err(TensorError::GraphExhausted);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.exhausted = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let numel = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); numel]))
    }

    fn backprop_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    kernels::matmul_nt(gy, val(*b), ga, *m, *n, *k);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    kernels::matmul_tn(val(*a), gy, gb, *m, *k, *n);
                }
            }
            Op::Linear { x, w, b, rows, k, n } => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    kernels::matmul_nt(gy, val(*w), gx, *rows, *n, *k);
                }
                if let Some(gw) = self.grad_buf(grads, *w) {
                    kernels::matmul_tn(val(*x), gy, gw, *rows, *k, *n);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.grad_buf(grads, *b) {
                        for row in gy.chunks(*n) {
                            for (g, &d) in gb.iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.grad_buf(grads, v) {
                        kernels::axpy(T::one(), gy, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.grad_buf(grads, *a) {
                    kernels::axpy(T::one(), gy, g);
                }
                if let Some(g) = self.grad_buf(grads, *b) {
                    kernels::axpy(-T::one(), gy, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
                if let Some(g) = self.grad_buf(grads, *a) {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(&bv) {
                        *g += d * o;
                    }
                }
                if let Some(g) = self.grad_buf(grads, *b) {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(&av) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(g) = self.grad_buf(grads, *x) {
                    kernels::axpy(*s, gy, g);
                }
            }
            Op::AddRow(x, row) => {
                if let Some(g) = self.grad_buf(grads, *x) {
                    kernels::axpy(T::one(), gy, g);
                }
                let c = node.value.cols();
                if let Some(g) = self.grad_buf(grads, *row) {
                    for chunk in gy.chunks(c) {
                        kernels::axpy(T::one(), chunk, g);
                    }
                }
            }
            Op::Silu(x) => {
                let xv = val(*x).to_vec();
                if let Some(g) = self.grad_buf(grads, *x) {
                    for ((g, &d), &v) in g.iter_mut().zip(gy).zip(&xv) {
                        let s = T::one() / (T::one() + (-v).exp());
                        *g += d * s * (T::one() + v * (T::one() - s));
                    }
                }
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                let y = node.value.data();
                if let Some(g) = self.grad_buf(grads, *x) {
                    for ((gr, dr), yr) in g.chunks_mut(c).zip(gy.chunks(c)).zip(y.chunks(c)) {
                        let dotp = kernels::dot(dr, yr);
                        for ((g, &d), &yv) in gr.iter_mut().zip(dr).zip(yr) {
                            *g += yv * (d - dotp);
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let c = node.value.cols();
                let cf = T::from_usize(c).unwrap();
                let y = node.value.data();
                if let Some(g) = self.grad_buf(grads, *x) {
                    for (r, ((gr, dr), yr)) in g
                        .chunks_mut(c)
                        .zip(gy.chunks(c))
                        .zip(y.chunks(c))
                        .enumerate()
                    {
                        let mean_d = dr.iter().copied().sum::<T>() / cf;
                        let mean_dy = kernels::dot(dr, yr) / cf;
                        for ((g, &d), &yv) in gr.iter_mut().zip(dr).zip(yr) {
                            *g += rstd[r] * (d - mean_d - yv * mean_dy);
                        }
                    }
                }
            }
            Op::Rope { x, cos, sin, heads } => {
                let (rows, d) = (node.value.rows(), node.value.cols());
                if let Some(g) = self.grad_buf(grads, *x) {
                    let mut back = gy.to_vec();
                    rotate_pairs(&mut back, cos, sin, rows, d, *heads, true);
                    kernels::axpy(T::one(), &back, g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if let Some(g) = self.grad_buf(grads, p) {
                        kernels::axpy(T::one(), &gy[offset..offset + len], g);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                if let Some(g) = self.grad_buf(grads, *x) {
                    let off = start * c;
                    kernels::axpy(T::one(), gy, &mut g[off..off + gy.len()]);
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.grad_buf(grads, *x) {
                    kernels::axpy(T::one(), gy, g);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                mask,
                lse,
            } => {
                // Gradients land in scratch buffers first because q, k, v may alias.
                let want = |x: Var| self.nodes[x.0].requires_grad;
                let mut dq = want(*q).then(|| vec![T::zero(); val(*q).len()]);
                let mut dk = want(*k).then(|| vec![T::zero(); val(*k).len()]);
                let mut dv = want(*v).then(|| vec![T::zero(); val(*v).len()]);
                kernels::attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    node.value.data(),
                    lse,
                    gy,
                    *dims,
                    mask.as_deref().map(|m| m.as_slice()),
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (x, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let (Some(d), Some(g)) = (d, self.grad_buf(grads, x)) {
                        kernels::axpy(T::one(), &d, g);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.grad_buf(grads, *x) {
                    for v in g.iter_mut() {
                        *v += gy[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.nodes[x.0].value.numel()).unwrap();
                if let Some(g) = self.grad_buf(grads, *x) {
                    for v in g.iter_mut() {
                        *v += gy[0] / n;
                    }
                }
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (val(*p).to_vec(), val(*t).to_vec());
                let n = T::from_usize(pv.len()).unwrap();
                let two = T::from_f64c(2.0);
                if let Some(g) = self.grad_buf(grads, *p) {
                    for ((g, &a), &b) in g.iter_mut().zip(&pv).zip(&tv) {
                        *g += gy[0] * two * (a - b) / n;
                    }
                }
                if let Some(g) = self.grad_buf(grads, *t) {
                    for ((g, &a), &b) in g.iter_mut().zip(&pv).zip(&tv) {
                        *g -= gy[0] * two * (a - b) / n;
                    }
                }
            }
        }
    }
}

/// Softmax over the last axis of `x` with max subtraction.
pub fn softmax_lastdim<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.cols();
    let mut out = x.data().to_vec();
    if c > 0 {
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn rotate_pairs<T: Float>(
    data: &mut [T],
    cos: &[T],
    sin: &[T],
    rows: usize,
    d: usize,
    heads: usize,
    inverse: bool,
) {
    let dh = d / heads;
    let half = dh / 2;
    for r in 0..rows {
        for h in 0..heads {
            for j in 0..half {
                let c = cos[r * half + j];
                let s = if inverse { -sin[r * half + j] } else { sin[r * half + j] };
                let idx = r * d + h * dh + 2 * j;
                let (a, b) = (data[idx], data[idx + 1]);
                data[idx] = a * c - b * s;
                data[idx + 1] = a * s + b * c;
            }
        }
    }
}
