//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Nodes are
//! appended in evaluation order, so a reverse sweep over the node list is a
//! valid topological order for the backward pass.

use std::sync::Arc;

use super::kernels;
use super::mask::AttentionMask;
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};
use super::SubstrateError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        means: Vec<S>,
        rstds: Vec<S>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Arc<AttentionMask>,
        probs: Vec<S>,
    },
    GroupedLinear {
        x: Var,
        groups: Arc<[usize]>,
        weights: Vec<Var>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    SliceRows(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    ScatterRows(Var, Arc<[usize]>),
    Sum(Var),
    Mean(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Single-owner recording of one forward pass.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> SubstrateError {
    SubstrateError::ShapeMismatch(msg)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
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

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.nodes[v.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, SubstrateError> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), SubstrateError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "{}: {:?} vs {:?}",
                what,
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, SubstrateError> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, SubstrateError> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, SubstrateError> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x[n, d] + b[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, SubstrateError> {
        let (n, d) = self.value(x).dims2();
        if self.value(b).len() != d {
            return Err(shape_err(format!(
                "add_row: {:?} + {:?}",
                self.value(x).shape(),
                self.value(b).shape()
            )));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for r in 0..n {
            for c in 0..d {
                out.data_mut()[r * d + c] = out.data()[r * d + c] + bv[c];
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = S::from_f64(c).unwrap();
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = S::from_f64(c).unwrap();
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(S::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, SubstrateError> {
        let (_, d) = self.value(x).dims2();
        if d == 0 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err(format!(
                "layer_norm: x {:?}, gain {:?}, bias {:?}",
                self.value(x).shape(),
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let (out, means, rstds) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            d,
        );
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            },
            rg,
        ))
    }

    /// Multi-head masked attention; `q: [n, d]`, `k, v: [m, d]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Arc<AttentionMask>,
    ) -> Result<Var, SubstrateError> {
        let (n, d) = self.value(q).dims2();
        let (m, dk) = self.value(k).dims2();
        let (mv, dv) = self.value(v).dims2();
        if dk != d || dv != d || mv != m || heads == 0 || d % heads != 0 {
            return Err(shape_err(format!(
                "attention: q {:?}, k {:?}, v {:?}, heads {}",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape(),
                heads
            )));
        }
        if mask.rows() != n || mask.cols() != m {
            return Err(shape_err(format!(
                "attention mask {}x{} for {} queries and {} keys",
                mask.rows(),
                mask.cols(),
                n,
                m
            )));
        }
        mask.validate()?;
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            n,
            d,
            heads,
            &mask,
        );
        let out = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
            rg,
        ))
    }

    /// Row `i` of the output is `x[i] · weights[groups[i]]`.
    pub fn grouped_linear(
        &mut self,
        x: Var,
        groups: Arc<[usize]>,
        weights: &[Var],
    ) -> Result<Var, SubstrateError> {
        let (n, d_in) = self.value(x).dims2();
        if groups.len() != n {
            return Err(shape_err(format!(
                "grouped_linear: {} rows, {} group tags",
                n,
                groups.len()
            )));
        }
        let d_out = match weights.first() {
            Some(w) => self.value(*w).dims2().1,
            None => return Err(shape_err("grouped_linear: no weights".into())),
        };
        for w in weights {
            if self.value(*w).dims2() != (d_in, d_out) {
                return Err(shape_err(format!(
                    "grouped_linear: weight {:?} for input width {}",
                    self.value(*w).shape(),
                    d_in
                )));
            }
        }
        if let Some(&g) = groups.iter().find(|&&g| g >= weights.len()) {
            return Err(shape_err(format!("grouped_linear: group {} has no weight", g)));
        }
        let mut out = vec![S::zero(); n * d_out];
        let xv = self.value(x).data();
        for (g, w) in weights.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&r| groups[r] == g).collect();
            if rows.is_empty() {
                continue;
            }
            let wv = self.value(*w).data();
            for_each_run(&rows, |start, len| {
                gemm_nn(
                    len,
                    d_in,
                    d_out,
                    &xv[start * d_in..(start + len) * d_in],
                    wv,
                    &mut out[start * d_out..(start + len) * d_out],
                    false,
                );
            });
        }
        let out = Tensor::new(vec![n, d_out], out)?;
        let rg = self.rg(x) || weights.iter().any(|w| self.rg(*w));
        Ok(self.push(
            out,
            Op::GroupedLinear {
                x,
                groups,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, SubstrateError> {
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, SubstrateError> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, SubstrateError> {
        let (n, _) = self.value(x).dims2();
        if start + len > n {
            return Err(shape_err(format!(
                "slice_rows {}..{} of {} rows",
                start,
                start + len,
                n
            )));
        }
        let out = self.value(x).rows(start, len);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var, SubstrateError> {
        let (n, _) = self.value(x).dims2();
        if idx.iter().any(|&i| i >= n) {
            return Err(shape_err(format!("gather_rows: index out of {} rows", n)));
        }
        let out = self.value(x).gather_rows(&idx);
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, idx), rg))
    }

    /// Output has `rows` rows; row `idx[i]` receives `x[i]`, every other row is zero.
    pub fn scatter_rows(
        &mut self,
        x: Var,
        idx: Arc<[usize]>,
        rows: usize,
    ) -> Result<Var, SubstrateError> {
        let (n, d) = self.value(x).dims2();
        if idx.len() != n || idx.iter().any(|&i| i >= rows) {
            return Err(shape_err(format!(
                "scatter_rows: {} source rows into {} rows",
                n, rows
            )));
        }
        let mut out = Tensor::zeros(&[rows, d]);
        let xv = self.value(x).data();
        for (i, &r) in idx.iter().enumerate() {
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::ScatterRows(x, idx), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = S::from_usize(self.value(x).len().max(1)).unwrap();
        let out = Tensor::scalar(self.value(x).sum() / n);
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mean squared difference, a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, SubstrateError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Gradient of the last [`backward`](Self::backward) root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).unwrap())
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<(), SubstrateError> {
        if self.value(root).len() != 1 {
            return Err(shape_err(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        if !self.value(root).all_finite() {
            return Err(SubstrateError::NonFiniteValue("backward root".into()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one()]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<S>>], v: Var, delta: Vec<S>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        if !self.rg(v) {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); len]);
        f(slot);
    }

    fn backprop_node(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let (_, n) = self.value(*b).dims2();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc_with(grads, *a, |da| gemm_nt(m, n, k, g, bv, da, true));
                self.acc_with(grads, *b, |db| gemm_tn(k, m, n, av, g, db, true));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if a == b {
                    let two = S::one() + S::one();
                    self.acc(grads, *a, g.iter().zip(av).map(|(&g, &x)| two * g * x).collect());
                } else {
                    self.acc(grads, *a, g.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                    self.acc(grads, *b, g.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, g.to_vec());
                let d = self.value(*b).len();
                self.acc_with(grads, *b, |db| {
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % d] = db[i % d] + gv;
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, g.iter().map(|&v| v * *c).collect());
            }
            Op::AddScalar(x) => self.acc(grads, *x, g.to_vec()),
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(&g, &x)| g * kernels::gelu_grad(x)).collect(),
                );
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                        .collect(),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            } => {
                let d = self.value(*gain).len();
                let mut dgain = vec![S::zero(); d];
                let mut dbias = vec![S::zero(); d];
                let dx = kernels::layer_norm_backward(
                    self.value(*x).data(),
                    self.value(*gain).data(),
                    means,
                    rstds,
                    g,
                    d,
                    &mut dgain,
                    &mut dbias,
                );
                self.acc(grads, *x, dx);
                self.acc(grads, *gain, dgain);
                self.acc(grads, *bias, dbias);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => {
                let (n, d) = self.value(*q).dims2();
                let (m, _) = self.value(*k).dims2();
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    n,
                    m,
                    d,
                    *heads,
                    mask,
                );
                self.acc(grads, *q, dq);
                self.acc(grads, *k, dk);
                self.acc(grads, *v, dv);
            }
            Op::GroupedLinear { x, groups, weights } => {
                let (n, d_in) = self.value(*x).dims2();
                let d_out = g.len() / n.max(1);
                let xv = self.value(*x).data();
                for (gi, w) in weights.iter().enumerate() {
                    let rows: Vec<usize> = (0..n).filter(|&r| groups[r] == gi).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let wv = self.value(*w).data();
                    self.acc_with(grads, *x, |dx| {
                        for_each_run(&rows, |start, len| {
                            gemm_nt(
                                len,
                                d_out,
                                d_in,
                                &g[start * d_out..(start + len) * d_out],
                                wv,
                                &mut dx[start * d_in..(start + len) * d_in],
                                true,
                            );
                        });
                    });
                    self.acc_with(grads, *w, |dw| {
                        for_each_run(&rows, |start, len| {
                            gemm_tn(
                                d_in,
                                len,
                                d_out,
                                &xv[start * d_in..(start + len) * d_in],
                                &g[start * d_out..(start + len) * d_out],
                                dw,
                                true,
                            );
                        });
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.acc(grads, *p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::SliceRows(x, start) => {
                let (_, d) = self.value(*x).dims2();
                let start = *start;
                self.acc_with(grads, *x, |dx| {
                    for (i, &gv) in g.iter().enumerate() {
                        dx[start * d + i] = dx[start * d + i] + gv;
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let (_, d) = self.value(*x).dims2();
                self.acc_with(grads, *x, |dx| {
                    for (i, &r) in idx.iter().enumerate() {
                        for c in 0..d {
                            dx[r * d + c] = dx[r * d + c] + g[i * d + c];
                        }
                    }
                });
            }
            Op::ScatterRows(x, idx) => {
                let (_, d) = self.value(*x).dims2();
                let mut dx = vec![S::zero(); idx.len() * d];
                for (i, &r) in idx.iter().enumerate() {
                    dx[i * d..(i + 1) * d].copy_from_slice(&g[r * d..(r + 1) * d]);
                }
                self.acc(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let gv = g[0] / S::from_usize(n.max(1)).unwrap();
                self.acc(grads, *x, vec![gv; n]);
            }
        }
    }
}

/// Calls `f(start, len)` for each maximal run of consecutive indices.
fn for_each_run(rows: &[usize], mut f: impl FnMut(usize, usize)) {
    let mut i = 0;
    while i < rows.len() {
        let start = rows[i];
        let mut len = 1;
        while i + len < rows.len() && rows[i + len] == start + len {
            len += 1;
        }
        f(start, len);
        i += len;
    }
}
