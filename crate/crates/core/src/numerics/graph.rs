//! Dynamic computation tape with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so a reverse sweep over the node list is a
//! valid topological order: every node is visited exactly once and gradients from
//! fan-out are summed before a node propagates them further.

use super::kernels::{self, AttnDims};
use super::tensor::{gemm, MatLayout, Scalar, Tensor, MAX_RANK};
use crate::error::{GidError, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, shared: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    GroupedLinear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<S> },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<S> },
    Permute { a: Var, perm: Vec<usize> },
    Reshape(Var),
    Expand { a: Var, map: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Mae { a: Var, b: Var },
    AxisAngle(Var),
    Fk { local: Var, parents: Vec<Option<usize>>, offsets: Vec<[f64; 3]> },
    Geodesic { a: Var, target: Tensor<S> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// A single-threaded computation tape.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf: gradients are tracked for it.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(GidError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ----- linear algebra -------------------------------------------------

    /// `a[.., m, k] · b[k, n]` (shared right operand) or `a[.., m, k] · b[.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(GidError::shape("matmul", &sa, &sb));
        }
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let shared = sb.len() == 2;
        if sb[sb.len() - 2] != k || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(GidError::shape("matmul", &sa, &sb));
        }
        let n = sb[sb.len() - 1];
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&out_shape);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared {
                let rows = av.len() / k.max(1);
                gemm(
                    rows,
                    k,
                    n,
                    S::one(),
                    av,
                    MatLayout::row_major(0, k),
                    bv,
                    MatLayout::row_major(0, n),
                    false,
                    out.data_mut(),
                    MatLayout::row_major(0, n),
                );
            } else {
                let batch: usize = sa[..sa.len() - 2].iter().product();
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        S::one(),
                        av,
                        MatLayout::row_major(i * m * k, k),
                        bv,
                        MatLayout::row_major(i * k * n, n),
                        false,
                        out.data_mut(),
                        MatLayout::row_major(i * m * n, n),
                    );
                }
            }
        }
        Ok(self.push(out, Op::MatMul { a, b, shared }, &[a, b]))
    }

    /// `x[.., k] · w[k, n] + b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(GidError::shape("linear", &sx, &sw));
        }
        let (k, n) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(GidError::shape("linear.bias", self.shape(b), &[n]));
            }
        }
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&out_shape);
        let rows = self.value(x).len() / k.max(1);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.data_mut().chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            rows,
            k,
            n,
            S::one(),
            self.value(x).data(),
            MatLayout::row_major(0, k),
            self.value(w).data(),
            MatLayout::row_major(0, n),
            b.is_some(),
            out.data_mut(),
            MatLayout::row_major(0, n),
        );
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// Independent linear maps per group: `x[.., G, k] · w[G, k, n] + b[G, n]`.
    pub fn grouped_linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 3 || sx.len() < 2 || sx[sx.len() - 2] != sw[0] || sx[sx.len() - 1] != sw[1] {
            return Err(GidError::shape("grouped_linear", &sx, &sw));
        }
        let (groups, k, n) = (sw[0], sw[1], sw[2]);
        if let Some(b) = b {
            if self.shape(b) != [groups, n] {
                return Err(GidError::shape("grouped_linear.bias", self.shape(b), &[groups, n]));
            }
        }
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&out_shape);
        let rows = self.value(x).len() / (groups * k).max(1);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.data_mut().chunks_mut(groups * n) {
                row.copy_from_slice(bv);
            }
        }
        for gi in 0..groups {
            gemm(
                rows,
                k,
                n,
                S::one(),
                self.value(x).data(),
                MatLayout {
                    offset: gi * k,
                    rs: groups * k,
                    cs: 1,
                },
                self.value(w).data(),
                MatLayout::row_major(gi * k * n, n),
                b.is_some(),
                out.data_mut(),
                MatLayout {
                    offset: gi * n,
                    rs: groups * n,
                    cs: 1,
                },
            );
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::GroupedLinear { x, w, b }, &inputs))
    }

    // ----- elementwise ----------------------------------------------------

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let (_, cols) = out.rows_cols();
        kernels::softmax_rows(out.data_mut(), cols);
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let cols = *sx.last().unwrap_or(&0);
        if cols < 2 {
            return Err(GidError::shape("layer_norm", &sx, &[2]));
        }
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(GidError::shape("layer_norm.affine", self.shape(gain), &[cols]));
        }
        let (out, stats) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            cols,
            S::lit(eps),
        );
        let out = Tensor::new(&sx, out)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, stats }, &[x, gain, bias]))
    }

    /// Scaled dot-product attention on `[A, L, B, D]` tensors, along `L`, split into
    /// `heads` along `D`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 4 {
            return Err(GidError::shape("attention", &s, &[0, 0, 0, 0]));
        }
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        if heads == 0 || s[3] % heads != 0 {
            return Err(GidError::Config(format!(
                "model dim {} not divisible by {heads} heads",
                s[3]
            )));
        }
        let dims = AttnDims {
            outer: s[0],
            seq: s[1],
            inner: s[2],
            dim: s[3],
            heads,
            causal,
        };
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dims,
        );
        let out = Tensor::new(&s, out)?;
        Ok(self.push(out, Op::Attention { q, k, v, dims, probs }, &[q, k, v]))
    }

    /// Attention probabilities recorded by an attention node, `[groups, L, L]` flattened.
    pub fn attention_probs(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ----- shape manipulation --------------------------------------------

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if perm.len() != s.len() || seen != (0..s.len()).collect::<Vec<_>>() {
            return Err(GidError::shape("permute", &s, perm));
        }
        let (data, shape) = kernels::permute(self.value(a).data(), &s, perm);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Broadcast `a` to `shape`; `a`'s shape is right-aligned and each axis must be
    /// equal to the target or 1.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() > shape.len() || shape.len() > MAX_RANK {
            return Err(GidError::shape("expand", &s, shape));
        }
        let pad = shape.len() - s.len();
        for (i, &d) in s.iter().enumerate() {
            if d != 1 && d != shape[pad + i] {
                return Err(GidError::shape("expand", &s, shape));
            }
        }
        let map = kernels::expand_index(&s, shape);
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Expand { a, map }, &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| GidError::InvalidInput("empty concat".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(GidError::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(GidError::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(GidError::shape("slice", &s, &[axis, start, len]));
        }
        let (outer, dim, inner) = self.value(a).split_at_axis(axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Slice { a, axis, start }, &[a]))
    }

    // ----- reductions and losses -----------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = S::lit(t.len().max(1) as f64);
        let s: S = t.data().iter().copied().sum::<S>() / n;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean absolute error between two tensors of identical shape.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mae", a, b)?;
        let n = self.value(a).len().max(1);
        let total: S = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let out = Tensor::scalar(total / S::lit(n as f64));
        Ok(self.push(out, Op::Mae { a, b }, &[a, b]))
    }

    // ----- rotation kernels ----------------------------------------------

    /// Rodrigues map from axis-angle vectors `[.., 3]` to row-major matrices `[.., 9]`.
    pub fn axis_angle_to_matrix(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.last() != Some(&3) {
            return Err(GidError::shape("axis_angle_to_matrix", &s, &[3]));
        }
        let data = kernels::axis_angle_forward(self.value(a).data());
        let mut shape = s;
        *shape.last_mut().unwrap() = 9;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::AxisAngle(a), &[a]))
    }

    /// Forward kinematics with the root pinned at the origin: local rotations
    /// `[.., J, 9]` → `[.., J, 12]` holding global rotation (9) and position (3).
    pub fn forward_kinematics(
        &mut self,
        local: Var,
        parents: &[Option<usize>],
        offsets: &[[f64; 3]],
    ) -> Result<Var> {
        let s = self.shape(local).to_vec();
        let j = parents.len();
        if s.len() < 2 || s[s.len() - 1] != 9 || s[s.len() - 2] != j || offsets.len() != j {
            return Err(GidError::shape("forward_kinematics", &s, &[j, 9]));
        }
        let data = kernels::fk_forward(self.value(local).data(), parents, offsets);
        let mut shape = s;
        *shape.last_mut().unwrap() = 12;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Fk {
                local,
                parents: parents.to_vec(),
                offsets: offsets.to_vec(),
            },
            &[local],
        ))
    }

    /// Mean geodesic angle (radians) between rotation-matrix rows of `a` and a constant
    /// target, both `[.., 9]`.
    pub fn geodesic_loss(&mut self, a: Var, target: Tensor<S>) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.last() != Some(&9) || target.shape() != s.as_slice() {
            return Err(GidError::shape("geodesic_loss", &s, target.shape()));
        }
        let angles = kernels::geodesic_rows(self.value(a).data(), target.data());
        let mean = angles.iter().sum::<f64>() / angles.len().max(1) as f64;
        Ok(self.push(Tensor::scalar(S::lit(mean)), Op::Geodesic { a, target }, &[a]))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        if self.value(loss).len() != 1 {
            return Err(GidError::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<S>>], v: Var) -> &'g mut Tensor<S> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, t: &Tensor<S>) {
        if self.wants(v) {
            self.slot(grads, v).add_assign(t);
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, shared } => {
                let sa = self.shape(*a);
                let m = sa[sa.len() - 2];
                let k = sa[sa.len() - 1];
                let sb = self.shape(*b);
                let n = sb[sb.len() - 1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let batch: usize = sa[..sa.len() - 2].iter().product();
                if self.wants(*a) {
                    let da = self.slot(grads, *a).data_mut();
                    if *shared {
                        let rows = batch * m;
                        gemm(
                            rows,
                            n,
                            k,
                            S::one(),
                            gd,
                            MatLayout::row_major(0, n),
                            bv,
                            MatLayout::row_major(0, n).t(),
                            true,
                            da,
                            MatLayout::row_major(0, k),
                        );
                    } else {
                        for bi in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                S::one(),
                                gd,
                                MatLayout::row_major(bi * m * n, n),
                                bv,
                                MatLayout::row_major(bi * k * n, n).t(),
                                true,
                                da,
                                MatLayout::row_major(bi * m * k, k),
                            );
                        }
                    }
                }
                if self.wants(*b) {
                    let db = self.slot(grads, *b).data_mut();
                    if *shared {
                        let rows = batch * m;
                        gemm(
                            k,
                            rows,
                            n,
                            S::one(),
                            av,
                            MatLayout::row_major(0, k).t(),
                            gd,
                            MatLayout::row_major(0, n),
                            true,
                            db,
                            MatLayout::row_major(0, n),
                        );
                    } else {
                        for bi in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                S::one(),
                                av,
                                MatLayout::row_major(bi * m * k, k).t(),
                                gd,
                                MatLayout::row_major(bi * m * n, n),
                                true,
                                db,
                                MatLayout::row_major(bi * k * n, n),
                            );
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (k, n) = (sw[0], sw[1]);
                let rows = gd.len() / n.max(1);
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    let dx = self.slot(grads, *x).data_mut();
                    gemm(
                        rows,
                        n,
                        k,
                        S::one(),
                        gd,
                        MatLayout::row_major(0, n),
                        wv,
                        MatLayout::row_major(0, n).t(),
                        true,
                        dx,
                        MatLayout::row_major(0, k),
                    );
                }
                if self.wants(*w) {
                    let xv = self.value(*x).data();
                    let dw = self.slot(grads, *w).data_mut();
                    gemm(
                        k,
                        rows,
                        n,
                        S::one(),
                        xv,
                        MatLayout::row_major(0, k).t(),
                        gd,
                        MatLayout::row_major(0, n),
                        true,
                        dw,
                        MatLayout::row_major(0, n),
                    );
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = self.slot(grads, *b).data_mut();
                        for row in gd.chunks(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::GroupedLinear { x, w, b } => {
                let sw = self.shape(*w);
                let (groups, k, n) = (sw[0], sw[1], sw[2]);
                let rows = gd.len() / (groups * n).max(1);
                let g_lay = |gi: usize| MatLayout {
                    offset: gi * n,
                    rs: groups * n,
                    cs: 1,
                };
                let x_lay = |gi: usize| MatLayout {
                    offset: gi * k,
                    rs: groups * k,
                    cs: 1,
                };
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    let dx = self.slot(grads, *x).data_mut();
                    for gi in 0..groups {
                        gemm(
                            rows,
                            n,
                            k,
                            S::one(),
                            gd,
                            g_lay(gi),
                            wv,
                            MatLayout::row_major(gi * k * n, n).t(),
                            true,
                            dx,
                            x_lay(gi),
                        );
                    }
                }
                if self.wants(*w) {
                    let xv = self.value(*x).data();
                    let dw = self.slot(grads, *w).data_mut();
                    for gi in 0..groups {
                        gemm(
                            k,
                            rows,
                            n,
                            S::one(),
                            xv,
                            x_lay(gi).t(),
                            gd,
                            g_lay(gi),
                            true,
                            dw,
                            MatLayout::row_major(gi * k * n, n),
                        );
                    }
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = self.slot(grads, *b).data_mut();
                        for row in gd.chunks(groups * n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                if self.wants(*b) {
                    let db = self.slot(grads, *b).data_mut();
                    for (d, &v) in db.iter_mut().zip(gd) {
                        *d -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(this) {
                        let ov = self.value(other).data();
                        let d = self.slot(grads, this).data_mut();
                        for ((d, &gv), &o) in d.iter_mut().zip(gd).zip(ov) {
                            *d += gv * o;
                        }
                    }
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    let d = self.slot(grads, *a).data_mut();
                    for (d, &gv) in d.iter_mut().zip(gd) {
                        *d += gv * *f;
                    }
                }
            }
            Op::Relu(a) => self.unary_backward(grads, *a, gd, |x, _| {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }),
            Op::Gelu(a) => self.unary_backward(grads, *a, gd, |x, _| kernels::gelu_grad(x)),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if self.wants(*a) {
                    let d = self.slot(grads, *a).data_mut();
                    for ((d, &gv), &yv) in d.iter_mut().zip(gd).zip(y) {
                        *d += gv * yv * (S::one() - yv);
                    }
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let (_, cols) = node.value.rows_cols();
                    let y = node.value.data();
                    let d = self.slot(grads, *a).data_mut();
                    kernels::softmax_rows_backward(y, gd, cols, d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let cols = *self.shape(*x).last().unwrap();
                let xv = self.value(*x).data().to_vec();
                let gv = self.value(*gain).data().to_vec();
                let mut dx = self.wants(*x).then(|| vec![S::zero(); xv.len()]);
                let mut dg = self.wants(*gain).then(|| vec![S::zero(); cols]);
                let mut db = self.wants(*bias).then(|| vec![S::zero(); cols]);
                kernels::layer_norm_backward(
                    &xv,
                    &gv,
                    stats,
                    gd,
                    cols,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, d) in [(*x, dx), (*gain, dg), (*bias, db)] {
                    if let Some(d) = d {
                        let t = Tensor::new(self.shape(v), d).expect("grad shape");
                        self.accumulate(grads, v, &t);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            } => {
                let len = gd.len();
                let mut dq = vec![S::zero(); len];
                let mut dk = vec![S::zero(); len];
                let mut dv = vec![S::zero(); len];
                kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    gd,
                    *dims,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                let shape = g.shape().to_vec();
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    let t = Tensor::new(&shape, d).expect("grad shape");
                    self.accumulate(grads, var, &t);
                }
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (data, shape) = kernels::permute(gd, g.shape(), &inv);
                let t = Tensor::new(&shape, data).expect("grad shape");
                self.accumulate(grads, *a, &t);
            }
            Op::Reshape(a) => {
                let t = g.clone().reshape(self.shape(*a)).expect("grad shape");
                self.accumulate(grads, *a, &t);
            }
            Op::Expand { a, map } => {
                if self.wants(*a) {
                    let d = self.slot(grads, *a).data_mut();
                    for (&src, &gv) in map.iter().zip(gd) {
                        d[src] += gv;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = g.split_at_axis(*axis);
                let mut offset = 0;
                for &p in parts {
                    let width = self.shape(p)[*axis];
                    if self.wants(p) {
                        let d = self.slot(grads, p).data_mut();
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * width * inner;
                            for (dd, &gv) in d[dst..dst + width * inner]
                                .iter_mut()
                                .zip(&gd[src..src + width * inner])
                            {
                                *dd += gv;
                            }
                        }
                    }
                    offset += width;
                }
            }
            Op::Slice { a, axis, start } => {
                if self.wants(*a) {
                    let (outer, dim, inner) = self.value(*a).split_at_axis(*axis);
                    let len = g.shape()[*axis];
                    let d = self.slot(grads, *a).data_mut();
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        let src = o * len * inner;
                        for (dd, &gv) in d[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&gd[src..src + len * inner])
                        {
                            *dd += gv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let d = self.slot(grads, *a).data_mut();
                    for dd in d.iter_mut() {
                        *dd += gd[0];
                    }
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let n = S::lit(self.value(*a).len().max(1) as f64);
                    let d = self.slot(grads, *a).data_mut();
                    for dd in d.iter_mut() {
                        *dd += gd[0] / n;
                    }
                }
            }
            Op::Mae { a, b } => {
                let n = S::lit(self.value(*a).len().max(1) as f64);
                let scale = gd[0] / n;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let sign = |x: S, y: S| {
                    if x > y {
                        scale
                    } else if x < y {
                        -scale
                    } else {
                        S::zero()
                    }
                };
                if self.wants(*a) {
                    let d = self.slot(grads, *a).data_mut();
                    for ((dd, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *dd += sign(x, y);
                    }
                }
                if self.wants(*b) {
                    let d = self.slot(grads, *b).data_mut();
                    for ((dd, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *dd -= sign(x, y);
                    }
                }
            }
            Op::AxisAngle(a) => {
                if self.wants(*a) {
                    let av = self.value(*a).data();
                    let d = self.slot(grads, *a).data_mut();
                    kernels::axis_angle_backward(av, gd, d);
                }
            }
            Op::Fk {
                local,
                parents,
                offsets,
            } => {
                if self.wants(*local) {
                    let lv = self.value(*local).data();
                    let out = node.value.data();
                    let d = self.slot(grads, *local).data_mut();
                    kernels::fk_backward(lv, out, gd, parents, offsets, d);
                }
            }
            Op::Geodesic { a, target } => {
                if self.wants(*a) {
                    let rows = self.value(*a).len() / 9;
                    let scale = gd[0].as_f64() / rows.max(1) as f64;
                    let av = self.value(*a).data();
                    let d = self.slot(grads, *a).data_mut();
                    kernels::geodesic_backward(av, target.data(), scale, d);
                }
            }
        }
    }

    fn unary_backward(
        &self,
        grads: &mut [Option<Tensor<S>>],
        a: Var,
        gd: &[S],
        deriv: impl Fn(S, S) -> S,
    ) {
        if !self.wants(a) {
            return;
        }
        let av = self.value(a).data();
        let d = self.slot(grads, a).data_mut();
        for ((dd, &gv), &x) in d.iter_mut().zip(gd).zip(av) {
            *dd += gv * deriv(x, gv);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[1., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 2], &[1., -2., 0.5, 4., 9., 3.]));
        let i = g.constant(Tensor::eye(3));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, GidError::Shape { .. }));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[0., 0.]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(t(&[1, 2], &[1000., 0.]));
        let y = g.softmax(x);
        let d = g.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300);
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::<f64>::new();
        let gain = g.constant(t(&[2], &[1., 1.]));
        let bias = g.constant(t(&[2], &[0., 0.]));
        let x = g.constant(t(&[2, 2], &[5., 5., 1., 3.]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let d = g.value(y).data();
        assert_eq!(&d[..2], &[0.0, 0.0]);
        assert!((d[2] + 1.0).abs() < 1e-5 && (d[3] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn relu_values_and_zero_linear() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[-1., 2.]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
        let x = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(t(&[2], &[0.25, -1.5]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -1.5, 0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[3.0]));
        let y = g.add(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn single_token_attention_returns_values() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[1, 1, 1, 4], &[5., -3., 2., 1.]));
        let k = g.constant(t(&[1, 1, 1, 4], &[-7., 0.5, 2., 9.]));
        let v = g.constant(t(&[1, 1, 1, 4], &[0.1, 0.2, 0.3, 0.4]));
        let o = g.attention(q, k, v, 2, false).unwrap();
        assert_eq!(g.value(o).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let mut g = Graph::<f64>::new();
        let tok = [0.3, -1.2, 0.7, 2.0];
        let both: Vec<f64> = tok.iter().chain(tok.iter()).copied().collect();
        let q = g.constant(t(&[1, 2, 1, 4], &both));
        let o = g.attention(q, q, q, 1, false).unwrap();
        let p = g.attention_probs(o).unwrap();
        assert!(p.iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn causal_mask_hides_future() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[1, 3, 1, 2], &[1., 0., 0., 1., 1., 1.]));
        let o = g.attention(q, q, q, 1, true).unwrap();
        let p = g.attention_probs(o).unwrap();
        assert_eq!(p[1], 0.0);
        assert_eq!(p[2], 0.0);
        assert_eq!(p[5], 0.0);
        assert_eq!(&g.value(o).data()[..2], &[1.0, 0.0]);
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(&[1, 2, 1, 6]));
        assert!(matches!(
            g.attention(q, q, q, 4, false),
            Err(GidError::Config(_))
        ));
    }

    #[test]
    fn expand_and_reduce() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2, 1], &[1., 2.]));
        let e = g.expand(a, &[3, 2, 4]).unwrap();
        assert_eq!(g.shape(e), &[3, 2, 4]);
        assert_eq!(g.value(e).get(&[2, 1, 3]), 2.0);
        let s = g.sum(e);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[12.0, 12.0]);
    }

    #[test]
    fn mae_values() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 2], &[2., 3., 4., 5.]));
        let l = g.mae(a, b).unwrap();
        assert_eq!(g.value(l).data(), &[1.0]);
        let l = g.mae(a, a).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
    }
}
